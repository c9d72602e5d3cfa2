"""Four-stage triage of telescope sessions.

Stages run in a fixed order and each one only removes sessions:

network
    source address is on a blocklist
transport
    source touched more than one of our addresses or more than one port
session
    handshake never completed, or the client sent nothing
application
    payload or request matches an exclusion rule (shellcode markers, legacy
    ICS/database protocols, peer-to-peer handshakes, proxy requests, Route53
    health checks, user rules)

Sessions are read from JSON lines; ``payload_prefix`` is base64.
"""

from __future__ import annotations

import base64
import binascii
import ipaddress
import json
import re
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .prefixes import PrefixTable

PAYLOAD_CAP = 4096

STAGES = ("network", "transport", "session", "application")
KEPT = "kept"


class FunnelError(ValueError):
    pass


class MalformedRecord(FunnelError):
    pass


class MalformedRule(FunnelError):
    pass


@dataclass(frozen=True)
class HttpRequest:
    method: str
    path: str
    host: str | None = None
    user_agent: str | None = None


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    src_ip: str
    dst_ip: str
    dst_port: int
    start_time: float = 0.0
    handshake_complete: bool = True
    client_payload_len: int = 0
    payload_prefix: bytes = b""
    http: HttpRequest | None = None
    tls_sni: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "dst_port": self.dst_port,
            "start_time": self.start_time,
            "handshake_complete": self.handshake_complete,
            "client_payload_len": self.client_payload_len,
            "payload_prefix": base64.b64encode(self.payload_prefix).decode("ascii"),
            "http": None
            if self.http is None
            else {
                "method": self.http.method,
                "path": self.http.path,
                "host": self.http.host,
                "user_agent": self.http.user_agent,
            },
            "tls_sni": self.tls_sni,
        }


_REQUEST_LINE = re.compile(rb"^([A-Z]{3,10}) (\S+) HTTP/\d\.\d\r?\n")


def parse_http(payload: bytes) -> HttpRequest | None:
    """Parse the request line and Host/User-Agent headers; None if not HTTP."""
    m = _REQUEST_LINE.match(payload)
    if not m:
        return None
    host = ua = None
    for line in payload[m.end():].split(b"\n"):
        line = line.rstrip(b"\r")
        if not line:
            break
        name, sep, value = line.partition(b":")
        if not sep:
            continue
        key = name.strip().lower()
        if key == b"host" and host is None:
            host = value.strip().decode("latin-1")
        elif key == b"user-agent" and ua is None:
            ua = value.strip().decode("latin-1")
    return HttpRequest(m.group(1).decode("ascii"), m.group(2).decode("latin-1"), host, ua)


def parse_sni(payload: bytes) -> str | None:
    """Server name from a TLS ClientHello at the start of ``payload``."""
    try:
        if len(payload) < 9 or payload[0] != 0x16 or payload[1] != 0x03 or payload[5] != 0x01:
            return None
        pos = 9 + 2 + 32  # record hdr, handshake hdr, client version, random
        pos += 1 + payload[pos]
        pos += 2 + int.from_bytes(payload[pos:pos + 2], "big")
        pos += 1 + payload[pos]
        end = pos + 2 + int.from_bytes(payload[pos:pos + 2], "big")
        pos += 2
        while pos + 4 <= min(end, len(payload)):
            etype = int.from_bytes(payload[pos:pos + 2], "big")
            elen = int.from_bytes(payload[pos + 2:pos + 4], "big")
            body = payload[pos + 4:pos + 4 + elen]
            if etype == 0 and len(body) >= 5 and body[2] == 0:
                nlen = int.from_bytes(body[3:5], "big")
                name = body[5:5 + nlen]
                return name.decode("ascii") if len(name) == nlen and nlen else None
            pos += 4 + elen
    except (IndexError, UnicodeDecodeError):
        return None
    return None


def _check_ip(value: Any, what: str) -> str:
    try:
        return str(ipaddress.IPv4Address(value))
    except (ValueError, TypeError):
        raise MalformedRecord(f"bad {what} {value!r}") from None


def session_from_json(obj: dict[str, Any]) -> SessionRecord:
    try:
        payload = base64.b64decode(obj.get("payload_prefix") or "", validate=True)[:PAYLOAD_CAP]
    except (binascii.Error, ValueError):
        raise MalformedRecord("payload_prefix is not base64") from None
    port = obj.get("dst_port")
    if not isinstance(port, int) or not 0 <= port <= 65535:
        raise MalformedRecord(f"bad dst_port {port!r}")
    plen = obj.get("client_payload_len", len(payload))
    if not isinstance(plen, int) or plen < len(payload):
        raise MalformedRecord("client_payload_len shorter than payload_prefix")
    http = obj.get("http")
    if http is not None:
        if not isinstance(http, dict) or "method" not in http or "path" not in http:
            raise MalformedRecord("http needs method and path")
        http = HttpRequest(http["method"], http["path"], http.get("host"), http.get("user_agent"))
    else:
        http = parse_http(payload)
    sni = obj.get("tls_sni")
    if sni is None:
        sni = parse_sni(payload)
    if "session_id" not in obj:
        raise MalformedRecord("missing session_id")
    return SessionRecord(
        session_id=str(obj["session_id"]),
        src_ip=_check_ip(obj.get("src_ip"), "src_ip"),
        dst_ip=_check_ip(obj.get("dst_ip"), "dst_ip"),
        dst_port=port,
        start_time=float(obj.get("start_time", 0.0)),
        handshake_complete=bool(obj.get("handshake_complete", True)),
        client_payload_len=plen,
        payload_prefix=payload,
        http=http,
        tls_sni=sni,
    )


def load_sessions(path: str | Path) -> list[SessionRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise MalformedRecord("record is not an object")
                out.append(session_from_json(obj))
            except (json.JSONDecodeError, MalformedRecord) as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
    return out


def dump_sessions(sessions: Iterable[SessionRecord], fh) -> None:
    for s in sessions:
        fh.write(json.dumps(s.to_json()) + "\n")


# -- rules -------------------------------------------------------------------

RULE_KINDS = ("substring_ci", "ua_prefix", "port_eq", "magic_hex")


@dataclass(frozen=True)
class Rule:
    name: str
    kind: str
    pattern: str
    reason: str = ""
    _needle: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.name:
            raise MalformedRule("rule needs a name")
        if not self.reason:
            object.__setattr__(self, "reason", self.name)
        if self.kind == "substring_ci":
            if not self.pattern:
                raise MalformedRule(f"{self.name}: empty pattern")
            needle: Any = self.pattern.encode("ascii", "strict").lower()
        elif self.kind == "ua_prefix":
            if not self.pattern:
                raise MalformedRule(f"{self.name}: empty pattern")
            needle = self.pattern
        elif self.kind == "port_eq":
            try:
                needle = int(self.pattern)
            except ValueError:
                raise MalformedRule(f"{self.name}: port {self.pattern!r} is not an integer") from None
            if not 0 <= needle <= 65535:
                raise MalformedRule(f"{self.name}: port {needle} out of range")
        elif self.kind == "magic_hex":
            try:
                needle = bytes.fromhex(self.pattern)
            except ValueError:
                raise MalformedRule(f"{self.name}: bad hex {self.pattern!r}") from None
            if not needle:
                raise MalformedRule(f"{self.name}: empty pattern")
        elif self.kind in _DETECTORS:
            needle = None
        else:
            raise MalformedRule(f"{self.name}: unknown kind {self.kind!r}")
        object.__setattr__(self, "_needle", needle)

    def matches(self, s: SessionRecord) -> bool:
        kind = self.kind
        if kind == "substring_ci":
            return self._needle in s.payload_prefix.lower()
        if kind == "ua_prefix":
            return s.http is not None and s.http.user_agent is not None and s.http.user_agent.startswith(self._needle)
        if kind == "port_eq":
            return s.dst_port == self._needle
        if kind == "magic_hex":
            return s.payload_prefix.startswith(self._needle)
        return _DETECTORS[kind](s)


# TDS packet types: SQL batch, pre-TDS7 login, RPC, tabular result, attention,
# bulk load, federated auth, transaction manager, TDS7 login, SSPI, prelogin
_TDS_TYPES = frozenset({0x01, 0x02, 0x03, 0x04, 0x06, 0x07, 0x08, 0x0E, 0x10, 0x11, 0x12})


def _is_dnp3(s: SessionRecord) -> bool:
    # link-layer start bytes 0x05 0x64
    return s.dst_port == 20000 and s.payload_prefix[:2] == b"\x05\x64"


def _is_tds(s: SessionRecord) -> bool:
    p = s.payload_prefix
    return s.dst_port == 1433 and len(p) >= 8 and p[0] in _TDS_TYPES


def _is_proxy_connect(s: SessionRecord) -> bool:
    return s.http is not None and s.http.method == "CONNECT"


def _is_proxy_uri(s: SessionRecord) -> bool:
    return s.http is not None and s.http.path.lower().startswith(("http://", "https://"))


_DETECTORS = {
    "dnp3": _is_dnp3,
    "tds": _is_tds,
    "http_connect": _is_proxy_connect,
    "http_full_uri": _is_proxy_uri,
}


def builtin_rules() -> list[Rule]:
    """Exclusion rules applied before any user rules, in precedence order.

    Skype has no built-in signature; add one through a rules file with a name
    starting ``p2p``.
    """
    return [
        Rule("shellcode_wget", "substring_ci", "wget", "shellcode"),
        Rule("shellcode_curl", "substring_ci", "curl", "shellcode"),
        Rule("shellcode_chmod", "substring_ci", "chmod", "shellcode"),
        Rule("shellcode_shell", "substring_ci", "shell", "shellcode"),
        Rule("dnp3", "dnp3", "", "dnp3"),
        Rule("tds", "tds", "", "tds"),
        Rule("p2p_bittorrent", "magic_hex", "13" + b"BitTorrent protocol".hex(), "p2p"),
        Rule("p2p_bitcoin_main", "magic_hex", "f9beb4d9", "p2p"),
        Rule("p2p_bitcoin_testnet3", "magic_hex", "0b110907", "p2p"),
        Rule("p2p_bitcoin_signet", "magic_hex", "0a03cf40", "p2p"),
        Rule("p2p_bitcoin_regtest", "magic_hex", "fabfb5da", "p2p"),
        # libp2p multistream-select greeting used by IPFS nodes
        Rule("p2p_ipfs", "magic_hex", "13" + b"/multistream/1.0.0\n".hex(), "p2p"),
        Rule("proxy_connect", "http_connect", "", "proxy"),
        Rule("proxy_full_uri", "http_full_uri", "", "proxy"),
        Rule("healthcheck_route53", "ua_prefix", "Amazon-Route53-Health-Check-Service", "healthcheck"),
    ]


def load_rules(path: str | Path) -> list[Rule]:
    """Parse ``name<TAB>kind<TAB>pattern`` lines; blank lines and ``#`` lines skipped.

    A rule's reason is its name up to the first underscore, so ``p2p_skype``
    is reported alongside the built-in p2p signatures.
    """
    rules = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedRule(f"{path}:{lineno}: expected name<TAB>kind<TAB>pattern")
            name, kind, pattern = parts
            if kind not in RULE_KINDS:
                raise MalformedRule(f"{path}:{lineno}: kind must be one of {', '.join(RULE_KINDS)}")
            try:
                name = name.strip()
                rules.append(Rule(name, kind, pattern, name.split("_", 1)[0]))
            except (MalformedRule, UnicodeEncodeError) as exc:
                raise MalformedRule(f"{path}:{lineno}: {exc}") from None
    return rules


# -- stages ------------------------------------------------------------------


@dataclass
class Partition:
    kept: list[SessionRecord]
    dropped: list[tuple[SessionRecord, str, str]]  # (session, reason, rule)


def stage_network(sessions: Sequence[SessionRecord], blocklist: PrefixTable) -> Partition:
    part = Partition([], [])
    for s in sessions:
        if s.src_ip in blocklist:
            part.dropped.append((s, "blocklist", "blocklist"))
        else:
            part.kept.append(s)
    return part


def stage_transport(sessions: Sequence[SessionRecord]) -> Partition:
    """Keep sources that reached exactly one of our addresses on exactly one port."""
    ips: dict[str, set[str]] = defaultdict(set)
    ports: dict[str, set[int]] = defaultdict(set)
    for s in sessions:
        ips[s.src_ip].add(s.dst_ip)
        ports[s.src_ip].add(s.dst_port)
    part = Partition([], [])
    for s in sessions:
        if len(ips[s.src_ip]) > 1:
            part.dropped.append((s, "multi_ip", "multi_ip"))
        elif len(ports[s.src_ip]) > 1:
            part.dropped.append((s, "multi_port", "multi_port"))
        else:
            part.kept.append(s)
    return part


def stage_session(sessions: Sequence[SessionRecord]) -> Partition:
    part = Partition([], [])
    for s in sessions:
        if not s.handshake_complete:
            part.dropped.append((s, "no_handshake", "no_handshake"))
        elif s.client_payload_len <= 0:
            part.dropped.append((s, "no_payload", "no_payload"))
        else:
            part.kept.append(s)
    return part


def stage_application(sessions: Sequence[SessionRecord], rules: Sequence[Rule]) -> Partition:
    part = Partition([], [])
    for s in sessions:
        for rule in rules:
            if rule.matches(s):
                part.dropped.append((s, rule.reason, rule.name))
                break
        else:
            part.kept.append(s)
    return part


@dataclass
class FunnelConfig:
    blocklist: PrefixTable = field(default_factory=PrefixTable)
    rules: list[Rule] = field(default_factory=builtin_rules)


@dataclass(frozen=True)
class StageVerdict:
    session_id: str
    stage: str  # one of STAGES or KEPT
    reason: str
    rule: str = ""


@dataclass(frozen=True)
class StageCounts:
    stage: str
    ips: int
    sessions: int
    bytes: int


def _counts(stage: str, sessions: Sequence[SessionRecord]) -> StageCounts:
    return StageCounts(
        stage,
        len({s.src_ip for s in sessions}),
        len(sessions),
        sum(s.client_payload_len for s in sessions),
    )


@dataclass
class FunnelReport:
    rows: list[StageCounts]
    verdicts: list[StageVerdict]
    survivors: list[SessionRecord]

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [vars(r).copy() for r in self.rows],
            "verdicts": [vars(v).copy() for v in self.verdicts],
        }


def run_funnel(sessions: Sequence[SessionRecord], config: FunnelConfig | None = None) -> FunnelReport:
    config = config or FunnelConfig()
    rows = [_counts("initial", sessions)]
    verdict: dict[int, StageVerdict] = {}
    current: Sequence[SessionRecord] = sessions
    for stage in STAGES:
        if stage == "network":
            part = stage_network(current, config.blocklist)
        elif stage == "transport":
            part = stage_transport(current)
        elif stage == "session":
            part = stage_session(current)
        else:
            part = stage_application(current, config.rules)
        for s, reason, rule in part.dropped:
            verdict[id(s)] = StageVerdict(s.session_id, stage, reason, rule)
        current = part.kept
        rows.append(_counts(stage, current))
    for s in current:
        verdict[id(s)] = StageVerdict(s.session_id, KEPT, "")
    return FunnelReport(rows, [verdict[id(s)] for s in sessions], list(current))
