"""Attribute sessions to managed cloud services and to DNS names.

Source addresses are matched against published cloud ranges; HTTP user agents
against a table of known service agents.  Host identifiers (HTTP ``Host`` or
TLS SNI) are classified as IP literals, IP-based names (``ec2-A-B-C-D...``),
wildcard-DNS names or ordinary domains, and ordinary domains are split into
registrable domain and public suffix, checked against an offline resolution
snapshot and ranked.
"""

from __future__ import annotations

import csv
import enum
import ipaddress
import json
import re
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .funnel import SessionRecord
from .prefixes import MalformedCidr, PrefixTable, parse_cidr
from .psl import PublicSuffixList, normalize

EXTERNAL = "External"
DEFAULT_WILDCARD_PROVIDERS = frozenset({"xip.io", "nip.io", "sslip.io"})


class AttributionError(ValueError):
    pass


class MalformedHost(AttributionError):
    pass


class HostNotUnderSld(AttributionError):
    pass


# -- reference data ----------------------------------------------------------


def load_cloud_ranges(path: str | Path) -> PrefixTable[str]:
    """Read ``{"prefixes": [{"ip_prefix", "service"}, ...]}`` or a bare list."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AttributionError(f"{path}: {exc}") from None
    entries = doc.get("prefixes") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise AttributionError(f"{path}: expected a list of prefixes")
    table: PrefixTable[str] = PrefixTable()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or not e.get("ip_prefix") or not e.get("service"):
            raise AttributionError(f"{path}: entry {i} needs ip_prefix and service")
        try:
            table.add(parse_cidr(e["ip_prefix"]), str(e["service"]))
        except MalformedCidr as exc:
            raise AttributionError(f"{path}: entry {i}: {exc}") from None
    return table


def classify_source(src_ip: str, ranges: PrefixTable[str]) -> str:
    return ranges.lookup(src_ip) or EXTERNAL


def load_user_agents(path: str | Path | None = None) -> list[tuple[str, str]]:
    """``prefix<TAB>service`` lines; the bundled table when ``path`` is None."""
    if path is None:
        text = resources.files("ipreuse.data").joinpath("user_agents.tsv").read_text()
    else:
        text = Path(path).read_text()
    table = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].strip():
            raise AttributionError(f"user agent table line {lineno}: expected prefix<TAB>service")
        table.append((parts[0], parts[1].strip()))
    # longest prefix first so specific agents win
    table.sort(key=lambda kv: -len(kv[0]))
    return table


_UA_TABLE: list[tuple[str, str]] | None = None


def service_from_user_agent(ua: str | None, table: Sequence[tuple[str, str]] | None = None) -> str | None:
    global _UA_TABLE
    if not ua:
        return None
    if table is None:
        if _UA_TABLE is None:
            _UA_TABLE = load_user_agents()
        table = _UA_TABLE
    for prefix, service in table:
        if ua.startswith(prefix):
            return service
    return None


def load_ranks(path: str | Path) -> dict[str, int]:
    """``rank,domain`` lines (Tranco format); the best rank wins for repeats."""
    ranks: dict[str, int] = {}
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or rec[0].startswith("#"):
                continue
            try:
                rank, domain = int(rec[0]), rec[1].strip().lower().rstrip(".")
            except (ValueError, IndexError):
                raise AttributionError(f"{path}:{lineno}: expected rank,domain") from None
            if rank <= 0 or not domain:
                raise AttributionError(f"{path}:{lineno}: rank must be positive")
            if domain not in ranks or rank < ranks[domain]:
                ranks[domain] = rank
    return ranks


def load_snapshot(path: str | Path) -> dict[str, frozenset[str]]:
    """``host,ip`` pairs from an offline resolution snapshot."""
    snap: dict[str, set[str]] = defaultdict(set)
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or rec[0].startswith("#"):
                continue
            if len(rec) != 2:
                raise AttributionError(f"{path}:{lineno}: expected host,ip")
            try:
                ip = str(ipaddress.IPv4Address(rec[1].strip()))
            except ValueError:
                raise AttributionError(f"{path}:{lineno}: bad address {rec[1]!r}") from None
            snap[normalize(rec[0].strip().rstrip("."))].add(ip)
    return {h: frozenset(ips) for h, ips in snap.items()}


# -- host classification -----------------------------------------------------


class HostKind(str, enum.Enum):
    IP_LITERAL = "ip_literal"
    IPBN = "ipbn"
    WILDCARD_DNS = "wildcard_dns"
    DOMAIN = "domain"


_LABEL = re.compile(r"^[a-z0-9_](?:[a-z0-9_-]*[a-z0-9_])?$")
_DOTTED_QUAD = re.compile(r"^\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}$")
_IPBN = re.compile(
    r"^ec2-(\d{1,3})-(\d{1,3})-(\d{1,3})-(\d{1,3})\."
    r"(?:compute-1|[a-z]+-[a-z]+-\d\.compute)\.amazonaws\.com$"
)


def clean_host(raw: str) -> str:
    """Lowercase, drop a trailing dot and any ``:port``, punycode non-ASCII labels."""
    host = raw.strip()
    if host.startswith("["):
        raise MalformedHost(f"IPv6 host {raw!r} not supported")
    if host.count(":") == 1:
        host, _, port = host.partition(":")
        if not port.isdigit():
            raise MalformedHost(f"bad port in {raw!r}")
    host = host.rstrip(".")
    if not host:
        raise MalformedHost("empty host")
    return normalize(host)


def _quad(parts: Sequence[str]) -> str | None:
    if all(int(p) <= 255 for p in parts):
        return ".".join(str(int(p)) for p in parts)
    return None


@dataclass(frozen=True)
class Flags:
    two_digits: bool = False
    encodes_ip: bool = False


@dataclass(frozen=True)
class HostClassification:
    kind: HostKind
    raw: str
    ip: str | None = None  # IP literal or the address embedded in an IPBN
    sld: str | None = None
    etld: str | None = None
    depth: int | None = None
    flags: Flags | None = None


def classify_host(raw: str, wildcard_providers: Iterable[str] = DEFAULT_WILDCARD_PROVIDERS) -> HostClassification:
    host = clean_host(raw)
    labels = host.split(".")
    if any(not lab for lab in labels):
        raise MalformedHost(f"empty label in {raw!r}")
    if _DOTTED_QUAD.match(host):
        ip = _quad(labels)
        if ip is None:
            raise MalformedHost(f"octet out of range in {raw!r}")
        return HostClassification(HostKind.IP_LITERAL, raw, ip=ip)
    bad = [lab for lab in labels if not _LABEL.match(lab)]
    if bad:
        raise MalformedHost(f"illegal characters in label {bad[0]!r} of {raw!r}")
    m = _IPBN.match(host)
    if m and (ip := _quad(m.groups())) is not None:
        return HostClassification(HostKind.IPBN, raw, ip=ip)
    for provider in wildcard_providers:
        if host == provider or host.endswith("." + provider):
            return HostClassification(HostKind.WILDCARD_DNS, raw)
    return HostClassification(HostKind.DOMAIN, raw)


def sld_etld(host: str, psl: PublicSuffixList) -> tuple[str | None, str]:
    return psl.split(clean_host(host))


def subdomain_depth(host: str, sld: str) -> int:
    host, sld = clean_host(host), clean_host(sld)
    if host != sld and not host.endswith("." + sld):
        raise HostNotUnderSld(f"{host} is not under {sld}")
    return host.count(".") - sld.count(".")


def automation_flags(host: str, dst_ip: str | None, sld: str | None = None) -> Flags:
    """Digit-heavy or address-bearing subdomain labels.

    Without ``sld`` the last two labels are taken as the registrable domain.
    """
    host = clean_host(host)
    labels = host.split(".")
    keep = sld.count(".") + 1 if sld else 2
    sub = labels[: max(len(labels) - keep, 0)]
    two_digits = any(sum(c.isdigit() for c in lab) >= 2 for lab in sub)
    encodes = False
    if dst_ip and sub:
        dashed = re.compile(r"(?<!\d)" + re.escape(dst_ip.replace(".", "-")) + r"(?!\d)")
        octets = dst_ip.split(".")
        encodes = any(dashed.search(lab) for lab in sub) or any(
            sub[i:i + 4] == octets for i in range(len(sub) - 3)
        )
    return Flags(two_digits, encodes)


class DnsCheck(str, enum.Enum):
    VALID = "valid"
    MISMATCH = "mismatch"
    NOT_IN_SNAPSHOT = "not_in_snapshot"

    def __bool__(self) -> bool:
        return self is DnsCheck.VALID


def validate_domain(host: str, dst_ip: str, snapshot: Mapping[str, frozenset[str]]) -> DnsCheck:
    ips = snapshot.get(clean_host(host))
    if ips is None:
        return DnsCheck.NOT_IN_SNAPSHOT
    return DnsCheck.VALID if dst_ip in ips else DnsCheck.MISMATCH


# -- report ------------------------------------------------------------------

RANK_BUCKETS = (1_000, 10_000, 1_000_000)


@dataclass(frozen=True)
class SessionAttribution:
    session_id: str
    source: str
    ua_service: str | None
    host: str | None
    host_from: str | None  # "http" or "sni"
    inconsistent: bool = False
    malformed: bool = False
    kind: HostKind | None = None
    ip: str | None = None
    dns: DnsCheck | None = None
    sld: str | None = None
    etld: str | None = None
    depth: int | None = None
    rank: int | None = None
    flags: Flags | None = None

    def to_dict(self) -> dict[str, Any]:
        d = dict(vars(self))
        d["kind"] = self.kind.value if self.kind else None
        d["dns"] = self.dns.value if self.dns else None
        d["flags"] = vars(self.flags).copy() if self.flags else None
        return d


@dataclass
class AttributionReport:
    sessions: list[SessionAttribution]
    source_counts: dict[str, int]
    ua_service_counts: dict[str, int]
    host_kind_counts: dict[str, int]
    host_kind_shares: dict[str, float]
    dns_counts: dict[str, int]
    unique_slds: int
    etld_counts: dict[str, int]  # distinct validated SLDs per public suffix
    slds: dict[str, dict[str, Any]]
    rank_buckets: dict[str, int]
    automation: dict[str, int]
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, include_sessions: bool = True) -> dict[str, Any]:
        d = {k: v for k, v in vars(self).items() if k not in ("sessions", "extra")}
        if include_sessions:
            d["sessions"] = [s.to_dict() for s in self.sessions]
        return d


def _host_of(s: SessionRecord) -> tuple[str | None, str | None, bool]:
    http_host = s.http.host if s.http and s.http.host else None
    sni = s.tls_sni or None
    if http_host and sni:
        try:
            differ = clean_host(http_host) != clean_host(sni)
        except MalformedHost:
            differ = http_host != sni
        return http_host, "http", differ
    if http_host:
        return http_host, "http", False
    if sni:
        return sni, "sni", False
    return None, None, False


def attribute_session(
    s: SessionRecord,
    ranges: PrefixTable[str],
    psl: PublicSuffixList,
    ranks: Mapping[str, int],
    snapshot: Mapping[str, frozenset[str]],
    wildcard_providers: Iterable[str] = DEFAULT_WILDCARD_PROVIDERS,
    ua_table: Sequence[tuple[str, str]] | None = None,
) -> SessionAttribution:
    base = dict(
        session_id=s.session_id,
        source=classify_source(s.src_ip, ranges),
        ua_service=service_from_user_agent(s.http.user_agent if s.http else None, ua_table),
    )
    host, origin, inconsistent = _host_of(s)
    if host is None:
        return SessionAttribution(host=None, host_from=None, **base)
    try:
        hc = classify_host(host, wildcard_providers)
    except MalformedHost:
        return SessionAttribution(host=host, host_from=origin, inconsistent=inconsistent, malformed=True, **base)
    extra: dict[str, Any] = {}
    if hc.kind is HostKind.DOMAIN:
        sld, etld = sld_etld(host, psl)
        extra = dict(
            dns=validate_domain(host, s.dst_ip, snapshot),
            sld=sld,
            etld=etld,
            depth=subdomain_depth(host, sld) if sld else None,
            rank=ranks.get(sld) if sld else None,
            flags=automation_flags(host, s.dst_ip, sld or etld),
        )
    return SessionAttribution(
        host=host, host_from=origin, inconsistent=inconsistent, kind=hc.kind, ip=hc.ip, **base, **extra
    )


def attribute_report(
    sessions: Sequence[SessionRecord],
    ranges: PrefixTable[str],
    psl: PublicSuffixList,
    ranks: Mapping[str, int],
    snapshot: Mapping[str, frozenset[str]],
    wildcard_providers: Iterable[str] = DEFAULT_WILDCARD_PROVIDERS,
    ua_table: Sequence[tuple[str, str]] | None = None,
) -> AttributionReport:
    """Per-session attribution plus aggregates.

    Domain aggregates (SLDs, suffixes, depths, ranks, automation) cover only
    DNS-validated, consistent, ordinary domain names.
    """
    providers = frozenset(wildcard_providers)
    rows = [attribute_session(s, ranges, psl, ranks, snapshot, providers, ua_table) for s in sessions]

    sources = Counter(r.source for r in rows)
    ua = Counter(r.ua_service for r in rows if r.ua_service)
    kinds = Counter(r.kind.value for r in rows if r.kind is not None)
    with_host = sum(kinds.values())
    ip_lit = kinds.get(HostKind.IP_LITERAL.value, 0)
    ipbn = kinds.get(HostKind.IPBN.value, 0)
    shares = {
        "ip_literal": ip_lit / with_host if with_host else 0.0,
        "ipbn": ipbn / with_host if with_host else 0.0,
        "other": (with_host - ip_lit - ipbn) / with_host if with_host else 0.0,
    }
    dns = Counter(r.dns.value for r in rows if r.dns is not None)

    per_sld: dict[str, dict[str, Any]] = {}
    hosts_by_sld: dict[str, set[str]] = defaultdict(set)
    etlds: dict[str, set[str]] = defaultdict(set)
    digit_hosts: set[str] = set()
    ip_hosts: set[str] = set()
    for r in rows:
        if r.kind is not HostKind.DOMAIN or r.inconsistent or not r.dns or r.sld is None:
            continue
        host = clean_host(r.host)  # type: ignore[arg-type]
        hosts_by_sld[r.sld].add(host)
        etlds[r.etld].add(r.sld)  # type: ignore[index]
        entry = per_sld.setdefault(
            r.sld, {"etld": r.etld, "rank": r.rank, "min_depth": r.depth, "two_digits": False, "encodes_ip": False}
        )
        entry["min_depth"] = min(entry["min_depth"], r.depth)
        if r.flags and r.flags.two_digits:
            entry["two_digits"] = True
            digit_hosts.add(host)
        if r.flags and r.flags.encodes_ip:
            entry["encodes_ip"] = True
            ip_hosts.add(host)
    slds = {}
    for name in sorted(per_sld):
        slds[name] = dict(per_sld[name], unique_hosts=len(hosts_by_sld[name]))
    buckets = {
        f"top_{b}": sum(1 for v in slds.values() if v["rank"] is not None and v["rank"] <= b) for b in RANK_BUCKETS
    }
    automation = {
        "slds_two_digits": sum(v["two_digits"] for v in slds.values()),
        "slds_encode_ip": sum(v["encodes_ip"] for v in slds.values()),
        "hosts_two_digits": len(digit_hosts),
        "hosts_encode_ip": len(ip_hosts),
    }
    return AttributionReport(
        sessions=rows,
        source_counts=dict(sorted(sources.items())),
        ua_service_counts=dict(sorted(ua.items())),
        host_kind_counts=dict(sorted(kinds.items())),
        host_kind_shares=shares,
        dns_counts=dict(sorted(dns.items())),
        unique_slds=len(slds),
        etld_counts={k: len(v) for k, v in sorted(etlds.items())},
        slds=slds,
        rank_buckets=buckets,
        automation=automation,
        extra={
            "sessions_with_host": with_host,
            "inconsistent": sum(r.inconsistent for r in rows),
            "malformed_hosts": sum(r.malformed for r in rows),
        },
    )
