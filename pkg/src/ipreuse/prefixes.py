"""IPv4 prefix sets and longest-prefix lookup tables."""

from __future__ import annotations

import ipaddress
from collections.abc import Iterable
from pathlib import Path
from typing import Generic, TypeVar

V = TypeVar("V")


class MalformedCidr(ValueError):
    pass


def parse_cidr(text: str) -> ipaddress.IPv4Network:
    try:
        net = ipaddress.ip_network(text.strip(), strict=False)
    except ValueError as exc:
        raise MalformedCidr(f"bad CIDR {text!r}: {exc}") from None
    if net.version != 4:
        raise MalformedCidr(f"only IPv4 prefixes are supported: {text!r}")
    return net


class PrefixTable(Generic[V]):
    """Maps IPv4 prefixes to values; lookups return the longest match.

    The first value inserted for a given prefix is kept.
    """

    def __init__(self, items: Iterable[tuple[str | ipaddress.IPv4Network, V]] = ()) -> None:
        self._by_len: dict[int, dict[int, V]] = {}
        self._lengths: list[int] = []
        self._count = 0
        for prefix, value in items:
            self.add(prefix, value)

    def add(self, prefix: str | ipaddress.IPv4Network, value: V) -> None:
        net = prefix if isinstance(prefix, ipaddress.IPv4Network) else parse_cidr(prefix)
        plen = net.prefixlen
        table = self._by_len.get(plen)
        if table is None:
            table = self._by_len[plen] = {}
            self._lengths = sorted(self._by_len, reverse=True)
        key = int(net.network_address) >> (32 - plen)
        if key not in table:
            table[key] = value
            self._count += 1

    def __len__(self) -> int:
        return self._count

    def lookup(self, ip: str | int | ipaddress.IPv4Address) -> V | None:
        addr = int(ipaddress.IPv4Address(ip))
        for plen in self._lengths:
            hit = self._by_len[plen].get(addr >> (32 - plen))
            if hit is not None:
                return hit
        return None

    def __contains__(self, ip: object) -> bool:
        return self.lookup(ip) is not None  # type: ignore[arg-type]


def load_netset(paths: Iterable[str | Path]) -> PrefixTable[bool]:
    """Load FireHOL-style blocklists: one address or CIDR per line, ``#`` comments."""
    table: PrefixTable[bool] = PrefixTable()
    for path in paths:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    table.add(parse_cidr(line), True)
                except MalformedCidr as exc:
                    raise MalformedCidr(f"{path}:{lineno}: {exc}") from None
    return table
