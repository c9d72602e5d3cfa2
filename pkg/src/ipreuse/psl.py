"""Public Suffix List matching (normal, wildcard and exception rules).

The prevailing rule for a host is an exception rule if one matches, else the
matching rule with the most labels, else the implicit ``*`` rule.  The public
suffix is the prevailing rule's match (minus the leftmost label for
exceptions); the registrable domain is that plus one more label.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def _to_ascii(label: str) -> str:
    if label.isascii():
        return label.lower()
    try:
        return label.encode("idna").decode("ascii")
    except UnicodeError:
        return label.lower()


def normalize(host: str) -> str:
    return ".".join(_to_ascii(lab) for lab in host.split("."))


class PublicSuffixList:
    def __init__(self, rules: set[str], wildcards: set[str], exceptions: set[str]) -> None:
        self.rules = rules
        self.wildcards = wildcards  # stored without the leading "*."
        self.exceptions = exceptions  # stored without the leading "!"

    @classmethod
    def parse(cls, text: str, include_private: bool = True) -> PublicSuffixList:
        rules: set[str] = set()
        wildcards: set[str] = set()
        exceptions: set[str] = set()
        private = False
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("//"):
                if "===BEGIN PRIVATE DOMAINS===" in line:
                    private = True
                elif "===END PRIVATE DOMAINS===" in line:
                    private = False
                continue
            if not line or (private and not include_private):
                continue
            rule = line.split()[0]
            if rule.startswith("!"):
                exceptions.add(normalize(rule[1:]))
            elif rule.startswith("*."):
                wildcards.add(normalize(rule[2:]))
            else:
                rules.add(normalize(rule))
        return cls(rules, wildcards, exceptions)

    @classmethod
    def from_file(cls, path: str | Path, include_private: bool = True) -> PublicSuffixList:
        return cls.parse(Path(path).read_text(encoding="utf-8"), include_private)

    @classmethod
    def bundled(cls, include_private: bool = False) -> PublicSuffixList:
        text = resources.files("ipreuse.data").joinpath("public_suffix_list.dat").read_text(encoding="utf-8")
        return cls.parse(text, include_private)

    def public_suffix(self, host: str) -> str:
        labels = normalize(host.rstrip(".")).split(".")
        if "" in labels:
            raise ValueError(f"empty label in {host!r}")
        n = len(labels)
        best = 1  # implicit "*" rule
        for i in range(n):
            cand = ".".join(labels[i:])
            if cand in self.exceptions:
                return ".".join(labels[i + 1:])
            size = n - i
            if size > best and cand in self.rules:
                best = size
            if i > 0 and size + 1 > best and cand in self.wildcards:
                best = size + 1
        return ".".join(labels[n - best:])

    def split(self, host: str) -> tuple[str | None, str]:
        """Return ``(registrable domain, public suffix)``; the domain is None when
        the host is itself a public suffix."""
        host = normalize(host.rstrip("."))
        etld = self.public_suffix(host)
        if host == etld:
            return None, etld
        head = host[: -len(etld) - 1]
        return f"{head.rsplit('.', 1)[-1]}.{etld}", etld
