import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from funnel_corpus import client_hello
from ipreuse.attribute import (
    EXTERNAL,
    AttributionError,
    DnsCheck,
    HostKind,
    HostNotUnderSld,
    MalformedHost,
    attribute_report,
    automation_flags,
    classify_host,
    classify_source,
    load_cloud_ranges,
    load_ranks,
    load_snapshot,
    load_user_agents,
    service_from_user_agent,
    sld_etld,
    subdomain_depth,
    validate_domain,
)
from ipreuse.funnel import SessionRecord, parse_http, parse_sni
from ipreuse.prefixes import PrefixTable
from ipreuse.psl import PublicSuffixList

PSL = PublicSuffixList.bundled()
RANGES = PrefixTable([("52.94.0.0/16", "SNS"), ("52.94.76.0/22", "Route53"), ("54.0.0.0/8", "EC2")])


def session(sid, host=None, sni=None, dst="203.0.113.15", src="198.51.100.1", ua=None):
    if host is not None:
        lines = [f"GET / HTTP/1.1", f"Host: {host}"] + ([f"User-Agent: {ua}"] if ua else [])
        payload = ("\r\n".join(lines) + "\r\n\r\n").encode()
    elif sni is not None:
        payload = client_hello(sni)
    else:
        payload = b"\x00\x01"
    return SessionRecord(sid, src, dst, 80, payload_prefix=payload, client_payload_len=len(payload),
                         http=parse_http(payload), tls_sni=parse_sni(payload))  # fmt: skip


# -- host kinds ----------------------------------------------------------------


def test_ipbn_example():
    h = classify_host("ec2-203-0-113-15.compute-1.amazonaws.com")
    assert (h.kind, h.ip) == (HostKind.IPBN, "203.0.113.15")


@pytest.mark.parametrize(
    "raw, kind, ip",
    [
        ("203.0.113.15", HostKind.IP_LITERAL, "203.0.113.15"),
        ("203.0.113.15:8080", HostKind.IP_LITERAL, "203.0.113.15"),
        ("203.0.113.15.xip.io", HostKind.WILDCARD_DNS, None),
        ("app.10.0.0.1.nip.io", HostKind.WILDCARD_DNS, None),
        ("EC2-54-1-2-3.us-west-2.compute.amazonaws.com.", HostKind.IPBN, "54.1.2.3"),
        ("ec2-300-1-2-3.compute-1.amazonaws.com", HostKind.DOMAIN, None),
        ("ec2-1-2-3-4.example.com", HostKind.DOMAIN, None),
        ("sub.example.com", HostKind.DOMAIN, None),
    ],
)
def test_host_kinds(raw, kind, ip):
    h = classify_host(raw)
    assert (h.kind, h.ip) == (kind, ip)


@pytest.mark.parametrize("raw", ["", "a..b", "bad host.com", "x.example.com:http", "[::1]", "999.1.1.1", "-a.com"])
def test_malformed_hosts(raw):
    with pytest.raises(MalformedHost):
        classify_host(raw)


def test_custom_wildcard_providers():
    assert classify_host("1.2.3.4.sslip.io", {"xip.io"}).kind is HostKind.DOMAIN


@given(st.lists(st.from_regex(r"[a-z0-9]([a-z0-9-]{0,8}[a-z0-9])?", fullmatch=True), min_size=1, max_size=5))
def test_classification_total(labels):
    host = ".".join(labels)
    assert classify_host(host).kind in set(HostKind)


# -- SLD, eTLD, depth ---------------------------------------------------------------


@pytest.mark.parametrize(
    "host, expected",
    [
        ("sub.example.com", ("example.com", "com")),
        ("a.b.example.co.uk", ("example.co.uk", "co.uk")),
        ("example.com", ("example.com", "com")),
        ("co.uk", (None, "co.uk")),
        ("foo.bar.kawasaki.jp", ("foo.bar.kawasaki.jp", "bar.kawasaki.jp")),
        ("www.city.kawasaki.jp", ("city.kawasaki.jp", "kawasaki.jp")),
        ("host.nosuchtld", ("host.nosuchtld", "nosuchtld")),
    ],
)
def test_sld_etld(host, expected):
    assert sld_etld(host, PSL) == expected


@pytest.mark.parametrize(
    "host, sld, depth", [("sub.example.com", "example.com", 1), ("example.com", "example.com", 0), ("a.b.example.com", "example.com", 2)]
)
def test_depth(host, sld, depth):
    assert subdomain_depth(host, sld) == depth


def test_depth_requires_suffix():
    with pytest.raises(HostNotUnderSld):
        subdomain_depth("example.org", "example.com")
    with pytest.raises(HostNotUnderSld):
        subdomain_depth("notexample.com", "example.com")


@given(st.lists(st.from_regex(r"[a-z]{1,6}", fullmatch=True), min_size=0, max_size=4), st.sampled_from(["com", "co.uk", "kawasaki.jp", "zzz"]))
def test_split_round_trip(subs, suffix):
    host = ".".join([*subs, "name", suffix])
    sld, etld = sld_etld(host, PSL)
    if sld is None:  # *.kawasaki.jp makes name.kawasaki.jp a suffix
        assert host == etld
        return
    assert host.endswith("." + sld) or host == sld
    assert sld.endswith("." + etld)
    assert subdomain_depth(host, sld) == host.count(".") - sld.count(".")


# -- automation heuristics ---------------------------------------------------------


@pytest.mark.parametrize(
    "host, dst, flags",
    [
        ("host42a.example.com", None, (True, False)),
        ("ip-203-0-113-15.example.com", "203.0.113.15", (True, True)),
        ("www.example.com", "203.0.113.15", (False, False)),
        ("a1b.example.com", None, (False, False)),
        ("203.0.113.15.example.com", "203.0.113.15", (True, True)),
        ("ip-203-0-113-150.example.com", "203.0.113.15", (True, False)),
        ("web.host99.com", None, (False, False)),  # digits in the SLD itself do not count
    ],
)
def test_automation_flags(host, dst, flags):
    f = automation_flags(host, dst)
    assert (f.two_digits, f.encodes_ip) == flags


def test_automation_uses_given_sld():
    assert automation_flags("a12.example.co.uk", None, "example.co.uk").two_digits
    assert not automation_flags("example12.co.uk", None, "example12.co.uk").two_digits


# -- DNS validation, sources, agents --------------------------------------------------


def test_validate_domain():
    snap = {"api.example.com": frozenset({"203.0.113.15"})}
    assert validate_domain("api.example.com", "203.0.113.15", snap) is DnsCheck.VALID
    assert validate_domain("API.example.com.", "203.0.113.15", snap)
    assert validate_domain("api.example.com", "203.0.113.16", snap) is DnsCheck.MISMATCH
    r = validate_domain("other.example.com", "203.0.113.15", snap)
    assert r is DnsCheck.NOT_IN_SNAPSHOT and not r


def test_classify_source_longest_prefix():
    assert classify_source("52.94.77.1", RANGES) == "Route53"
    assert classify_source("52.94.1.1", RANGES) == "SNS"
    assert classify_source("8.8.8.8", RANGES) == EXTERNAL


@pytest.mark.parametrize(
    "ua, service",
    [
        ("Amazon Simple Notification Service Agent", "SNS"),
        ("Amazon-Route53-Health-Check-Service/1.0", "Route53HealthCheck"),
        ("Mozilla/5.0", None),
        (None, None),
    ],
)
def test_user_agents(ua, service):
    assert service_from_user_agent(ua) == service


def test_user_agent_longest_prefix(tmp_path):
    p = tmp_path / "ua.tsv"
    p.write_text("Amazon\tGeneric\nAmazon CloudFront\tCloudFront\n")
    assert service_from_user_agent("Amazon CloudFront", load_user_agents(p)) == "CloudFront"
    p.write_text("no tab here\n")
    with pytest.raises(AttributionError):
        load_user_agents(p)


def test_loaders(tmp_path):
    r = tmp_path / "ranges.json"
    r.write_text(json.dumps({"prefixes": [{"ip_prefix": "52.94.0.0/16", "service": "SNS"}]}))
    assert classify_source("52.94.3.3", load_cloud_ranges(r)) == "SNS"
    r.write_text(json.dumps([{"ip_prefix": "52.94.0.0/33", "service": "SNS"}]))
    with pytest.raises(AttributionError):
        load_cloud_ranges(r)

    k = tmp_path / "ranks.csv"
    k.write_text("1,google.com\n5,Example.com\n3,example.com\n")
    assert load_ranks(k) == {"google.com": 1, "example.com": 3}
    k.write_text("first,google.com\n")
    with pytest.raises(AttributionError):
        load_ranks(k)

    s = tmp_path / "snap.csv"
    s.write_text("api.example.com,203.0.113.15\nAPI.example.com.,203.0.113.16\n")
    assert load_snapshot(s) == {"api.example.com": frozenset({"203.0.113.15", "203.0.113.16"})}
    s.write_text("api.example.com,not-an-ip\n")
    with pytest.raises(AttributionError):
        load_snapshot(s)


# -- report ------------------------------------------------------------------------


def test_all_ip_literals():
    rep = attribute_report([session(f"s{k}", host=f"203.0.113.{k}") for k in range(5)], RANGES, PSL, {}, {})
    assert rep.host_kind_shares == {"ip_literal": 1.0, "ipbn": 0.0, "other": 0.0}


def test_report_aggregates():
    hosts = ["sub.example.com", "a.b.example.com", "x.example.co.uk", "node42.other.com", "stale.nowhere.com"]
    snap = {h: frozenset({"203.0.113.15"}) for h in hosts[:4]}
    sessions = [session(f"s{k}", host=h) for k, h in enumerate(hosts)]
    sessions += [
        session("ipbn", host="ec2-203-0-113-15.compute-1.amazonaws.com"),
        session("lit", host="203.0.113.15"),
        session("wild", host="203.0.113.15.xip.io"),
        session("tls", sni="sub.example.com"),
        session("none"),
        session("sns", host="203.0.113.15", src="52.94.5.5", ua="Amazon Simple Notification Service Agent"),
    ]
    rep = attribute_report(sessions, RANGES, PSL, {"example.com": 500, "other.com": 50_000}, snap)
    assert (rep.unique_slds, len(rep.etld_counts)) == (3, 2)
    assert rep.etld_counts == {"co.uk": 1, "com": 2}
    assert rep.slds["example.com"]["min_depth"] == 1
    assert rep.slds["example.com"]["unique_hosts"] == 2
    assert rep.rank_buckets == {"top_1000": 1, "top_10000": 1, "top_1000000": 2}
    assert rep.automation["slds_two_digits"] == 1
    assert rep.host_kind_counts == {"domain": 6, "ip_literal": 2, "ipbn": 1, "wildcard_dns": 1}
    assert rep.host_kind_shares["ip_literal"] == pytest.approx(0.2)
    assert rep.dns_counts == {"not_in_snapshot": 1, "valid": 5}
    assert rep.source_counts == {EXTERNAL: 10, "SNS": 1}
    assert rep.ua_service_counts == {"SNS": 1}
    tls = next(s for s in rep.sessions if s.session_id == "tls")
    assert tls.host_from == "sni" and tls.sld == "example.com"
    # every session counted exactly once
    assert sum(rep.host_kind_counts.values()) + 1 == len(sessions)


def test_host_sni_mismatch_is_inconsistent():
    s = session("a", host="a.example.com")
    s = SessionRecord(**{**vars(s), "tls_sni": "b.example.com"})
    rep = attribute_report([s], RANGES, PSL, {}, {"a.example.com": frozenset({"203.0.113.15"})})
    assert rep.sessions[0].inconsistent and rep.unique_slds == 0


def test_malformed_host_counted_not_raised():
    rep = attribute_report([session("a", host="bad host")], RANGES, PSL, {}, {})
    assert rep.sessions[0].malformed and rep.extra["malformed_hosts"] == 1
