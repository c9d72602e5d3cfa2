import base64
import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnel_corpus import BLOCKED_NET, USER_RULES, client_hello, generate
from ipreuse.funnel import (
    KEPT,
    STAGES,
    FunnelConfig,
    MalformedRecord,
    MalformedRule,
    Rule,
    SessionRecord,
    builtin_rules,
    dump_sessions,
    load_rules,
    load_sessions,
    parse_http,
    parse_sni,
    run_funnel,
    session_from_json,
)
from ipreuse.prefixes import PrefixTable

CONFIG = FunnelConfig(PrefixTable([(BLOCKED_NET, True)]), builtin_rules() + USER_RULES)


@pytest.fixture(scope="module")
def corpus():
    return generate(10_000, seed=0)


@pytest.fixture(scope="module")
def report(corpus):
    return run_funnel([s for s, _ in corpus], CONFIG)


def sess(sid="a", src="203.0.113.1", dst="52.0.0.1", port=80, payload=b"x", **kw):
    kw.setdefault("client_payload_len", len(payload))
    return SessionRecord(sid, src, dst, port, payload_prefix=payload, http=parse_http(payload), **kw)


# -- corpus ------------------------------------------------------------------


def test_corpus_covers_every_label(corpus):
    labels = Counter(label for _, label in corpus)
    assert len(corpus) == 10_000
    assert len(labels) == 19 and min(labels.values()) >= 100


def test_verdicts_match_labels(corpus, report):
    wrong = [
        (s.session_id, label, (v.stage, v.reason, v.rule))
        for (s, label), v in zip(corpus, report.verdicts)
        if (v.stage, v.reason, v.rule) != label
    ]
    assert wrong == []


def test_counts_weakly_decreasing(report):
    rows = report.rows
    assert [r.stage for r in rows] == ["initial", *STAGES]
    for a, b in zip(rows, rows[1:]):
        assert b.ips <= a.ips and b.sessions <= a.sessions and b.bytes <= a.bytes


def test_counts_agree_with_verdicts(corpus, report):
    left = len(corpus)
    dropped = Counter(v.stage for v in report.verdicts)
    for row in report.rows[1:]:
        left -= dropped[row.stage]
        assert row.sessions == left
    assert report.rows[-1].sessions == len(report.survivors) == dropped[KEPT]


@settings(max_examples=10, deadline=None)
@given(st.randoms(use_true_random=False))
def test_verdicts_invariant_under_permutation(rnd):
    sessions = [s for s, _ in generate(600, seed=5)]
    base = {v.session_id: v for v in run_funnel(sessions, CONFIG).verdicts}
    shuffled = list(sessions)
    rnd.shuffle(shuffled)
    again = run_funnel(shuffled, CONFIG)
    assert {v.session_id: v for v in again.verdicts} == base
    assert [v.session_id for v in again.verdicts] == [s.session_id for s in shuffled]


def test_empty_input():
    r = run_funnel([], CONFIG)
    assert [(row.ips, row.sessions, row.bytes) for row in r.rows] == [(0, 0, 0)] * 5
    assert r.verdicts == [] and r.survivors == []


# -- stages ------------------------------------------------------------------


def test_transport_counts_after_network():
    # the second destination comes from a blocked host, so the source looks single-target once it is gone
    blocked = "198.18.0.9"
    sessions = [sess("a", src="203.0.113.1"), sess("b", src=blocked), sess("c", src="203.0.113.1")]
    v = run_funnel(sessions, CONFIG).verdicts
    assert [x.stage for x in v] == [KEPT, "network", KEPT]


def test_multi_ip_wins_over_multi_port():
    sessions = [sess("a", dst="52.0.0.1", port=80), sess("b", dst="52.0.0.2", port=81)]
    assert {v.reason for v in run_funnel(sessions, CONFIG).verdicts} == {"multi_ip"}


def test_handshake_checked_before_payload():
    v = run_funnel([sess(payload=b"", handshake_complete=False, client_payload_len=0)], CONFIG).verdicts[0]
    assert v.reason == "no_handshake"


def test_rule_order_decides_reason():
    # both a shellcode and a proxy request: the earlier rule wins
    payload = b"CONNECT evil:443 HTTP/1.1\r\nX: wget\r\n\r\n"
    v = run_funnel([sess(payload=payload)], CONFIG).verdicts[0]
    assert (v.reason, v.rule) == ("shellcode", "shellcode_wget")


def test_substring_case_insensitive():
    assert Rule("w", "substring_ci", "WGet").matches(sess(payload=b"xxWGETxx"))


def test_tds_needs_port_and_type():
    payload = b"\x12\x01\x00\x2f\x00\x00\x01\x00"
    tds = Rule("tds", "tds", "")
    assert tds.matches(sess(port=1433, payload=payload))
    assert not tds.matches(sess(port=1434, payload=payload))
    assert not tds.matches(sess(port=1433, payload=b"\x55" + payload[1:]))


# -- parsing -----------------------------------------------------------------


def test_parse_http():
    h = parse_http(b"POST /hook HTTP/1.1\r\nhost: a.example.com\r\nUser-Agent:  curl/8\r\n\r\nbody")
    assert (h.method, h.path, h.host, h.user_agent) == ("POST", "/hook", "a.example.com", "curl/8")
    assert parse_http(b"\x16\x03\x01") is None


def test_parse_sni():
    assert parse_sni(client_hello("hooks.example.com")) == "hooks.example.com"
    assert parse_sni(client_hello("hooks.example.com")[:20]) is None
    assert parse_sni(b"GET / HTTP/1.1\r\n") is None


def test_session_json_roundtrip(tmp_path, corpus):
    path = tmp_path / "s.jsonl"
    sessions = [s for s, _ in corpus[:300]]
    with open(path, "w") as fh:
        dump_sessions(sessions, fh)
    assert load_sessions(path) == sessions


@pytest.mark.parametrize(
    "obj",
    [
        {"session_id": "a", "src_ip": "1.2.3.4", "dst_ip": "5.6.7.8", "dst_port": 70000},
        {"session_id": "a", "src_ip": "1.2.3", "dst_ip": "5.6.7.8", "dst_port": 80},
        {"session_id": "a", "src_ip": "1.2.3.4", "dst_ip": "5.6.7.8", "dst_port": 80, "payload_prefix": "!!"},
        {"session_id": "a", "src_ip": "1.2.3.4", "dst_ip": "5.6.7.8", "dst_port": 80,
         "payload_prefix": base64.b64encode(b"abcd").decode(), "client_payload_len": 2},
        {"src_ip": "1.2.3.4", "dst_ip": "5.6.7.8", "dst_port": 80},
    ],
)  # fmt: skip
def test_malformed_records(obj):
    with pytest.raises(MalformedRecord):
        session_from_json(obj)


def test_load_sessions_reports_line(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"session_id": "a", "src_ip": "1.2.3.4", "dst_ip": "5.6.7.8", "dst_port": 1}) + "\n[1]\n")
    with pytest.raises(MalformedRecord, match=":2:"):
        load_sessions(path)


def test_load_rules(tmp_path):
    path = tmp_path / "rules.tsv"
    path.write_text("# name\tkind\tpattern\n\np2p_skype\tmagic_hex\t17030100\nssh\tport_eq\t22\n")
    rules = load_rules(path)
    assert [(r.name, r.kind, r.reason) for r in rules] == [("p2p_skype", "magic_hex", "p2p"), ("ssh", "port_eq", "ssh")]
    assert rules[1].matches(sess(port=22)) and not rules[1].matches(sess(port=2222))


@pytest.mark.parametrize(
    "line",
    ["x\tmagic_hex\tzz", "x\tport_eq\t99999", "x\tregex\ta.*", "x\tsubstring_ci", "x\tsubstring_ci\tété"],
)
def test_bad_rules(tmp_path, line):
    path = tmp_path / "rules.tsv"
    path.write_text(line + "\n")
    with pytest.raises(MalformedRule):
        load_rules(path)
