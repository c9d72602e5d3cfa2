"""``ipreuse`` command line.

Every subcommand takes ``--config FILE`` (a JSON object whose keys are the
long flag names with underscores); flags given on the command line win over
the file.  Reports go to ``--output`` (default stdout) as a JSON document
carrying ``schema_version`` or, with ``--format tsv``, as a tab-separated
table.  Exit status: 0 success, 1 configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import math
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import __version__
from .attribute import AttributionError, attribute_report, load_cloud_ranges, load_ranks, load_snapshot, load_user_agents
from .attribute import DEFAULT_WILDCARD_PROVIDERS
from .estimate import EstimateError, build_history, capture_rate, jolly_seber, load_observations, load_trace
from .estimate import observations_from_trace, reuse_stats
from .funnel import FunnelConfig, FunnelError, builtin_rules, dump_sessions, load_rules, load_sessions, run_funnel
from .pool import DistinctMode, Policy, PoolConfig
from .prefixes import MalformedCidr, PrefixTable, load_netset
from .psl import PublicSuffixList
from .sim import PRESETS, ConfigInvalid, SimConfig, run

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2

log = logging.getLogger("ipreuse")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors are configuration errors
        raise ConfigError(f"{self.prog}: {message}")


# -- argument definitions ----------------------------------------------------

def _common(p: argparse.ArgumentParser, default_format: str = "json") -> None:
    p.add_argument("--config", type=Path, help="JSON file of option values")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("-o", "--output", type=Path, help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "tsv"), help=f"report format (default {default_format})")


def _sim_options(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help=f"base parameter set (default {default_preset})")
    p.add_argument("--pool", type=int, help="pool size in IPs")
    p.add_argument("--cooldown", type=int, help="seconds before a released IP can be reallocated")
    p.add_argument("--tenants", type=int, help="number of benign tenants")
    p.add_argument("--tick", type=int, help="seconds between quota redraws")
    p.add_argument("--quota-max", type=int, help="tenant quotas are drawn from 0..QUOTA_MAX")
    p.add_argument("--adv-quota", type=int, help="IPs the adversary holds at once")
    p.add_argument("--adv-hold", type=int, help="seconds the adversary keeps each IP")
    p.add_argument("--target", type=int, help="adversary allocations to collect")
    p.add_argument("--duration", type=int, help="stop after this many simulated seconds")
    p.add_argument("--warmup", type=int, help="seconds of tenant-only churn before the adversary joins")
    p.add_argument(
        "--wait-cycle",
        action=argparse.BooleanOptionalAction,
        help="hold the adversary back until every IP has been allocated once",
    )
    p.add_argument("--distinct", choices=[m.value for m in DistinctMode], help="prior-tenant counting")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ipreuse", description="IP reuse simulation and telescope traffic analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, description=help, argument_default=argparse.SUPPRESS)

    p = add("simulate", "simulate tenants and an adversary sharing one IP pool")
    _common(p)
    _sim_options(p, "paper-useast1a")
    p.add_argument("--policy", choices=[x.value for x in Policy], help="allocation policy")
    p.add_argument("--trace", type=Path, help="write the allocation trace (event,time,ip,tenant) here")
    p.add_argument("--raw", action="store_true", help="include per-acquisition metric lists")

    p = add("compare-policies", "run Random, LRU and Tagging on the same seed")
    _common(p, "tsv")
    _sim_options(p, "desk")

    p = add("estimate", "Jolly-Seber pool size and capture rate from sightings")
    _common(p)
    p.add_argument("--input", type=Path, help="ip,timestamp observation log")
    p.add_argument("--trace", type=Path, help="allocation trace to derive sightings from")
    p.add_argument("--tenant", help="tenant whose allocations count as sightings (with --trace)")
    p.add_argument("--occasion-length", type=float, help="seconds per sampling occasion (default 86400)")

    p = add("reuse", "time between release and reallocation")
    _common(p)
    p.add_argument("--trace", type=Path, help="allocation trace (event,time,ip,tenant)")
    p.add_argument("--bin-width", type=float, help="histogram bin width in seconds (default 600)")
    p.add_argument("--cooldown", type=float, help="flag intervals shorter than this (default 1800)")

    p = add("funnel", "filter sessions down to unsolicited-but-legitimate traffic")
    _common(p)
    p.add_argument("--input", type=Path, help="sessions, one JSON object per line")
    p.add_argument("--blocklist", type=Path, action="append", help="FireHOL-style netset (repeatable)")
    p.add_argument("--rules", type=Path, help="extra application rules (name, kind, pattern; TAB-separated)")
    p.add_argument("--survivors", type=Path, help="write surviving sessions here as JSON lines")

    p = add("attribute", "attribute sessions to cloud services and domain names")
    _common(p)
    p.add_argument("--input", type=Path, help="sessions, one JSON object per line")
    p.add_argument("--ranges", type=Path, help="cloud ranges JSON (ip_prefix, service)")
    p.add_argument("--ranks", type=Path, help="rank,domain list")
    p.add_argument("--snapshot", type=Path, help="host,ip resolution snapshot")
    p.add_argument("--psl", type=Path, help="public suffix list (default: bundled ICANN section)")
    p.add_argument("--psl-private", action=argparse.BooleanOptionalAction, help="include private PSL rules")
    p.add_argument("--user-agents", type=Path, help="prefix<TAB>service table")
    p.add_argument("--wildcard-provider", action="append", help="wildcard DNS provider domain (repeatable)")
    p.add_argument("--sessions", action=argparse.BooleanOptionalAction, help="include per-session rows")
    return parser


# -- option merging ----------------------------------------------------------

DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"preset": "paper-useast1a", "raw": False, "format": "json"},
    "compare-policies": {"preset": "desk", "format": "tsv"},
    "estimate": {"occasion_length": 86_400.0, "format": "json"},
    "reuse": {"bin_width": 600.0, "cooldown": 1800.0, "format": "json"},
    "funnel": {"blocklist": [], "format": "json"},
    "attribute": {"psl_private": False, "wildcard_provider": None, "sessions": True, "format": "json"},
}

PATH_KEYS = {"config", "trace", "input", "blocklist", "rules", "ranges", "ranks", "snapshot", "psl", "user_agents"}
OUTPUT_KEYS = {"output", "survivors"}
WRITTEN = {"simulate": {"trace"}}  # path options that name a file the command creates


def _allowed(parser: argparse.ArgumentParser, command: str) -> set[str]:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    keys = {a.dest for a in sub._actions if a.dest != "help"}
    if command in ("simulate", "compare-policies"):
        keys.add("sim")
    return keys


def _coerce_paths(opts: dict[str, Any]) -> None:
    for key in PATH_KEYS | OUTPUT_KEYS:
        v = opts.get(key)
        if isinstance(v, str):
            opts[key] = Path(v)
        elif isinstance(v, list):
            opts[key] = [Path(x) if isinstance(x, str) else x for x in v]


def resolve_options(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> dict[str, Any]:
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    file_opts: dict[str, Any] = {}
    if "config" in given:
        try:
            file_opts = json.loads(Path(given["config"]).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {given['config']} not found") from None
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"config file {given['config']}: {exc}") from None
        if not isinstance(file_opts, dict):
            raise ConfigError("config file must hold a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = set(file_opts) - (_allowed(parser, ns.command) - {"config"})
        if unknown:
            raise ConfigError(f"unknown config keys for {ns.command}: {sorted(unknown)}")
    opts = {**DEFAULTS[ns.command], **file_opts, **given}
    _coerce_paths(opts)
    written = WRITTEN.get(ns.command, set())
    for key in PATH_KEYS - written:
        value = opts.get(key)
        for path in value if isinstance(value, list) else [value]:
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"--{key.replace('_', '-')}: {path} does not exist")
    for key in OUTPUT_KEYS | written:
        path = opts.get(key)
        if path is not None and not Path(path).parent.is_dir():
            raise ConfigError(f"--{key}: directory {Path(path).parent} does not exist")
    return opts


def sim_config(opts: dict[str, Any]) -> SimConfig:
    if opts["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {opts['preset']!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[opts["preset"]]
    try:
        if "sim" in opts:
            if not isinstance(opts["sim"], dict):
                raise ConfigError("'sim' must be an object")
            cfg = SimConfig.from_dict({**cfg.to_dict(), **opts["sim"]})
        pool = cfg.pool
        pool_changes = {k: opts[f] for f, k in (("pool", "pool_size"), ("cooldown", "cooldown")) if f in opts}
        if "policy" in opts:
            pool_changes["policy"] = Policy(opts["policy"])
        if pool_changes:
            pool = PoolConfig(**{**vars(pool), **pool_changes})
        mapping = {
            "tenants": "n_tenants",
            "tick": "tick",
            "quota_max": "quota_max",
            "adv_quota": "adversary_quota",
            "adv_hold": "adversary_hold",
            "target": "adversary_target_allocations",
            "duration": "duration",
            "warmup": "warmup",
            "wait_cycle": "warmup_until_cycled",
            "distinct": "distinct",
            "seed": "seed",
        }
        changes = {field: opts[key] for key, field in mapping.items() if key in opts}
        return replace(cfg, pool=pool, **changes)
    except ConfigInvalid as exc:
        raise ConfigError(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation parameters: {exc}") from None


# -- output ------------------------------------------------------------------


def _num(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def tsv_table(header: Sequence[str], rows: Sequence[Sequence[Any]], notes: Sequence[tuple[str, Any]] = ()) -> str:
    buf = io.StringIO()
    for key, value in notes:
        buf.write(f"# {key}={_num(value)}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    return buf.getvalue()


def echo(opts: dict[str, Any]) -> dict[str, Any]:
    """Options as the report records them; the config file itself is left out."""
    out = {}
    for key in sorted(opts):
        if key in ("config", "output", "format"):
            continue
        v = opts[key]
        out[key] = [str(x) for x in v] if isinstance(v, list) else str(v) if isinstance(v, Path) else v
    return out


def document(command: str, body: dict[str, Any]) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "command": command, **body}
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(output).write_text(text)


# -- subcommands -------------------------------------------------------------

SUMMARY_HEADER = ("policy", "unique_ips", "mean_prev_tenants", "median_reuse", "adversary_allocations", "completed")


def _summary_row(report) -> list[Any]:
    s = report.summary
    return [report.config.pool.policy.value, s.unique_ips, s.mean_prev_tenants, s.median_reuse,
            report.metrics.acquisitions, report.completed]  # fmt: skip


def cmd_simulate(opts: dict[str, Any]) -> str:
    cfg = sim_config(opts)
    report = run(cfg, trace="trace" in opts)
    if "trace" in opts:
        with open(opts["trace"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("event", "time", "ip", "tenant"))
            w.writerows(report.trace.rows())
    if opts["format"] == "tsv":
        return tsv_table(SUMMARY_HEADER, [_summary_row(report)])
    return document("simulate", {"report": report.to_dict(include_raw=opts["raw"])})


def cmd_compare(opts: dict[str, Any]) -> str:
    base = sim_config(opts)
    reports = [run(base.with_policy(p)) for p in (Policy.RANDOM, Policy.LRU, Policy.TAGGING)]
    if opts["format"] == "tsv":
        return tsv_table(SUMMARY_HEADER, [_summary_row(r) for r in reports])
    cfg = base.to_dict()
    del cfg["pool"]["policy"]
    return document(
        "compare-policies",
        {"config": cfg, "rows": [dict(zip(SUMMARY_HEADER, _summary_row(r))) for r in reports]},
    )


def cmd_estimate(opts: dict[str, Any]) -> str:
    if ("input" in opts) == ("trace" in opts):
        raise ConfigError("estimate needs exactly one of --input or --trace")
    if "trace" in opts:
        if "tenant" not in opts:
            raise ConfigError("--trace needs --tenant")
        obs = observations_from_trace(load_trace(opts["trace"]), str(opts["tenant"]))
    else:
        obs = load_observations(opts["input"])
    if opts["occasion_length"] <= 0:
        raise ConfigError("--occasion-length must be positive")
    history = build_history(obs, opts["occasion_length"])
    table = jolly_seber(history)
    rate = capture_rate(history)
    fields = ("occasion", "n", "m", "u", "R", "r", "z", "M_hat", "N_hat")
    rows = [[getattr(e, f) for f in fields] for e in table]
    notes = [("individuals", len(history)), ("occasions", history.occasions), ("capture_rate", rate)]
    if opts["format"] == "tsv":
        return tsv_table(fields, rows, notes)
    return document(
        "estimate",
        {
            "config": echo(opts),
            "occasion_length": opts["occasion_length"],
            "first_occasion": history.first_occasion,
            "individuals": len(history),
            "occasions": history.occasions,
            "capture_rate": rate,
            "table": [dict(zip(fields, r)) for r in rows],
        },
    )


def cmd_reuse(opts: dict[str, Any]) -> str:
    if "trace" not in opts:
        raise ConfigError("reuse needs --trace")
    if opts["bin_width"] <= 0:
        raise ConfigError("--bin-width must be positive")
    rows = load_trace(opts["trace"])
    stats = reuse_stats(((e, t, ip) for e, t, ip, _ in rows), opts["bin_width"], opts["cooldown"])
    summary = {
        "intervals": len(stats.intervals),
        "median": stats.median,
        "mean": stats.mean,
        "cv": stats.cv,
        "min_interval": stats.min_interval,
        "cooldown": stats.cooldown,
        "cooldown_violations": stats.violations,
    }
    if opts["format"] == "tsv":
        return tsv_table(("bin_start", "count"), stats.histogram, list(summary.items()))
    hist = [{"bin_start": b, "count": c} for b, c in stats.histogram]
    return document("reuse", {"config": echo(opts), **summary, "bin_width": stats.bin_width, "histogram": hist})


def cmd_funnel(opts: dict[str, Any]) -> str:
    if "input" not in opts:
        raise ConfigError("funnel needs --input")
    rules = builtin_rules() + (load_rules(opts["rules"]) if "rules" in opts else [])
    blocklist = load_netset(opts["blocklist"]) if opts["blocklist"] else PrefixTable()
    sessions = load_sessions(opts["input"])
    report = run_funnel(sessions, FunnelConfig(blocklist, rules))
    if "survivors" in opts:
        with open(opts["survivors"], "w") as fh:
            dump_sessions(report.survivors, fh)
    if opts["format"] == "tsv":
        rows = [(r.stage, r.ips, r.sessions, r.bytes) for r in report.rows]
        return tsv_table(("stage", "ips", "sessions", "bytes"), rows)
    return document("funnel", {"config": echo(opts), **report.to_dict()})


def cmd_attribute(opts: dict[str, Any]) -> str:
    if "input" not in opts:
        raise ConfigError("attribute needs --input")
    if "psl" in opts:
        psl = PublicSuffixList.from_file(opts["psl"], include_private=opts["psl_private"])
    else:
        psl = PublicSuffixList.bundled(include_private=opts["psl_private"])
    ranges = load_cloud_ranges(opts["ranges"]) if "ranges" in opts else PrefixTable()
    ranks = load_ranks(opts["ranks"]) if "ranks" in opts else {}
    snapshot = load_snapshot(opts["snapshot"]) if "snapshot" in opts else {}
    ua = load_user_agents(opts["user_agents"]) if "user_agents" in opts else None
    providers = opts["wildcard_provider"] or DEFAULT_WILDCARD_PROVIDERS
    sessions = load_sessions(opts["input"])
    report = attribute_report(sessions, ranges, psl, ranks, snapshot, providers, ua)
    if opts["format"] == "tsv":
        header = ("sld", "etld", "rank", "min_depth", "unique_hosts", "two_digits", "encodes_ip")
        rows = [[name, *(v[h] for h in header[1:])] for name, v in report.slds.items()]
        notes = [("unique_slds", report.unique_slds), *report.host_kind_shares.items()]
        return tsv_table(header, rows, notes)
    body = {"config": echo(opts), **report.to_dict(include_sessions=opts["sessions"])}
    body.update(report.extra)
    return document("attribute", body)


COMMANDS: dict[str, Callable[[dict[str, Any]], str]] = {
    "simulate": cmd_simulate,
    "compare-policies": cmd_compare,
    "estimate": cmd_estimate,
    "reuse": cmd_reuse,
    "funnel": cmd_funnel,
    "attribute": cmd_attribute,
}

DATA_ERRORS = (
    EstimateError, FunnelError, AttributionError, MalformedCidr, UnicodeDecodeError, json.JSONDecodeError, DataError,
)  # fmt: skip


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
        opts = resolve_options(parser, ns)
        text = COMMANDS[ns.command](opts)
        emit(text, opts.get("output"))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


run_cli = main


def entry() -> None:
    with contextlib.suppress(BrokenPipeError):
        sys.exit(main())
