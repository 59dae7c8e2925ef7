"""Command-line entry point.

Exit codes: 0 success, 1 validation rejection / lint error / invalid evidence,
2 usage or configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .chain import CHAIN_SCHEMA
from .loaders import FixtureError, load_state, load_txs
from .ordering import SlashingEvidence, verify_evidence
from .regspec import RuleError, lint_rules, parse_rules, validate_semantic
from .report import bound_sweep, dumps, render_table, simulate, sweep, write_report_bundle
from .sim import ConfigError, ScenarioConfig, sweep_axes

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _emit(doc, fmt: str, out: str | None) -> None:
    text = dumps(doc)
    if out:
        Path(out).write_text(text)
    if fmt == "table":
        sys.stdout.write(render_table(doc))
    elif not out:
        sys.stdout.write(text)


def _config(args) -> ScenarioConfig:
    if not args.config:
        raise UsageError("--config is required")
    try:
        cfg = ScenarioConfig.from_toml(_read(args.config))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    return cfg


def cmd_rules_lint(args) -> int:
    if not args.rules:
        raise UsageError("--rules is required")
    rs, diags = lint_rules(_read(args.rules))
    errors = [d for d in diags if d.severity == "error"]
    if args.format == "json":
        doc = {"file": args.rules, "ok": not errors, "rules": 0 if rs is None else len(rs.rules), "diagnostics": [str(d) for d in diags]}
        sys.stdout.write(dumps(doc))
    else:
        for d in diags:
            print(f"{args.rules}:{d}")
        print(f"{'FAIL' if errors else 'OK'}: {0 if rs is None else len(rs.rules)} rules, {len(errors)} errors")
    return EXIT_REJECT if errors else EXIT_OK


def cmd_validate(args) -> int:
    for flag in ("rules", "state", "txs"):
        if not getattr(args, flag):
            raise UsageError(f"--{flag} is required")
    try:
        rs = parse_rules(_read(args.rules))
    except RuleError as exc:
        raise UsageError(f"{args.rules}: {exc}") from None
    schema = dict(CHAIN_SCHEMA)
    for name, decl in rs.schema.items():
        if name in schema and schema[name].key_type != decl.key_type:
            raise UsageError(f"map {name!r} key type conflicts with the chain schema")
        schema[name] = decl
    try:
        state, _ = load_state(_read(args.state), schema)
        txs = load_txs(_read(args.txs))
    except FixtureError as exc:
        raise UsageError(str(exc)) from None
    rows = []
    for lt in txs:
        d = validate_semantic(lt.tx, state, rs)
        rows.append({"label": lt.label, "tx": lt.tx.tx_id, "decision": str(d), "reason": d.reason, "visits": d.visits})
    if args.format == "json":
        sys.stdout.write(dumps({"decisions": rows}))
    else:
        for r in rows:
            print(f"{r['label']}\t{r['tx']}\t{r['decision']}")
    return EXIT_REJECT if any(r["decision"] != "Accept" for r in rows) else EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    doc, evidence, events = simulate(cfg, trials=args.trials, jobs=args.jobs)
    if args.out:
        out = Path(args.out)
        with open(out.with_suffix(".events.jsonl"), "w") as fh:
            for rec in events or ():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        if evidence:
            edir = out.with_suffix(".evidence")
            edir.mkdir(exist_ok=True)
            for i, text in enumerate(evidence):
                (edir / f"evidence_{i:03d}.json").write_text(text)
    _emit(doc, args.format, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.kind == "bound":
        eps = [float(x) for x in args.epsilon.split(",")]
        etas = [float(x) for x in args.eta.split(",")]
        doc = bound_sweep(eps, etas, trials=args.trials, seed=args.seed or 0, jobs=args.jobs)
    else:
        cfg = _config(args)
        try:
            axes = sweep_axes(_read(args.config))
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        if not axes:
            raise UsageError("config has no [sweep] table")
        if args.trials < 2:
            raise UsageError("--trials must be >= 2 for a sweep")
        try:
            doc = sweep(cfg, axes, trials=args.trials, jobs=args.jobs)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    _emit(doc, args.format, args.out)
    return EXIT_OK


def cmd_audit_evidence(args) -> int:
    if not args.evidence:
        raise UsageError("an evidence file is required")
    try:
        ev = SlashingEvidence.from_json(_read(args.evidence))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.evidence}: malformed evidence: {exc}") from None
    ok = verify_evidence(ev)
    print("valid" if ok else "invalid")
    return EXIT_OK if ok else EXIT_REJECT


def cmd_report(args) -> int:
    if not args.out:
        raise UsageError("--out (a directory) is required")
    docs = []
    for path in args.inputs:
        try:
            docs.append(json.loads(_read(path)))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    try:
        written = write_report_bundle(Path(args.out), docs, seed=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regguard", description="Rule linting, validation and sequencer-pipeline simulation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "table"), default="table")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rules-lint", parents=[common], help="parse and schema-check a rule file")
    s.add_argument("--rules")
    s.add_argument("rules_pos", nargs="?", metavar="RULES")
    s.set_defaults(func=cmd_rules_lint)

    s = sub.add_parser("validate", parents=[common], help="semantic validation of a transaction fixture")
    s.add_argument("--rules")
    s.add_argument("--state")
    s.add_argument("--txs")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", parents=[common], help="run a scenario and write a metrics report")
    s.add_argument("--config")
    s.add_argument("--trials", type=int, default=0, help="Monte Carlo trials per mode (0 = single run)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", parents=[common], help="Monte Carlo over the config's [sweep] grid, or the failure-bound grid")
    s.add_argument("--config")
    s.add_argument("--kind", choices=("scenario", "bound"), default="scenario")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--epsilon", default="0,0.002,0.007")
    s.add_argument("--eta", default="0,0.003")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("audit-evidence", parents=[common], help="verify a slashing evidence file offline")
    s.add_argument("evidence", nargs="?")
    s.set_defaults(func=cmd_audit_evidence)

    s = sub.add_parser("report", parents=[common], help="render figures and CSV from simulate/sweep outputs")
    s.add_argument("inputs", nargs="*")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "rules_pos", None) and not args.rules:
        args.rules = args.rules_pos
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the exit-code contract maps anything else to 3
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
