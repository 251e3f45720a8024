"""Command line entry point: ``flowtopo run|check|schema``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, schema_json
from .harness import PASS, run_all, run_invariants


def _load(path: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path)
    except (OSError, json.JSONDecodeError) as err:
        raise SystemExit(f"flowtopo: cannot read {path}: {err}") from None
    except ConfigError as err:
        raise SystemExit(f"flowtopo: {path}: {err}") from None


def cmd_run(args) -> int:
    cfg = _load(args.config)
    result = run_all(cfg, args.out, max(1, args.threads))
    for name, verdict in result.verdicts.items():
        print(f"{name:<12} {verdict}")
    print(f"outputs in {Path(args.out or cfg.output).resolve()}")
    return 0 if result.passed else 1


def cmd_check(args) -> int:
    cfg = _load(args.config)
    rep = run_invariants(cfg, args.seed)
    for c in rep.checks:
        line = f"{'PASS' if c.passed else 'FAIL'}  {c.name}"
        if not c.passed:
            line += f"  {json.dumps(c.details, default=str)}"
            if c.counterexample:
                line += f"  counterexample={json.dumps(c.counterexample, default=str)}"
        print(line)
    print(f"invariants   {rep.verdict}")
    return 0 if rep.verdict == PASS else 1


def cmd_schema(args) -> int:
    print(schema_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowtopo", description="Flow continuity experiments on chart manifolds")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the configured experiments")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (default: config 'output')")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("check", help="run the invariant suite only")
    c.add_argument("config")
    c.add_argument("--seed", type=int, default=None, help="override the config seed")
    c.set_defaults(func=cmd_check)
    s = sub.add_parser("schema", help="print the config JSON schema")
    s.set_defaults(func=cmd_schema)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
