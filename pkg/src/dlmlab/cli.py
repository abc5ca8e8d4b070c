"""Command line entry point: ``dlmlab run|report|validate-config|replay``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (ConfigError, ExperimentAborted, ReportError, emit_report, load_config, load_records,
                         replay_record, run_directory, run_experiment)
from .llm_gateway import GatewayError


def _run(args) -> int:
    config = load_config(args.config)
    out = Path(args.out) if args.out else run_directory(config, Path(args.config).parent / config.output_dir)
    try:
        records = run_experiment(config, out, resume=args.resume, workers=args.workers)
    except ExperimentAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        emit_report(exc.records, out / "report") if exc.records else None
        return 2
    failed = sum(r["status"] != "ok" for r in records)
    emit_report(records, out / "report", svg=args.svg)
    print(f"{out}: {len(records)} records ({failed} failed); report in {out / 'report'}")
    return 0


def _report(args) -> int:
    records = load_records(args.records)
    paths = emit_report(records, args.out, svg=args.svg)
    for p in paths:
        print(p)
    return 0


def _validate(args) -> int:
    config = load_config(args.path)
    cells = len(config.languages) * len(config.prompt_ids) * len(config.cohort.alphas) * config.runs_per_cell
    print(f"ok: {len(config.languages)} language(s), {len(config.prompt_ids)} prompt(s), "
          f"{len(config.cohort.alphas)} alpha(s), {config.runs_per_cell} run(s) per cell -> {cells} cells")
    return 0


def _replay(args) -> int:
    stored, fresh = replay_record(args.record)
    same = json.dumps(stored, sort_keys=True) == json.dumps(fresh, sort_keys=True)
    print("replay matches stored record" if same else "replay DIFFERS from stored record")
    if not same:
        print(json.dumps({"stored": stored.get("fairness"), "replayed": fresh.get("fairness")}, indent=1))
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlmlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the experiment grid")
    r.add_argument("--config", required=True)
    r.add_argument("--resume", action="store_true", help="keep existing records and fill in missing cells")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", help="run directory (default: <output_dir>/run-<config digest>)")
    r.add_argument("--svg", action="store_true", help="also render SVG bar charts")
    r.set_defaults(func=_run)

    rep = sub.add_parser("report", help="aggregate run records into report tables")
    rep.add_argument("--records", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--svg", action="store_true")
    rep.set_defaults(func=_report)

    v = sub.add_parser("validate-config", help="check a config file")
    v.add_argument("path")
    v.set_defaults(func=_validate)

    rp = sub.add_parser("replay", help="re-execute one run from its record and transcript")
    rp.add_argument("--record", required=True)
    rp.set_defaults(func=_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportError, GatewayError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
