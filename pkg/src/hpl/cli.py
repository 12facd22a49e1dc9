"""Command-line entry point.

Exit codes: 0 success, 1 experiment or assertion failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, report
from .errors import HplError
from .pipeline import ARMS, Pipeline, PipelineConfig, StageError, run_seeds, seed_dirs

log = logging.getLogger("hpl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
URL_ENV = "HPL_SEGMENTER_URL"


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel workers per stage")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="run directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    # argparse's own errors exit with 2, matching the usage code
    p = argparse.ArgumentParser(prog="hpl", description="Hierarchical preference learning on a synthetic sub-task environment.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    for name, text in (
        ("expert", "build the task suite and write expert demonstrations"),
        ("bc", "behaviour-clone the reference policy"),
        ("prefs", "generate trajectory, step and group preference data"),
        ("mc", "score group candidates with Monte-Carlo rollouts"),
        ("bucket", "assign group pairs to curriculum buckets"),
    ):
        sub.add_parser(name, help=text, parents=[common])

    for name, text in (("train", "train DPO arms"), ("eval", "evaluate arms")):
        sp = sub.add_parser(name, help=text, parents=[common])
        sp.add_argument("--arm", action="append", choices=sorted(ARMS), help="arm to run (repeatable; default all configured)")

    sp = sub.add_parser("pipeline", help="run every stage", parents=[common])
    sp.add_argument("--seeds", type=_ints, help="comma-separated seeds; each runs in out/seed-<n>")

    sp = sub.add_parser("biasvar", help="bias/variance experiment on the enumerable MDP", parents=[common])
    sp.add_argument("--ks", type=_ints, default=[1, 2, 4, 8])
    sp.add_argument("--gammas", type=_floats, default=[0.9])
    sp.add_argument("--Ns", type=_ints, default=[16])
    sp.add_argument("--Ts", type=_ints, default=[8])
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--replications", type=int, default=2000)

    sp = sub.add_parser("report", help="tables and figures from finished runs", parents=[common])
    sp.add_argument("--runs", type=Path, nargs="+", help="run directories (default: seed-* under --out, or --out)")
    sp.add_argument("--no-figures", action="store_true")
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if os.environ.get(URL_ENV):
        over["segmenter"] = {**cfg.segmenter, "url": os.environ[URL_ENV]}
    return replace(cfg, **over) if over else cfg


def _out(args) -> Path:
    return getattr(args, "out", None) or Path("runs/default")


def cmd_stage(args, stages: list[str]) -> int:
    pipe = Pipeline(load_config(args), _out(args))
    for s in stages:
        pipe.run_stage(s, getattr(args, "arm", None))
    pipe.write_manifest()
    print(json.dumps({"ran": pipe.ran, "skipped": pipe.skipped}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args)
    seeds = args.seeds or [cfg.seed]
    results = run_seeds(cfg, _out(args), seeds)
    summary = {str(s): {arm: ev.success_rate for arm, ev in res.items()} for s, res in results.items()}
    print(json.dumps({"success_rate": summary, "runs": [str(d) for d in seed_dirs(_out(args), seeds)]}, sort_keys=True))
    return EXIT_OK


def cmd_biasvar(args) -> int:
    seed = getattr(args, "seed", None) or 0
    rows, summary = analysis.run_grid(args.ks, args.gammas, args.Ns, args.Ts, args.beta, args.replications, seed)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "biasvar.csv").write_text(analysis.rows_to_csv(rows))
    (out / "biasvar_checks.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    failed = [c for c in summary["checks"] if not c["passed"]]
    for c in failed:
        print(f"FAIL {c['cell']} {c['check']}", file=sys.stderr)
    print(json.dumps({"csv": str(out / "biasvar.csv"), "passed": summary["passed"], "failed": len(failed)}))
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_report(args) -> int:
    runs = args.runs or report.find_runs(_out(args))
    missing = report.missing_files(runs)
    if missing:
        print("missing artifacts:\n" + "\n".join(f"  {p}" for p in missing), file=sys.stderr)
        return EXIT_USAGE
    written = report.write_report(runs, _out(args) / "report", figures=not args.no_figures)
    print(json.dumps({"written": [str(p) for p in written]}))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "expert":
            return cmd_stage(args, ["suite", "expert"])
        if args.command in ("bc", "prefs", "mc", "bucket", "train", "eval"):
            return cmd_stage(args, [args.command])
        if args.command == "pipeline":
            return cmd_pipeline(args)
        if args.command == "biasvar":
            return cmd_biasvar(args)
        return cmd_report(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (HplError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
