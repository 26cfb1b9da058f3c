"""Command-line entry point: ``fmdiff {run,verify-measures,gradcheck,compare}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness import KINDS, ExperimentConfig, compare_posteriors, run


def _load_config(args) -> ExperimentConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if args.kind and args.kind != d.get("kind"):
            raise SystemExit(f"--kind {args.kind} conflicts with config kind {d.get('kind')}")
    elif args.kind:
        d = {"kind": args.kind}
    else:
        raise SystemExit("run needs --config or --kind")
    for key in ("seed", "out", "steps"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    d.setdefault("out", f"runs/{d['kind']}")
    return ExperimentConfig.from_dict(d)


def _print_report(report) -> None:
    for c in report.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']} {c['comparison']} {c['threshold']}")
    print(f"status={report.status} wall_clock_s={report.wall_clock_s:.1f}")


def cmd_run(args) -> int:
    report = run(_load_config(args))
    _print_report(report)
    return 0 if report.passed else 1


def cmd_verify_measures(args) -> int:
    d = {"kind": "measure-suite", "out": args.out or "runs/measure-suite"}
    if args.seed is not None:
        d["seed"] = args.seed
    report = run(ExperimentConfig.from_dict(d))
    _print_report(report)
    return 0 if report.passed else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    res = run_suite(points=args.points, seed=args.seed or 0)
    for r in res["results"]:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}: rel={r['max_rel_error']:.2e} tol={r['tol']:.0e}")
    print(f"runtime_s={res['runtime_s']:.1f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(res, indent=2) + "\n")
    return 0 if res["passed"] else 1


def cmd_compare(args) -> int:
    samples = np.load(args.samples)
    oracle = np.load(args.oracle)
    res = compare_posteriors(samples, oracle, n_boot=args.bootstrap, seed=args.seed or 0, kind=args.mode)
    text = json.dumps(res, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmdiff", description="Diffusion with forward models: experiments and checks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write its artifacts")
    r.add_argument("--config", help="config.json from a previous run (or hand-written)")
    r.add_argument("--kind", choices=KINDS)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--steps", type=int, help="override the training budget")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("verify-measures", help="run the measure-theoretic check suite")
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_verify_measures)

    g = sub.add_parser("gradcheck", help="check every op and forward model gradient against finite differences")
    g.add_argument("--seed", type=int)
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="distance between sample sets stored as .npy")
    c.add_argument("samples", help=".npy model samples (n, d) or integer labels")
    c.add_argument("oracle", help=".npy oracle samples (m, d) or a probability vector")
    c.add_argument("--mode", choices=("auto", "continuous", "discrete"), default="auto")
    c.add_argument("--bootstrap", type=int, default=200)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
