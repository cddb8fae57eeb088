"""Command-line entry point: ``ntkdip run | validate | list-experiments``.

Exit status: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import dip
from . import dynamics as dy
from .experiments import DESCRIPTIONS, EXPERIMENTS, SCHEMA, ConfigError, ExperimentConfig, parse_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("ntkdip")


def load_config(path, env=None) -> ExperimentConfig:
    """Read, apply ``NTKDIP_SEED`` / ``NTKDIP_OUTPUT_DIR`` overrides, and validate."""
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError([f"cannot read {path}: {e.strerror or e}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"]) from None
    if isinstance(raw, dict):
        if env.get("NTKDIP_SEED") is not None:
            try:
                raw["seed"] = int(env["NTKDIP_SEED"])
            except ValueError:
                raise ConfigError(["NTKDIP_SEED: must be an integer"]) from None
            raw.pop("seeds", None)
        if env.get("NTKDIP_OUTPUT_DIR"):
            raw["output_dir"] = env["NTKDIP_OUTPUT_DIR"]
    return parse_config(raw)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def run_one(cfg: ExperimentConfig, out) -> int:
    """Run a single seed into ``out``; writes ``summary.json`` or ``error.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary = run_experiment(cfg, out)
    except (dip.TrainingDivergedError, dy.DivergenceError, FloatingPointError) as e:
        _write_json(out / "error.json", {"schema": SCHEMA, "experiment": cfg.experiment, "seed": cfg.seed,
                                         "status": "numerical-failure", "message": str(e),
                                         "config": cfg.to_dict()})
        return EXIT_NUMERICAL
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def _run_seed(args):
    cfg, out = args
    return run_one(cfg, out)


def cmd_run(ns) -> int:
    cfg = load_config(ns.config)
    out = Path(ns.out or cfg.output_dir)
    if not cfg.seeds:
        code = run_one(cfg, out)
        _report(out, code)
        return code
    jobs = [(cfg.with_seed(s), out / f"seed-{s}") for s in cfg.seeds]
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            codes = list(pool.map(_run_seed, jobs))
    else:
        codes = [_run_seed(j) for j in jobs]
    for (_, d), code in zip(jobs, codes):
        _report(d, code)
    return max(codes)


def _report(out: Path, code: int) -> None:
    if code == EXIT_OK:
        s = json.loads((out / "summary.json").read_text())
        verdict = "all checks passed" if s["passed"] else "some checks failed"
        print(f"{out}: {verdict} ({', '.join(f'{k}={v}' for k, v in s['checks'].items())})")
    else:
        print(f"{out}: numerical failure, see error.json", file=sys.stderr)


def cmd_validate(ns) -> int:
    cfg = load_config(ns.config)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_list(ns) -> int:
    width = max(map(len, EXPERIMENTS))
    for name in EXPERIMENTS:
        print(f"{name:<{width}}  {DESCRIPTIONS[name]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ntkdip", description="Kernel-regime and deep-image-prior experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for multi-seed configs")
    run.add_argument("--out", help="output directory (overrides the config and NTKDIP_OUTPUT_DIR)")
    run.set_defaults(func=cmd_run)
    val = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)
    sub.add_parser("list-experiments", help="list experiment names").set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(ns, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return ns.func(ns)
    except ConfigError as e:
        print("config error:", file=sys.stderr)
        for p in e.problems:
            print(f"  {p}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
