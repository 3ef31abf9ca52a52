"""Command line entry point: ``hcdefect <campaign> [--config F] [--out D] [--seed S] [--threads N]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

SUBCOMMANDS = ("gap-scan", "homogenize", "defect-converge", "decay", "ess-spec", "all")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcdefect",
                                description="Spectral campaigns for high-contrast random media with a defect.")
    p.add_argument("campaign", choices=SUBCOMMANDS)
    p.add_argument("--config", help="YAML experiment config (defaults are used for missing keys)")
    p.add_argument("--out", help="output directory (overrides output_dir in the config)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")
    p.add_argument("--force", action="store_true", help="recompute even if the campaign is up to date")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    # must be set before numpy/scipy load their BLAS
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    from .errors import HCDefectError
    from .experiments import CAMPAIGNS, ExperimentConfig, run_all

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
        if args.seed is not None:
            cfg.seeds = [args.seed]
        out = args.out or cfg.output_dir
        if args.campaign == "all":
            results = run_all(cfg, out, force=args.force)
        else:
            results = [CAMPAIGNS[args.campaign](cfg, out, force=args.force)]
    except HCDefectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    ok = True
    for res in results:
        tag = " (up to date)" if res.skipped else ""
        print(f"[{res.name}]{tag} -> {res.directory}")
        for a in res.assertions:
            print(f"  {'PASS' if a.passed else 'FAIL'}  {a.name}: value={a.value} threshold={a.threshold}")
        ok &= res.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
