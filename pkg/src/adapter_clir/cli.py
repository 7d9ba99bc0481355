"""Command-line entry point: ``adapter-clir <phase> --config ... --run-dir ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .audit import render_size_table
from .config import load_config
from .core import ConfigError, StateError
from .experiment import (
    PhaseOrderError,
    RunDir,
    phase_evaluate,
    phase_gen_corpus,
    phase_index,
    phase_pretrain_adapter,
    phase_pretrain_backbone,
    phase_search,
    phase_train,
    run_experiment,
)

EXIT_USAGE = 2
EXIT_FAILURE = 1

PHASES = ("gen-corpus", "pretrain-backbone", "pretrain-adapter", "train", "index", "search", "evaluate", "experiment")


def _set_threads(n: int) -> None:
    # BLAS pools are sized at import; this only matters for child processes
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapter-clir", description="Adapter-based cross-language dense retrieval at toy scale.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PHASES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment JSON config (defaults used when omitted)")
        sp.add_argument("--run-dir", required=True)
        sp.add_argument("--seed", type=int, help="override the top-level seed; phase seeds are re-derived")
        sp.add_argument("--threads", type=int, default=1)
        if name == "pretrain-adapter":
            sp.add_argument("--lang", action="append", help="language tag (repeatable; default all)")
        if name == "train":
            sp.add_argument("--variant", action="append", choices=["dpr", "colbert"])
            sp.add_argument("--mode", action="append", choices=["adapter", "adapter-no-lang", "fmft"])
    a = sub.add_parser("audit", help="print the adapter parameter-share table")
    a.add_argument("--csv", action="store_true", help="emit CSV instead of text")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("ADAPTER_CLIR_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "audit":
        text, csv_text = render_size_table()
        sys.stdout.write(csv_text if args.csv else text)
        return 0
    try:
        _set_threads(args.threads)
        rd = RunDir(args.run_dir, load_config(args.config, args.seed))
        if args.command == "experiment":
            summary = run_experiment(rd, args.threads)
            print((rd / "report" / "report.txt").read_text())
            print(json.dumps(summary, indent=1, sort_keys=True))
        elif args.command == "gen-corpus":
            phase_gen_corpus(rd)
        elif args.command == "pretrain-backbone":
            phase_pretrain_backbone(rd)
        elif args.command == "pretrain-adapter":
            phase_pretrain_adapter(rd, args.lang)
        elif args.command == "train":
            phase_train(rd, args.variant, args.mode)
        elif args.command == "index":
            phase_index(rd)
        elif args.command == "search":
            phase_search(rd, args.threads)
        elif args.command == "evaluate":
            phase_evaluate(rd)
            print((rd / "report" / "report.txt").read_text())
        if args.command != "experiment":
            rd.write_manifest()
    except (ConfigError, PhaseOrderError, StateError, LookupError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
