"""Command-line entry point: ``tsood {train,eval,bench,matrix,inspect}``.

Exit codes: 0 success, 2 configuration error, 3 run error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .pipeline import (
    ConfigError,
    cmd_bench,
    cmd_eval,
    cmd_matrix,
    cmd_train,
    inspect_checkpoint,
    load_config,
    resolve_config,
)

log = logging.getLogger("tsood")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsood", description="Time-series OOD detection benchmark runner.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, checkpoint=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides 'output_dir')")
        p.add_argument("--seed", type=int, help="override the config seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoint)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="split, normalize and train; writes a checkpoint"))
    common(sub.add_parser("eval", help="fit scorers and write results.json and scores.csv"), checkpoint=True)
    bench = sub.add_parser("bench", help="per-sample latency of each scorer (single-threaded)")
    common(bench, checkpoint=True)
    bench.add_argument("--jobs", type=int, default=1, help="ignored: bench always runs with one job")
    common(sub.add_parser("matrix", help="run the cartesian product of datasets, archs, losses, augmentations"),
           jobs=True)
    ins = sub.add_parser("inspect", help="summarize a checkpoint")
    ins.add_argument("checkpoint")
    return parser


def _run(args) -> int:
    if args.command == "inspect":
        print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
        return EXIT_OK

    cfg, base = load_config(args.config)
    if args.command == "matrix":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = args.out or cfg.get("output_dir")
        if out is None:
            raise ConfigError("no output directory: pass --out or set 'output_dir'")
        out = Path(out) if Path(out).is_absolute() or args.out else base / out
        results = cmd_matrix(cfg, base, out, jobs=args.jobs, seed=args.seed)
        failed = [r for r in results if r["status"] != "ok"]
        for r in failed:
            log.error("cell %s failed: %s", r["cell"], r["error"])
        print(f"matrix: {len(results) - len(failed)}/{len(results)} cells succeeded -> {out}")
        return EXIT_OK if not failed else EXIT_RUN

    run = resolve_config(cfg, base, seed=args.seed, out=args.out)
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else None
    if args.command == "train":
        path = cmd_train(run)
        print(f"checkpoint written to {path}")
    elif args.command == "eval":
        report = cmd_eval(run, ckpt)
        print(f"{report.dataset}: id_accuracy={report.id_accuracy:.4f}")
        for name, r in report.methods.items():
            print(f"  {name:<10} auroc={r.auroc:.4f} aupr={r.aupr:.4f}")
    elif args.command == "bench":
        if args.jobs != 1:
            log.warning("bench ignores --jobs=%d and runs with one job and one thread", args.jobs)
        path = cmd_bench(run, ckpt)
        print(f"overhead report written to {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"tsood: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any failure after config validation
        log.debug("run failed", exc_info=True)
        print(f"tsood: run error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
