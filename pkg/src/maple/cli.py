"""Command line entry point: ``maple <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error (or a locked run
directory), 3 unmet dependency (an earlier stage not yet completed, or a
missing Python package), 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("maple")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration, or the name of a bundled one such as 'desk' (defaults fill missing keys)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for data generation")
    common.add_argument(
        "--stage-override", action="append", default=[], metavar="KEY=VALUE",
        help="override one config value, e.g. align.epochs=10 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="maple", description="Zero-shot multi-task classification of 3D phantoms by patch-sentence alignment.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate the phantom dataset and split")
    g.add_argument("--n", type=int, help="number of samples (default: phantom.n_samples)")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=("text", "image", "align"))
    sub.add_parser("build-codebook", parents=[common], help="sample codebook sentence embeddings")
    sub.add_parser("eval", parents=[common], help="zero-shot evaluation and reports")
    sub.add_parser("run-all", parents=[common], help="run every remaining stage in order")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        from .config import ConfigError, RunConfig
        from .core import ContractError, TensorFormatError
        from .lexicon import LexiconError
        from .phantom import PhantomError
        from .pipeline import DataError, PrerequisiteError, Run, StageError, run_lock
    except ImportError as exc:
        print(f"maple: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY

    try:
        cfg = RunConfig.load(args.config, args.stage_override, args.seed)
    except FileNotFoundError as exc:
        print(f"maple: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, LexiconError) as exc:
        print(f"maple: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        run = Run(cfg, args.out, args.workers)
        with run_lock(run.dir):
            if args.command == "gen-data":
                out = run.gen_data(args.n)
            elif args.command == "train":
                out = {"text": run.train_text, "image": run.train_image, "align": run.train_align}[args.stage]()
            elif args.command == "build-codebook":
                out = run.build_codebook()
            elif args.command == "eval":
                out = run.evaluate()
                print((run.dir / "eval" / "metrics.txt").read_text())
            else:
                out = run.run_all()
                print((run.dir / "eval" / "metrics.txt").read_text())
    except PrerequisiteError as exc:
        print(f"maple: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except StageError as exc:
        print(f"maple: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TensorFormatError, PhantomError, ContractError, LexiconError, FileNotFoundError) as exc:
        print(f"maple: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(out, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
