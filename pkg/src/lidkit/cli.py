"""``lid <stage> --config <path> [--jobs N] [--force] [--seed S]``.

Exit status: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs, stale markers), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .corpusio import FormatError
from .pipeline import STAGES, StageError, load_config, pipeline_stages, run_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("lidkit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lid", description="Language-recognition pipeline stages.")
    p.add_argument("stage", choices=list(STAGES) + ["all"],
                   help="stage to run; 'all' runs every stage of the configured system")
    p.add_argument("--config", required=True, help="run configuration (INI)")
    p.add_argument("--jobs", type=int, default=1, help="per-utterance worker processes")
    p.add_argument("--force", action="store_true",
                   help="recompute even if a stale completion marker exists")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--preset", choices=["a", "b", "c", "d"], default=None,
                   help="posterior source / VTLN / feature preset")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("lid: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.preset)
    except FileNotFoundError as exc:
        print(f"lid: error: config not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"lid: error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    stages = pipeline_stages(cfg) if args.stage == "all" else [args.stage]
    try:
        for stage in stages:
            logger.info("stage %s", stage)
            report = run_stage(cfg, stage, args.jobs, args.force)
        if args.stage in ("evaluate", "all", "add-language") and report is not None:
            sys.stdout.write(report.to_text())
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (StageError, FormatError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
