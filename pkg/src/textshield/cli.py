"""Command-line entry point: ``textshield <command> --config run.yaml --seed 0 --out runs/x``.

Exit codes: 0 success, 1 unexpected error, 2 invalid configuration or data
leakage, 3 a required upstream artifact is missing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import harness
from .config import ConfigError, load_config

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

COMMANDS = {
    "prepare": harness.cmd_prepare,
    "train-victim": harness.cmd_train_victim,
    "gen-adv": harness.cmd_gen_adv,
    "train-detector": harness.cmd_train_detector,
    "eval-defense": harness.cmd_eval_defense,
    "eval-detection": harness.cmd_eval_detection,
    "report": harness.cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML experiment config (defaults apply to omitted keys)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help="output root; artifacts go under <out>/seed-<seed>")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="textshield", description="Saliency-based adversarial text detection and correction.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("mode", choices=harness.ABLATIONS)
    ra = sub.add_parser("run-all", parents=[common])
    ra.add_argument("--ablations", nargs="*", default=["beta_sweep"], choices=harness.ABLATIONS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "ablate":
            result = harness.cmd_ablate(cfg, args.mode)
        elif args.command == "run-all":
            result = harness.cmd_run_all(cfg, args.ablations)
        else:
            result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if isinstance(result, dict) and "rows" in result:
        result = {"rows": len(result["rows"])}
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
