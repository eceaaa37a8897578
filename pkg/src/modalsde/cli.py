"""Command-line entry points for the pipeline stages.

Every subcommand takes a TOML run config plus optional overrides and is
idempotent: a stage whose artifacts already match the config hash is
skipped (rerun with --force). Stages never trigger their upstreams; running
`sample` before `train-score` tells you to run train-score first.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ModalSdeError
from .pipeline import STAGES, run_stage, verify_oracle


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--force", action="store_true", help="rerun even if artifacts exist")
    parser.add_argument(
        "--stage-only",
        action="store_true",
        help="never run other stages implicitly (verify-oracle: check existing artifacts only)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalsde",
        description="Per-modality autoencoders with a joint latent score model",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
    p = sub.add_parser("verify-oracle", help="train on the Gaussian oracle and check conditionals")
    _add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "verify-oracle":
            checks = verify_oracle(cfg, force=args.force, stage_only=args.stage_only)
            failed = [c for c in checks if not c.passed]
            for c in checks:
                status = "ok  " if c.passed else "FAIL"
                print(f"[{status}] {c.name}: measured {c.measured:+.4f}, "
                      f"expected {c.expected:+.4f} (tolerance {c.tolerance})")
            if failed:
                print(f"{len(failed)}/{len(checks)} oracle checks failed")
                return 1
            print(f"all {len(checks)} oracle checks passed")
            return 0
        run_dir = run_stage(args.command, cfg, force=args.force)
        print(f"{args.command}: done ({run_dir})")
        return 0
    except ModalSdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
