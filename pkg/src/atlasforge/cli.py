"""`forge` command line: staged pipeline runs plus VAE field sampling.

Exit codes: 0 success, 2 configuration error, 3 missing/stale upstream
artifacts, 4 training divergence.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import torch

from .config import STAGES, load_config
from .errors import ConfigError, DependencyError, TrainingDiverged
from .pipeline import stage_run
from .seeding import derive_seed
from .storage import save_displacement_field, save_intensity_field
from .vae import load_vae, sample_field

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DIVERGED = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="forge",
        description="One-shot segmentation pipeline: synthesize labeled training "
                    "volumes by sampling learned deformations of a single atlas.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--force", action="store_true",
                       help="re-run even if artifacts exist")
        p.add_argument("--seed", type=int, default=None,
                       help="override the global seed")
        p.add_argument("--out", default=None, help="output root directory")

    p = sub.add_parser("sample", help="decode random fields from a VAE checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", required=True)
    return parser


def _resolve_out(args, cfg_out):
    env_root = os.environ.get("FORGE_OUT")
    out = args.out or env_root or cfg_out
    if out is None:
        raise ConfigError("no output directory: pass --out, set FORGE_OUT, "
                          "or put out_dir in the config")
    return out


def _cmd_stage(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _resolve_out(args, cfg.out_dir)
    record = stage_run(args.command, cfg, out, force=args.force)
    metrics = record.get("metrics") or {}
    summary = ", ".join(f"{k}={v}" for k, v in sorted(metrics.items())) or "ok"
    print(f"[{args.command}] {summary}")
    print(f"[{args.command}] artifacts: {len(record['artifacts'])} files under "
          f"{Path(out) / args.command}")
    return 0


def _cmd_sample(args) -> int:
    vae = load_vae(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(derive_seed(args.seed, "cli-sample"))
    for i in range(args.count):
        field = sample_field(vae, args.sigma, gen)
        if vae.field_channels == 3:
            path = out / f"shape_{i:03d}.v3d"
            save_displacement_field(field, path)
        else:
            path = out / f"intensity_{i:03d}.v3d"
            save_intensity_field(field, path)
        print(f"[sample] wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "sample":
            return _cmd_sample(args)
        return _cmd_stage(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
