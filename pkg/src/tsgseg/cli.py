"""Command-line entry point.

Subcommands: ``gen-data`` renders a dataset directory, ``train`` runs a
configured training job, ``eval`` scores a checkpoint on a saved dataset,
``gates`` exports gate visualizations for one sample, and ``ablate`` runs
a model-variant grid and writes a summary CSV.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config_file, resolve_config
from .segbench import DatasetConfig, generate, sample_seed, save_sample
from .train import ablate, dump_gates, evaluate_checkpoint, train_run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsgseg",
        description="Multi-scale segmentation with gated cross-scale fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat config file for dataset fields")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("gates", help="dump gate maps for one sample image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="path to a sample PPM")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True,
                   choices=("components", "scales", "tsg-variants"))
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--steps", type=int, help="override per-run step count")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "gen-data":
        overrides = load_config_file(args.config) if args.config else {}
        cfg = resolve_config("desk", overrides)
        dcfg = DatasetConfig(
            height=cfg.height, width=cfg.width, num_classes=cfg.num_classes,
            n_objects_range=(cfg.n_objects_min, cfg.n_objects_max),
            size_mix=tuple(cfg.size_mix), noise=cfg.noise,
        )
        os.makedirs(args.out, exist_ok=True)
        for i in range(args.count):
            save_sample(args.out, i, generate(sample_seed(args.seed, i), dcfg))
        print(f"wrote {args.count} samples to {args.out}")
        return 0

    if args.command == "train":
        overrides = load_config_file(args.config) if args.config else {}
        preset = overrides.pop("preset", args.preset)
        cfg = resolve_config(preset, overrides, seed=args.seed)
        _, summary = train_run(cfg, args.out)
        report = summary["report"]
        print(f"final loss {summary['final_loss']:.4f}  "
              f"val mIoU {report['mIoU']:.4f}  checkpoint {summary['ckpt']}")
        return 0

    if args.command == "eval":
        report = evaluate_checkpoint(args.ckpt, args.data, args.report)
        print(f"mIoU {report['mIoU']:.4f}  report written to {args.report}")
        return 0

    if args.command == "gates":
        written = dump_gates(args.ckpt, args.sample, args.out)
        print(f"wrote {len(written)} files to {args.out}")
        return 0

    if args.command == "ablate":
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        ablate(args.suite, args.out, seeds=seeds, steps=args.steps)
        print(f"suite {args.suite} complete; results in "
              f"{os.path.join(args.out, 'results.csv')}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
