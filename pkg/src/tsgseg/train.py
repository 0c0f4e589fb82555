"""Training loop, evaluation, gate-map export, and ablation suites.

Runs are driven by a RunConfig. Every run directory receives the resolved
config, a metrics CSV (one row per evaluation interval), and the final
checkpoint, and double-precision runs with equal seeds reproduce all three
byte for byte.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from .checkpoint import load_model, save_model
from .config import (
    RunConfig,
    dataset_config,
    format_config,
    load_config_file,
    model_config,
    resolve_config,
)
from .decoder import logits_to_mask
from .model import SegModel, build_model
from .netpbm import read_ppm, write_pgm
from .optim import AdamW, poly_lr
from .segbench import (
    SegSample,
    confusion_matrix,
    count_samples,
    flip_sample,
    generate,
    iou_from_confusion,
    load_sample,
    make_baseline,
    bucket_masks,
    patch_labels,
    sample_seed,
)
from .tensor import Tensor, cross_entropy, scale


class TrainAbort(RuntimeError):
    pass


METRICS_HEADER = "step,lr,loss,mIoU"
ABLATE_HEADER = "model,seed,mIoU,small,medium,large"


def build_split(cfg: RunConfig, split: str) -> list[SegSample]:
    """Deterministic train/val samples; val indices follow the train block."""
    dcfg = dataset_config(cfg)
    if split == "train":
        lo, hi = 0, cfg.train_samples
    elif split == "val":
        lo, hi = cfg.train_samples, cfg.train_samples + cfg.val_samples
    else:
        raise ValueError(f"unknown split {split!r}")
    return [generate(sample_seed(cfg.data_seed, i), dcfg) for i in range(lo, hi)]


def _patch_label_cache(samples: list[SegSample], patch: int, num_classes: int):
    return [patch_labels(s.labels, patch, num_classes).ravel() for s in samples]


def _param_norm_table(model: SegModel) -> str:
    lines = ["parameter norms:"]
    for name, p in model.named_parameters():
        lines.append(f"  {name}  l2={float(np.linalg.norm(p.data)):.6g}")
    return "\n".join(lines)


def patch_accuracy(model: SegModel, samples, labels_flat, dtype) -> float:
    hits = total = 0
    for sample, lab in zip(samples, labels_flat):
        res = model(Tensor(sample.image, dtype=dtype))
        pred = np.argmax(res.scores.data, axis=1)
        hits += int((pred == lab).sum())
        total += lab.size
    return hits / total


def evaluate_model(model: SegModel, samples: list[SegSample], dtype=np.float64) -> dict:
    """Pixel-level metrics over a sample list (confusions summed, then IoU).

    Size buckets aggregate the bucket-restricted confusion counts across
    samples before the IoU division.
    """
    if not samples:
        raise ValueError("evaluate: empty dataset")
    c = model.cfg.num_classes
    total = np.zeros((c, c), dtype=np.int64)
    per_bucket = {b: np.zeros((c, c), dtype=np.int64)
                  for b in ("small", "medium", "large")}
    for sample in samples:
        if sample.meta.get("num_classes", c) != c:
            raise ValueError(
                f"dataset has {sample.meta['num_classes']} classes, model has {c}"
            )
        res = model(Tensor(sample.image, dtype=dtype))
        mask = logits_to_mask(res.logits, sample.labels.shape)
        total += confusion_matrix(mask, sample.labels, c)
        for bucket, bmask in bucket_masks(sample.meta).items():
            if bmask.any():
                per_bucket[bucket] += confusion_matrix(
                    mask[bmask], sample.labels[bmask], c
                )
    per_class, mean = iou_from_confusion(total)
    report = {"mIoU": mean, "per_class": per_class}
    for bucket, conf in per_bucket.items():
        if conf.sum() == 0:
            report[bucket] = None
        else:
            report[bucket] = iou_from_confusion(conf)[1]
    return report


def train_run(cfg: RunConfig, out_dir) -> tuple[SegModel, dict]:
    """Train per config; write config.resolved, metrics.csv, model.ckpt."""
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.float64 if cfg.precision == "double" else np.float32
    model = build_model(model_config(cfg), seed=cfg.seed, dtype=dtype)
    train_samples = build_split(cfg, "train")
    val_samples = build_split(cfg, "val")
    labels_flat = _patch_label_cache(train_samples, cfg.patch_size, cfg.num_classes)
    opt = AdamW(model.named_parameters(), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(format_config(cfg))

    rows = [METRICS_HEADER]
    loss_history: list[float] = []
    for step in range(cfg.steps):
        lr = poly_lr(step, cfg.steps, cfg.lr0, cfg.poly_power)
        idx = rng.integers(0, len(train_samples), size=cfg.batch_size)
        terms = []
        for i in idx:
            sample, lab = train_samples[i], labels_flat[i]
            if cfg.flip and rng.random() < 0.5:
                flipped = flip_sample(sample)
                sample = flipped
                lab = patch_labels(flipped.labels, cfg.patch_size,
                                   cfg.num_classes).ravel()
            res = model(Tensor(sample.image, dtype=dtype))
            terms.append(cross_entropy(res.scores, lab))
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = scale(loss, 1.0 / len(terms))
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            table = _param_norm_table(model)
            report_path = os.path.join(out_dir, "abort_report.txt")
            with open(report_path, "w") as fh:
                fh.write(f"non-finite loss at step {step}, "
                         f"batch indices {list(map(int, idx))}\n{table}\n")
            print(table, file=sys.stderr)
            raise TrainAbort(
                f"non-finite loss at step {step} "
                f"(batch indices {list(map(int, idx))}); see {report_path}"
            )
        loss_history.append(loss_value)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
            report = evaluate_model(model, val_samples, dtype)
            rows.append(f"{step + 1},{lr!r},{loss_value!r},{report['mIoU']!r}")

    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_model(ckpt_path, model)
    final_report = evaluate_model(model, val_samples, dtype)
    summary = {
        "final_loss": loss_history[-1], "loss_history": loss_history,
        "report": final_report, "ckpt": ckpt_path,
        "train_samples": train_samples, "val_samples": val_samples,
        "labels_flat": labels_flat, "dtype": dtype,
    }
    return model, summary


def _load_run_model(ckpt_path) -> tuple[SegModel, RunConfig]:
    cfg_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)),
                            "config.resolved")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(
            f"no config.resolved next to {ckpt_path}; cannot rebuild the model"
        )
    raw = load_config_file(cfg_path)
    preset = raw.pop("preset", "desk")
    cfg = resolve_config(preset, raw)
    dtype = np.float64 if cfg.precision == "double" else np.float32
    model = build_model(model_config(cfg), seed=cfg.seed, dtype=dtype)
    load_model(ckpt_path, model)
    return model, cfg


def evaluate_checkpoint(ckpt_path, data_dir, report_path) -> dict:
    """CLI eval: restore a run's model, score a saved dataset, write CSV."""
    model, cfg = _load_run_model(ckpt_path)
    n = count_samples(data_dir)
    if n == 0:
        raise ValueError(f"no samples found in {data_dir}")
    samples = [load_sample(data_dir, i) for i in range(n)]
    dtype = np.float64 if cfg.precision == "double" else np.float32
    report = evaluate_model(model, samples, dtype)
    lines = ["metric,value", f"mIoU,{report['mIoU']!r}"]
    for c, iou in enumerate(report["per_class"]):
        lines.append(f"iou_class_{c},{'' if iou is None else repr(iou)}")
    for bucket in ("small", "medium", "large"):
        v = report[bucket]
        lines.append(f"iou_{bucket},{'' if v is None else repr(v)}")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return report


def dump_gates(ckpt_path, sample_path, out_dir) -> list[str]:
    """Write per-block gate maps for one image.

    For each decoder block after the first: one PGM per scale with gray
    value round(255 * gate), one PGM of the per-patch argmax scale (gray
    levels spread over [0, 255]), and one CSV of the raw gate rows.
    """
    model, cfg = _load_run_model(ckpt_path)
    if cfg.decoder_fusion != "tsg" or cfg.decoder_blocks < 2:
        raise ValueError("model has no gated decoder fusion; nothing to dump")
    image = read_ppm(sample_path).astype(np.float64) / 255.0
    if image.shape[:2] != (cfg.height, cfg.width):
        raise ValueError(
            f"sample is {image.shape[0]}x{image.shape[1]}, "
            f"model expects {cfg.height}x{cfg.width}"
        )
    dtype = np.float64 if cfg.precision == "double" else np.float32
    res = model(Tensor(image, dtype=dtype))
    os.makedirs(out_dir, exist_ok=True)
    gh, gw = model.target_grid
    written: list[str] = []
    for b, gates in enumerate(res.decoder_gates, start=2):
        g = gates.gates.data
        s_count = gates.num_scales
        for s in range(s_count):
            path = os.path.join(out_dir, f"gates_block{b}_scale{s + 1}.pgm")
            write_pgm(path, np.round(255.0 * g[:, s]).astype(np.uint8).reshape(gh, gw))
            written.append(path)
        argmax = np.argmax(g, axis=1).reshape(gh, gw)
        levels = np.round(np.linspace(0, 255, s_count)).astype(np.uint8)
        path = os.path.join(out_dir, f"gates_block{b}_argmax.pgm")
        write_pgm(path, levels[argmax])
        written.append(path)
        path = os.path.join(out_dir, f"gates_block{b}.csv")
        with open(path, "w") as fh:
            fh.write("patch," + ",".join(f"scale_{s + 1}" for s in range(s_count)) + "\n")
            for n in range(g.shape[0]):
                fh.write(f"{n}," + ",".join(repr(float(v)) for v in g[n]) + "\n")
        written.append(path)
    return written


SUITES = {
    "components": [
        ("plain_sum", make_baseline("plain_sum")),
        ("fpn_sum", make_baseline("fpn_sum")),
        ("tsge_only", {"encoder_fusion": "tsg", "decoder_fusion": "sum",
                       "single_stage": None}),
        ("tsgd_only", {"encoder_fusion": "none", "decoder_fusion": "tsg",
                       "single_stage": None}),
        ("tsg", make_baseline("tsg")),
    ],
    "scales": [
        ("single_scale_1", make_baseline("single_scale(1)")),
        ("single_scale_2", make_baseline("single_scale(2)")),
        ("single_scale_3", make_baseline("single_scale(3)")),
        ("plain_sum", make_baseline("plain_sum")),
        ("tsg", make_baseline("tsg")),
    ],
    "tsg-variants": [
        ("tsg", make_baseline("tsg")),
        ("tsg_shared", dict(make_baseline("tsg"), shared_tsg=True)),
    ],
}

ABLATE_STEPS = 300


def ablate(suite: str, out_dir, seeds=(0, 1, 2), steps: int | None = None,
           overrides: dict | None = None) -> list[dict]:
    """Train/evaluate the suite's model grid; write one summary CSV."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r} (choose from {sorted(SUITES)})")
    os.makedirs(out_dir, exist_ok=True)
    results: list[dict] = []
    lines = [ABLATE_HEADER]
    for name, variant in SUITES[suite]:
        for seed in seeds:
            cfg = resolve_config("desk", overrides or {})
            cfg.seed = int(seed)
            cfg.precision = "single"
            cfg.steps = int(steps or ABLATE_STEPS)
            cfg.eval_interval = cfg.steps  # final evaluation only
            for key, value in variant.items():
                setattr(cfg, key, value)
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}")
            _, summary = train_run(cfg, run_dir)
            report = summary["report"]
            row = {"model": name, "seed": seed, "mIoU": report["mIoU"],
                   "small": report["small"], "medium": report["medium"],
                   "large": report["large"]}
            results.append(row)
            lines.append(
                f"{name},{seed},{report['mIoU']!r},"
                + ",".join("" if report[b] is None else repr(report[b])
                           for b in ("small", "medium", "large"))
            )
    with open(os.path.join(out_dir, "results.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return results
