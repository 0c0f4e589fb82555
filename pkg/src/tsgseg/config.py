"""Run configuration: presets, a strict flat key=value format, persistence.

Config files hold one ``key = value`` per line with ``#`` comments. Every
key must be a known RunConfig field; anything else is rejected so typos
cannot silently fall back to defaults. The resolved configuration is
written next to every run's outputs in the same format it is read from.

Two presets ship: ``desk`` (small enough to train on a laptop CPU in
minutes) and ``paper`` (full-scale configuration; documented reference
only, far too heavy for the test suite). Paper-scale entries that no
published recipe pins (step budget, batch size, image size) are explicit
placeholders.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig
from .segbench import DatasetConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # model
    height: int = 64
    width: int = 64
    patch_size: int = 4
    stage_dims: tuple[int, ...] = (32, 64, 128)
    stage_heads: tuple[int, ...] = (2, 4, 4)
    stage_blocks: tuple[int, ...] = (1, 1, 1)
    positional: bool = True
    mlp_ratio: float = 2.0
    d_f: int = 64
    d_a: int = 64
    tsg_hidden: int = 64
    decoder_blocks: int = 3
    decoder_heads: int = 4
    num_classes: int = 5
    encoder_fusion: str = "tsg"
    decoder_fusion: str = "tsg"
    single_stage: int | None = None
    shared_tsg: bool = False
    integration_bias: bool = True
    # data
    train_samples: int = 200
    val_samples: int = 50
    data_seed: int = 1234
    n_objects_min: int = 2
    n_objects_max: int = 5
    noise: float = 0.04
    size_mix: tuple[float, float, float] = (0.45, 0.2, 0.35)
    flip: bool = False
    # optimization
    steps: int = 600
    batch_size: int = 4
    lr0: float = 1e-3
    weight_decay: float = 0.01
    poly_power: float = 0.9
    precision: str = "double"  # double | single
    eval_interval: int = 100


_PAPER_OVERRIDES = {
    # placeholders: height/width, stage layout, steps, batch_size
    "height": 512, "width": 512, "patch_size": 4,
    "stage_dims": (96, 192, 384, 768), "stage_heads": (3, 6, 12, 24),
    "stage_blocks": (2, 2, 6, 2), "mlp_ratio": 4.0,
    "d_f": 512, "d_a": 512, "tsg_hidden": 512,
    "decoder_blocks": 3, "decoder_heads": 8, "num_classes": 150,
    "steps": 160000, "batch_size": 16,
    "lr0": 6e-5, "weight_decay": 0.01, "poly_power": 0.9,
    "precision": "single", "eval_interval": 2000,
    "train_samples": 20000, "val_samples": 2000,
}

PRESETS = ("desk", "paper")

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(key: str, text: str):
    text = text.strip()
    f = _FIELDS[key]
    tp = f.type
    if key == "single_stage":
        return None if text.lower() in ("none", "") else int(text)
    if tp == "int":
        return int(text)
    if tp == "float":
        return float(text)
    if tp == "bool":
        return _parse_bool(text)
    if tp == "str":
        return text
    if tp.startswith("tuple[int"):
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    if tp.startswith("tuple[float"):
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    raise ConfigError(f"no converter for field {key}")


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key/value strings from flat config text; unknown keys rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve_config(preset: str = "desk", overrides: dict[str, str] | None = None,
                   seed: int | None = None) -> RunConfig:
    """Preset defaults plus overrides, fully typed and validated."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {PRESETS})")
    cfg = RunConfig(preset=preset)
    if preset == "paper":
        for key, value in _PAPER_OVERRIDES.items():
            setattr(cfg, key, value)
    for key, text in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _convert(key, text) if isinstance(text, str) else text)
    if seed is not None:
        cfg.seed = seed
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.precision not in ("double", "single"):
        raise ConfigError(f"precision must be double or single, got {cfg.precision!r}")
    if not len(cfg.stage_dims) == len(cfg.stage_heads) == len(cfg.stage_blocks):
        raise ConfigError("stage_dims, stage_heads, stage_blocks must have equal length")
    if cfg.encoder_fusion == "single" and cfg.single_stage is None:
        raise ConfigError("encoder_fusion=single requires single_stage")
    if cfg.n_objects_min > cfg.n_objects_max:
        raise ConfigError("n_objects_min exceeds n_objects_max")
    if cfg.batch_size < 1 or cfg.steps < 1:
        raise ConfigError("batch_size and steps must be positive")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        image_hw=(cfg.height, cfg.width), patch_size=cfg.patch_size,
        stage_dims=tuple(cfg.stage_dims), stage_heads=tuple(cfg.stage_heads),
        stage_blocks=tuple(cfg.stage_blocks), positional=cfg.positional,
        mlp_ratio=cfg.mlp_ratio, d_f=cfg.d_f, d_a=cfg.d_a,
        tsg_hidden=cfg.tsg_hidden, decoder_blocks=cfg.decoder_blocks,
        decoder_heads=cfg.decoder_heads, num_classes=cfg.num_classes,
        encoder_fusion=cfg.encoder_fusion, decoder_fusion=cfg.decoder_fusion,
        single_stage=cfg.single_stage, shared_tsg=cfg.shared_tsg,
        integration_bias=cfg.integration_bias,
    )


def dataset_config(cfg: RunConfig) -> DatasetConfig:
    return DatasetConfig(
        height=cfg.height, width=cfg.width, num_classes=cfg.num_classes,
        n_objects_range=(cfg.n_objects_min, cfg.n_objects_max),
        size_mix=tuple(cfg.size_mix), noise=cfg.noise,
    )
