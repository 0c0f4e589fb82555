"""Full segmentation model: backbone, cross-scale fusion, query decoder.

``ModelConfig`` pins every structural choice, including the fusion variant
pair used by the ablation baselines. Models are built for one image size:
the gate heads consume flattened attention maps whose width depends on the
patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import Decoder, SegLogits, predict_scores
from .encoder import (
    Backbone,
    EncoderConfig,
    StageSpec,
    TsgeFusion,
    attention_map_widths,
)
from .module import Module
from .scale_gate import ScaleGates
from .tensor import ShapeError, Tensor, softmax


@dataclass
class ModelConfig:
    image_hw: tuple[int, int] = (64, 64)
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
    encoder_fusion: str = "tsg"  # tsg | fpn | none | single
    decoder_fusion: str = "tsg"  # tsg | sum
    single_stage: int | None = None
    shared_tsg: bool = False
    integration_bias: bool = True

    def __post_init__(self):
        if not len(self.stage_dims) == len(self.stage_heads) == len(self.stage_blocks):
            raise ValueError("stage_dims, stage_heads, stage_blocks must align")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    def stage_grids(self) -> list[tuple[int, int]]:
        h = self.image_hw[0] // self.patch_size
        w = self.image_hw[1] // self.patch_size
        return [(h >> s, w >> s) for s in range(self.num_stages)]


@dataclass
class ForwardResult:
    logits: SegLogits
    scores: Tensor  # pre-softmax patch-class scores, the loss input
    encoder_gates: list[ScaleGates] = field(default_factory=list)
    decoder_gates: list[ScaleGates] = field(default_factory=list)


class SegModel(Module):
    """Backbone + fusion + decoder, wired per the configured variant.

    Single-scale variants keep only the backbone stages up to the selected
    one: the hierarchy is feed-forward, so the kept stage's features are
    unchanged and no parameter sits outside the gradient path.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        used = cfg.num_stages
        if cfg.encoder_fusion == "single":
            if cfg.single_stage is None:
                raise ValueError("single-scale model needs single_stage set")
            used = cfg.single_stage
        specs = [
            StageSpec(blocks=b, dim=d, heads=h)
            for b, d, h in zip(cfg.stage_blocks[:used], cfg.stage_dims[:used],
                               cfg.stage_heads[:used])
        ]
        enc_cfg = EncoderConfig(patch_size=cfg.patch_size, stages=specs,
                                positional=cfg.positional, mlp_ratio=cfg.mlp_ratio)
        self.backbone = Backbone(enc_cfg, cfg.image_hw, rng, dtype)
        grids = cfg.stage_grids()[:used]
        widths = attention_map_widths(grids, list(cfg.stage_heads[:used]))
        self.fusion = TsgeFusion(
            kind=cfg.encoder_fusion, stage_dims=list(cfg.stage_dims[:used]),
            map_widths=widths, d_f=cfg.d_f, d_a=cfg.d_a, hidden=cfg.tsg_hidden,
            rng=rng, dtype=dtype, shared_head=cfg.shared_tsg,
            single_stage=cfg.single_stage, integration_bias=cfg.integration_bias,
        )
        fused_scales = 1 if cfg.encoder_fusion == "single" else used
        self.decoder = Decoder(
            num_blocks=cfg.decoder_blocks, num_classes=cfg.num_classes,
            d_f=cfg.d_f, heads=cfg.decoder_heads,
            mlp_dim=max(1, int(round(cfg.d_f * cfg.mlp_ratio))),
            num_scales=fused_scales, d_a=cfg.d_a, hidden=cfg.tsg_hidden,
            rng=rng, fusion=cfg.decoder_fusion, shared_head=cfg.shared_tsg,
            dtype=dtype, integration_bias=cfg.integration_bias,
        )
        self.target_grid = cfg.stage_grids()[0]

    def __call__(self, image: Tensor, forced_gates=None) -> ForwardResult:
        """Segment one image; ``forced_gates`` pins all gate entries."""
        features, bundles = self.backbone(image)
        refined, enc_gates = self.fusion(features, bundles, forced_gates=forced_gates)
        y, dec_gates, f_dec = self.decoder(refined, self.target_grid,
                                           forced_gates=forced_gates)
        scores = predict_scores(f_dec, y)
        logits = SegLogits(p=softmax(scores, axis=1), spatial=self.target_grid)
        return ForwardResult(logits=logits, scores=scores, encoder_gates=enc_gates,
                             decoder_gates=dec_gates)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float64) -> SegModel:
    return SegModel(cfg, np.random.default_rng(seed), dtype)


def copy_matching_parameters(src: Module, dst: Module) -> list[str]:
    """Copy src parameters into same-named dst parameters (values only).

    Every dst parameter must exist in src with an equal shape; src may have
    extras (a gated model carries gate heads its baseline lacks). Returns
    the copied names.
    """
    src_params = dict(src.named_parameters())
    copied = []
    for name, p in dst.named_parameters():
        if name not in src_params:
            raise KeyError(f"source model has no parameter {name!r}")
        s = src_params[name]
        if s.shape != p.shape:
            raise ShapeError(f"{name}: source {s.shape} vs target {p.shape}")
        p.data = s.data.copy()
        copied.append(name)
    return copied
