"""Hierarchical patch encoder and gated top-down feature fusion.

The backbone embeds non-overlapping image patches, runs a stack of global
self-attention blocks per stage, and halves the grid between stages by
merging 2x2 token neighborhoods. Each stage's final self-attention maps are
kept: the fusion pass feeds them (spatially upsampled) to gate heads that
decide, patch by patch, how much of the coarser refined map versus the
current stage's own features to keep.

Fusion variants share the same projection layers so baselines stay weight-
compatible with the gated model:

- ``tsg``:   gate heads weight each pairwise top-down merge;
- ``fpn``:   unweighted top-down sums (every gate pinned to 1), no heads;
- ``none``:  per-stage linear projections only, no cross-scale mixing;
- ``single``: one stage only, linearly projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionBundle, EncoderBlock, MhaConfig
from .module import Linear, Module, Parameter
from .scale_gate import ScaleGates, TsgHead, gated_sum
from .tensor import ShapeError, Tensor, concat, take, upsample_bilinear

FUSION_KINDS = ("tsg", "fpn", "none", "single")


@dataclass
class FeatureMap:
    """Per-stage patch features with their grid shape."""

    data: Tensor  # (h * w) x d, row-major over the grid
    h: int
    w: int
    stage: int

    def __post_init__(self):
        if self.data.shape[0] != self.h * self.w:
            raise ShapeError(
                f"feature map rows {self.data.shape[0]} != grid {self.h}x{self.w}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.h, self.w


@dataclass
class StageSpec:
    blocks: int
    dim: int
    heads: int


@dataclass
class EncoderConfig:
    patch_size: int = 4
    stages: list[StageSpec] = field(default_factory=list)
    positional: bool = True
    mlp_ratio: float = 2.0

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def required_divisor(self) -> int:
        return self.patch_size * 2 ** (self.num_stages - 1)


def _patch_indices(h: int, w: int, p: int, channels: int = 3) -> np.ndarray:
    """Flat pixel indices grouping an (h, w, channels) image into patches.

    Row r of the result lists, in row-major pixel-then-channel order, the
    flattened positions belonging to patch r of the (h/p, w/p) grid.
    """
    gh, gw = h // p, w // p
    idx = np.arange(h * w * channels).reshape(h, w, channels)
    rows = []
    for i in range(gh):
        for j in range(gw):
            block = idx[i * p:(i + 1) * p, j * p:(j + 1) * p, :]
            rows.append(block.reshape(-1))
    return np.stack(rows)


def _merge_indices(h: int, w: int, d: int) -> np.ndarray:
    """Flat indices grouping each 2x2 token neighborhood of an (h*w) x d map.

    Neighbors are ordered row-major within the 2x2 block, so the merged row
    is [top-left | top-right | bottom-left | bottom-right] features.
    """
    idx = np.arange(h * w * d).reshape(h, w, d)
    rows = []
    for i in range(h // 2):
        for j in range(w // 2):
            block = idx[2 * i:2 * i + 2, 2 * j:2 * j + 2, :]
            rows.append(block.reshape(-1))
    return np.stack(rows)


class PatchEmbed(Module):
    """Non-overlapping patch flattening plus a linear projection.

    The learned positional table, when enabled, is sized for a fixed input
    grid; images of other sizes are rejected.
    """

    def __init__(self, patch_size: int, dim: int, grid: tuple[int, int],
                 rng: np.random.Generator, positional: bool, dtype=np.float64):
        self.patch_size = patch_size
        self.grid = grid
        self.proj = Linear(patch_size * patch_size * 3, dim, rng, dtype)
        self.pos: Parameter | None = None
        if positional:
            self.pos = Parameter(
                rng.normal(0.0, 0.02, size=(grid[0] * grid[1], dim)).astype(dtype)
            )

    def __call__(self, image: Tensor) -> FeatureMap:
        p = self.patch_size
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"patch_embed: expected an H x W x 3 image, got {image.shape}")
        h, w, _ = image.shape
        if (h // p, w // p) != self.grid:
            raise ShapeError(
                f"patch_embed: image {h}x{w} does not match configured grid "
                f"{self.grid} at patch size {p}"
            )
        patches = take(image, _patch_indices(h, w, p))
        tokens = self.proj(patches)
        if self.pos is not None:
            tokens = tokens + self.pos
        return FeatureMap(data=tokens, h=h // p, w=w // p, stage=1)


class PatchMerge(Module):
    """Concatenate each 2x2 neighborhood and project; halves both grid axes."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.dim_in = dim_in
        self.proj = Linear(4 * dim_in, dim_out, rng, dtype)

    def __call__(self, fm: FeatureMap) -> FeatureMap:
        if fm.h % 2 or fm.w % 2:
            raise ShapeError(f"patch_merge: odd grid {fm.h}x{fm.w} cannot be halved")
        merged = take(fm.data, _merge_indices(fm.h, fm.w, self.dim_in))
        return FeatureMap(
            data=self.proj(merged), h=fm.h // 2, w=fm.w // 2, stage=fm.stage + 1
        )


class Backbone(Module):
    """Stage pyramid producing per-stage features and final attention maps."""

    def __init__(self, cfg: EncoderConfig, image_hw: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float64):
        h, w = image_hw
        div = cfg.required_divisor()
        if h % div or w % div:
            raise ShapeError(
                f"backbone: image {h}x{w} must be divisible by {div} "
                f"(patch {cfg.patch_size} with {cfg.num_stages} stages)"
            )
        self.cfg = cfg
        self.image_hw = image_hw
        grid = (h // cfg.patch_size, w // cfg.patch_size)
        self.embed = PatchEmbed(cfg.patch_size, cfg.stages[0].dim, grid, rng,
                                cfg.positional, dtype)
        self.stages: list[list[EncoderBlock]] = []
        self.merges: list[PatchMerge] = []
        for s, spec in enumerate(cfg.stages):
            mha = MhaConfig(heads=spec.heads, model_dim=spec.dim)
            mlp_dim = max(1, int(round(spec.dim * cfg.mlp_ratio)))
            self.stages.append(
                [EncoderBlock(mha, mlp_dim, rng, dtype) for _ in range(spec.blocks)]
            )
            if s + 1 < cfg.num_stages:
                self.merges.append(
                    PatchMerge(spec.dim, cfg.stages[s + 1].dim, rng, dtype)
                )

    def __call__(self, image: Tensor) -> tuple[list[FeatureMap], list[AttentionBundle]]:
        fm = self.embed(image)
        features: list[FeatureMap] = []
        bundles: list[AttentionBundle] = []
        for s, blocks in enumerate(self.stages):
            tokens = fm.data
            bundle = None
            for b, block in enumerate(blocks):
                tokens, bundle = block(tokens, source=f"stage{s + 1}.block{b + 1}")
            assert bundle is not None
            bundle.grid = (fm.h, fm.w)
            fm = FeatureMap(data=tokens, h=fm.h, w=fm.w, stage=s + 1)
            features.append(fm)
            bundles.append(bundle)
            if s + 1 < len(self.stages):
                fm = self.merges[s](fm)
        return features, bundles


def upsample_attention(bundle: AttentionBundle, target: tuple[int, int]) -> AttentionBundle:
    """Upsample a self-attention bundle's row axis to a finer grid.

    Rows are laid out on the bundle's grid and bilinearly interpolated to
    ``target``; the key axis is untouched. Interpolation is affine, so rows
    of sum-1 maps still sum to 1. Equal grids return the bundle unchanged.
    """
    if bundle.grid is None:
        raise ShapeError("upsample_attention: bundle carries no grid metadata")
    if bundle.grid == tuple(target):
        return bundle
    maps = [upsample_bilinear(m, bundle.grid, target) for m in bundle.maps]
    return AttentionBundle(
        maps=maps, softmax_axis=bundle.softmax_axis, kind=bundle.kind,
        source=bundle.source, grid=tuple(target),
    )


class FusionStep(Module):
    """One top-down merge: the stage's input projection plus its gate head."""

    def __init__(self, transform: Linear, head: TsgHead | None):
        self.transform = transform
        self.head = head


class TsgeFusion(Module):
    """Refine backbone features into a common width, optionally gated.

    ``map_widths`` gives, per stage, the concatenated head-map width
    (heads x key count) seen by the gate heads; it is a function of the
    training grid, so models are tied to the image size they were built for.
    """

    def __init__(self, kind: str, stage_dims: list[int], map_widths: list[int],
                 d_f: int, d_a: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float64, shared_head: bool = False,
                 single_stage: int | None = None, integration_bias: bool = True):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self.num_stages = len(stage_dims)
        self.single_stage = single_stage
        s_count = self.num_stages

        if kind == "single":
            if single_stage is None or not 1 <= single_stage <= s_count:
                raise ValueError(f"single-stage fusion needs a stage in [1, {s_count}]")
            # Only the projection actually used is created, so every
            # parameter of a single-scale model receives gradients.
            self.proj = Linear(stage_dims[single_stage - 1], d_f, rng, dtype)
            return

        self.top_proj = Linear(stage_dims[-1], d_f, rng, dtype)
        self.shared_head: TsgHead | None = None
        if kind == "tsg" and shared_head:
            self.shared_head = TsgHead(
                map_widths, d_a, hidden, num_scales=2, rng=rng, dtype=dtype,
                integration_bias=integration_bias,
            )
        steps: list[FusionStep] = []
        for s in range(s_count - 1):  # step s fuses stage s+1 with the refined map
            transform = Linear(stage_dims[s], d_f, rng, dtype)
            head: TsgHead | None = None
            if kind == "tsg":
                if shared_head:
                    head = self.shared_head
                else:
                    head = TsgHead(
                        map_widths[s:], d_a, hidden, num_scales=2, rng=rng,
                        dtype=dtype, integration_bias=integration_bias,
                    )
            steps.append(FusionStep(transform, head))
        self.steps = steps

    def __call__(
        self, features: list[FeatureMap], bundles: list[AttentionBundle],
        forced_gates=None,
    ) -> tuple[list[FeatureMap], list[ScaleGates]]:
        """Produce refined maps for every stage (finest first).

        ``forced_gates`` overrides gate outputs for baseline-equivalence
        runs: a scalar pins every gate entry to that value; a list supplies
        one (g_coarse, g_fine) pair or full N x 2 array per fusion step,
        finest step first. Forcing bypasses the gate heads entirely.
        """
        if self.kind == "single":
            k = self.single_stage
            fm = features[k - 1]
            return [FeatureMap(self.proj(fm.data), fm.h, fm.w, fm.stage)], []

        if self.kind == "none":
            out = []
            for s, fm in enumerate(features):
                proj = self.steps[s].transform if s < len(self.steps) else self.top_proj
                out.append(FeatureMap(proj(fm.data), fm.h, fm.w, fm.stage))
            return out, []

        s_count = self.num_stages
        refined: dict[int, FeatureMap] = {}
        top = features[-1]
        refined[s_count - 1] = FeatureMap(self.top_proj(top.data), top.h, top.w, top.stage)
        gates_out: list[ScaleGates] = []
        for s in range(s_count - 2, -1, -1):
            fm = features[s]
            coarse = refined[s + 1]
            up = upsample_bilinear(coarse.data, coarse.grid, fm.grid)
            lateral = self.steps[s].transform(fm.data)
            if self.kind == "fpn":
                fused = up + lateral
            else:
                gates = self._step_gates(s, fm, bundles, forced_gates)
                fused = gated_sum([up, lateral], gates.gates)
                gates_out.append(gates)
            refined[s] = FeatureMap(fused, fm.h, fm.w, fm.stage)
        out = [refined[s] for s in range(s_count)]
        return out, gates_out

    def _step_gates(self, s: int, fm: FeatureMap, bundles, forced) -> ScaleGates:
        n = fm.h * fm.w
        if forced is not None:
            return ScaleGates(gates=_constant_gates(forced, s, n, fm.data.dtype), num_scales=2)
        head = self.steps[s].head
        assert head is not None
        upsampled = [upsample_attention(b, fm.grid) for b in bundles[s:]]
        integrated = head.integrate_self(upsampled, start=s if head is self.shared_head else 0)
        return head.gate(integrated)


def _constant_gates(forced, step: int, n: int, dtype) -> Tensor:
    if isinstance(forced, (int, float)):
        return Tensor(np.full((n, 2), float(forced), dtype=dtype))
    spec = forced[step]
    arr = np.asarray(spec, dtype=dtype)
    if arr.ndim == 1:
        arr = np.tile(arr, (n, 1))
    if arr.shape != (n, 2):
        raise ShapeError(f"forced gates for step {step}: expected ({n}, 2), got {arr.shape}")
    return Tensor(arr)


def attention_map_widths(grids: list[tuple[int, int]], heads: list[int]) -> list[int]:
    """Concatenated per-stage map width: heads x key count of that stage."""
    return [h * (g[0] * g[1]) for g, h in zip(grids, heads)]
