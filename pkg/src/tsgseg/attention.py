"""Multi-head attention layers that expose their per-head attention maps.

Both the token mixer in the encoder and the query/memory mixer in the
decoder return an :class:`AttentionBundle` alongside their features, because
downstream gating consumes the maps themselves. The cross-attention layer
can additionally renormalize its logits over the class axis, producing a
second bundle used only for gating; the feature path is unaffected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .module import LayerNorm, Linear, Mlp, Module
from .tensor import ShapeError, Tensor, concat, matmul, narrow, scale, softmax, transpose

# Which axis of each stored map was softmax-normalized.
SELF_KIND = "self"            # N x N, rows sum to 1 (axis 1, over keys)
CROSS_KIND = "cross"          # C x N, rows sum to 1 (axis 1, over patches)
CROSS_GATED_KIND = "cross_gated"  # C x N, columns sum to 1 (axis 0, over classes)


@dataclass
class MhaConfig:
    """Head count and model width for one attention module."""

    heads: int
    model_dim: int

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class AttentionBundle:
    """Per-head attention maps retained for gate computation.

    ``grid`` records the spatial layout of the row axis for self-attention
    maps (rows correspond to grid cells); cross maps have class-indexed rows
    and carry no grid.
    """

    maps: list[Tensor]
    softmax_axis: int
    kind: str
    source: str = ""
    grid: tuple[int, int] | None = field(default=None)

    @property
    def heads(self) -> int:
        return len(self.maps)


def _per_head(t: Tensor, head: int, head_dim: int) -> Tensor:
    return narrow(t, 1, head * head_dim, head_dim)


class MultiheadSelfAttention(Module):
    """Token-to-token attention; returns features and the per-head maps."""

    def __init__(self, cfg: MhaConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def __call__(self, tokens: Tensor, source: str = "") -> tuple[Tensor, AttentionBundle]:
        cfg = self.cfg
        if tokens.shape[1] != cfg.model_dim:
            raise ShapeError(
                f"self-attention: token width {tokens.shape} != model_dim {cfg.model_dim}"
            )
        q = self.wq(tokens)
        k = self.wk(tokens)
        v = self.wv(tokens)
        inv = 1.0 / math.sqrt(cfg.head_dim)
        maps: list[Tensor] = []
        mixed: list[Tensor] = []
        for i in range(cfg.heads):
            qi = _per_head(q, i, cfg.head_dim)
            ki = _per_head(k, i, cfg.head_dim)
            vi = _per_head(v, i, cfg.head_dim)
            att = softmax(scale(matmul(qi, transpose(ki)), inv), axis=1)
            maps.append(att)
            mixed.append(matmul(att, vi))
        out = self.wo(concat(mixed, axis=1))
        bundle = AttentionBundle(maps=maps, softmax_axis=1, kind=SELF_KIND, source=source)
        return out, bundle


class MultiheadCrossAttention(Module):
    """Query-to-memory attention with an optional class-axis renormalization.

    The feature output always uses the patch-axis softmax. When
    ``gate_softmax`` is requested, the same logits are also normalized over
    the class axis and returned as a separate bundle for gating.
    """

    def __init__(self, cfg: MhaConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def __call__(
        self, queries: Tensor, memory: Tensor, gate_softmax: bool = False,
        source: str = "",
    ) -> tuple[Tensor, AttentionBundle, AttentionBundle | None]:
        cfg = self.cfg
        if queries.shape[1] != cfg.model_dim or memory.shape[1] != cfg.model_dim:
            raise ShapeError(
                f"cross-attention: queries {queries.shape} / memory {memory.shape} "
                f"must both have width {cfg.model_dim}"
            )
        q = self.wq(queries)
        k = self.wk(memory)
        v = self.wv(memory)
        inv = 1.0 / math.sqrt(cfg.head_dim)
        maps: list[Tensor] = []
        gated_maps: list[Tensor] = []
        mixed: list[Tensor] = []
        for j in range(cfg.heads):
            qj = _per_head(q, j, cfg.head_dim)
            kj = _per_head(k, j, cfg.head_dim)
            vj = _per_head(v, j, cfg.head_dim)
            logits = scale(matmul(qj, transpose(kj)), inv)
            att = softmax(logits, axis=1)
            maps.append(att)
            mixed.append(matmul(att, vj))
            if gate_softmax:
                gated_maps.append(softmax(logits, axis=0))
        out = self.wo(concat(mixed, axis=1))
        bundle = AttentionBundle(maps=maps, softmax_axis=1, kind=CROSS_KIND, source=source)
        gated = None
        if gate_softmax:
            gated = AttentionBundle(
                maps=gated_maps, softmax_axis=0, kind=CROSS_GATED_KIND, source=source
            )
        return out, bundle, gated


class EncoderBlock(Module):
    """Pre-norm residual block: attention then MLP, each behind a layernorm."""

    def __init__(self, cfg: MhaConfig, mlp_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        d = cfg.model_dim
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiheadSelfAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.mlp = Mlp(d, mlp_dim, d, rng, dtype)

    def __call__(self, tokens: Tensor, source: str = "") -> tuple[Tensor, AttentionBundle]:
        attended, bundle = self.attn(self.norm1(tokens), source=source)
        tokens = tokens + attended
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens, bundle


class DecoderBlock(Module):
    """Pre-norm residual block over queries: self-attention, cross-attention
    to the memory, then an MLP. The memory enters the cross-attention
    unnormalized; only the query stream is layer-normalized."""

    def __init__(self, cfg: MhaConfig, mlp_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        d = cfg.model_dim
        self.norm1 = LayerNorm(d, dtype)
        self.self_attn = MultiheadSelfAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.cross_attn = MultiheadCrossAttention(cfg, rng, dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.mlp = Mlp(d, mlp_dim, d, rng, dtype)

    def __call__(
        self, queries: Tensor, memory: Tensor, source: str = ""
    ) -> tuple[Tensor, AttentionBundle, AttentionBundle, AttentionBundle]:
        attended, b_self = self.self_attn(self.norm1(queries), source=source)
        queries = queries + attended
        crossed, b_cross, b_gated = self.cross_attn(
            self.norm2(queries), memory, gate_softmax=True, source=source
        )
        queries = queries + crossed
        queries = queries + self.mlp(self.norm3(queries))
        return queries, b_self, b_cross, b_gated
