"""Attention-driven scale gating.

A gate head turns attention evidence into a per-patch probability
distribution over candidate scales. Evidence arrives in one of two forms:

- self-attention maps from several backbone stages, spatially upsampled to
  a common row count, concatenated per head and linearly projected per
  source, then summed into one N x d_A map;
- class-normalized cross-attention maps, transposed to patch-major layout,
  concatenated over heads and projected with one linear.

The integrated map goes through layernorm, a two-layer MLP and a softmax
over the scale axis. The final MLP layer is zero-initialized so a fresh
head emits uniform gates, which makes an untrained model equivalent to
plain mean fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CROSS_GATED_KIND, AttentionBundle
from .module import LayerNorm, Linear, Mlp, Module
from .tensor import ShapeError, Tensor, concat, mul, narrow, softmax, transpose

__all__ = ["ScaleGates", "TsgHead", "gated_sum"]


@dataclass
class ScaleGates:
    """Per-patch distribution over scales: an N x S row-stochastic matrix."""

    gates: Tensor
    num_scales: int

    def column(self, s: int) -> Tensor:
        """The s-th scale's gate as an N x 1 column, for broadcasting."""
        return narrow(self.gates, 1, s, 1)


class TsgHead(Module):
    """Gate head: per-source integration linears, then norm -> MLP -> softmax.

    ``in_widths`` lists the feature width of each evidence source (one per
    backbone stage for self-attention use, a single entry for cross-attention
    use). A head built for all stages can serve several fusion steps by
    passing ``start`` to skip the sources a given step does not consume.
    """

    def __init__(self, in_widths: list[int], d_a: int, hidden: int,
                 num_scales: int, rng: np.random.Generator, dtype=np.float64,
                 integration_bias: bool = True):
        self.integrators = [
            Linear(w, d_a, rng, dtype, bias=integration_bias) for w in in_widths
        ]
        self.norm = LayerNorm(d_a, dtype)
        self.mlp = Mlp(d_a, hidden, num_scales, rng, dtype, zero_init_out=True)
        self.num_scales = num_scales

    def integrate_self(self, bundles: list[AttentionBundle], start: int = 0) -> Tensor:
        """Fuse upsampled self-attention bundles into one N x d_A map.

        Each bundle's head maps must already share a common row count; the
        per-source projections are summed elementwise.
        """
        if start + len(bundles) > len(self.integrators):
            raise ShapeError(
                f"gate head has {len(self.integrators)} sources, "
                f"got {len(bundles)} starting at {start}"
            )
        rows = bundles[0].maps[0].shape[0]
        total: Tensor | None = None
        for i, bundle in enumerate(bundles):
            for m in bundle.maps:
                if m.shape[0] != rows:
                    raise ShapeError(
                        f"integrate_self: row-count mismatch, {m.shape[0]} vs {rows}; "
                        "upsample all bundles to the fusion resolution first"
                    )
            stacked = concat(bundle.maps, axis=1)
            proj = self.integrators[start + i](stacked)
            total = proj if total is None else total + proj
        assert total is not None
        return total

    def integrate_cross(self, bundle: AttentionBundle) -> Tensor:
        """Fuse a class-normalized cross bundle into an N x d_A map.

        Head maps are transposed to patch-major layout before concatenation.
        Bundles normalized over the patch axis are rejected: their rows
        describe patch importance per class, not class evidence per patch.
        """
        if bundle.kind != CROSS_GATED_KIND or bundle.softmax_axis != 0:
            raise ShapeError(
                "integrate_cross: bundle must carry class-axis-normalized maps, "
                f"got kind={bundle.kind!r} softmax_axis={bundle.softmax_axis}"
            )
        stacked = concat([transpose(m) for m in bundle.maps], axis=1)
        return self.integrators[0](stacked)

    def gate(self, a: Tensor) -> ScaleGates:
        """Predict gates from an integrated map: softmax(MLP(norm(a)))."""
        logits = self.mlp(self.norm(a))
        return ScaleGates(gates=softmax(logits, axis=1), num_scales=self.num_scales)


def gated_sum(features: list[Tensor], gates: Tensor) -> Tensor:
    """Per-patch convex combination: sum_s gates[:, s] * features[s].

    ``gates`` is N x S with one column per feature map. Callers may pass a
    constant (non-stochastic) gate matrix, e.g. all-ones to recover a plain
    unweighted sum.
    """
    if gates.shape[1] != len(features):
        raise ShapeError(
            f"gated_sum: {len(features)} feature maps vs gate width {gates.shape[1]}"
        )
    total: Tensor | None = None
    for s, f in enumerate(features):
        if f.shape[0] != gates.shape[0]:
            raise ShapeError(
                f"gated_sum: feature rows {f.shape[0]} != gate rows {gates.shape[0]}"
            )
        term = mul(narrow(gates, 1, s, 1), f)
        total = term if total is None else total + term
    assert total is not None
    return total
