"""Class-query transformer decoder with per-block gated multi-scale memory.

Each decoder block attends from one learnable query per class to a fused
patch-feature memory. Block 1 fuses the (upsampled) multi-scale maps by a
plain sum; every later block re-fuses them with per-patch scale gates
computed from the previous block's class-renormalized cross-attention maps.
The final query embeddings score patches against classes to produce the
segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionBundle, DecoderBlock, MhaConfig
from .module import Module, Parameter
from .scale_gate import ScaleGates, TsgHead, gated_sum
from .tensor import ShapeError, Tensor, matmul, scale, softmax, transpose, upsample_bilinear

DECODER_FUSIONS = ("tsg", "sum")


@dataclass
class QuerySet:
    """One learnable token per class; token c scores patches for class c."""

    tokens: Tensor  # C x d
    class_ids: list[int]

    def __post_init__(self):
        if self.tokens.shape[0] != len(self.class_ids):
            raise ShapeError(
                f"{self.tokens.shape[0]} query tokens for {len(self.class_ids)} classes"
            )


@dataclass
class SegLogits:
    """Per-patch class scores (rows sum to 1) on the given patch grid."""

    p: Tensor  # N x C, post-softmax
    spatial: tuple[int, int]

    def __post_init__(self):
        if self.p.shape[0] != self.spatial[0] * self.spatial[1]:
            raise ShapeError(
                f"scores have {self.p.shape[0]} rows for grid {self.spatial}"
            )


def tsgd_fuse_first(features_up: list[Tensor]) -> Tensor:
    """Ungated memory for the first decoder block: plain sum across scales."""
    if not features_up:
        raise ShapeError("tsgd_fuse_first: empty feature list")
    shape = features_up[0].shape
    for f in features_up[1:]:
        if f.shape != shape:
            raise ShapeError(f"tsgd_fuse_first: mixed shapes {shape} vs {f.shape}")
    out = features_up[0]
    for f in features_up[1:]:
        out = out + f
    return out


def tsgd_fuse(
    features_up: list[Tensor], prev_cross: AttentionBundle, head: TsgHead,
) -> tuple[Tensor, ScaleGates]:
    """Gate-weighted memory: per-patch convex combination over scales.

    ``prev_cross`` must hold class-renormalized maps; the head turns them
    into an N x S gate matrix (rows sum to 1) that weights the features.
    """
    gates = head.gate(head.integrate_cross(prev_cross))
    if gates.num_scales != len(features_up):
        raise ShapeError(
            f"{gates.num_scales}-way gates cannot fuse {len(features_up)} scales"
        )
    return gated_sum(features_up, gates.gates), gates


class Decoder(Module):
    """Stack of decoder blocks over zero-initialized class queries.

    ``fusion`` selects the memory rule for blocks after the first:
    ``"tsg"`` re-fuses with gates from the previous block's cross maps,
    ``"sum"`` repeats the plain sum. With a single candidate scale the sum
    rule is the natural choice; gate heads are only built when used.
    """

    def __init__(self, num_blocks: int, num_classes: int, d_f: int, heads: int,
                 mlp_dim: int, num_scales: int, d_a: int, hidden: int,
                 rng: np.random.Generator, fusion: str = "tsg",
                 shared_head: bool = False, dtype=np.float64,
                 integration_bias: bool = True):
        if num_blocks < 1:
            raise ValueError("decoder needs at least one block")
        if fusion not in DECODER_FUSIONS:
            raise ValueError(f"unknown decoder fusion {fusion!r}")
        self.fusion = fusion
        self.num_classes = num_classes
        self.num_scales = num_scales
        self.d_f = d_f
        self.queries = Parameter(np.zeros((num_classes, d_f), dtype=dtype))
        cfg = MhaConfig(heads=heads, model_dim=d_f)
        self.blocks = [DecoderBlock(cfg, mlp_dim, rng, dtype) for _ in range(num_blocks)]
        self.gate_heads: list[TsgHead] = []
        if fusion == "tsg" and num_blocks >= 2:
            width = heads * num_classes  # transposed cross maps, concatenated
            if shared_head:
                one = TsgHead([width], d_a, hidden, num_scales, rng, dtype,
                              integration_bias=integration_bias)
                self.gate_heads = [one] * (num_blocks - 1)
            else:
                self.gate_heads = [
                    TsgHead([width], d_a, hidden, num_scales, rng, dtype,
                            integration_bias=integration_bias)
                    for _ in range(num_blocks - 1)
                ]

    def query_set(self) -> QuerySet:
        return QuerySet(tokens=self.queries, class_ids=list(range(self.num_classes)))

    def __call__(self, features, target_grid: tuple[int, int], forced_gates=None):
        """Run all blocks; return final queries, per-block gates, last memory.

        ``features`` are per-scale FeatureMaps (finest first); each is
        bilinearly upsampled to ``target_grid`` before fusion. A scalar
        ``forced_gates`` pins every gate entry to that value, bypassing the
        gate heads (baseline-equivalence runs).
        """
        n = target_grid[0] * target_grid[1]
        ups = [upsample_bilinear(fm.data, fm.grid, target_grid) for fm in features]
        queries = self.queries
        gates_out: list[ScaleGates] = []
        prev_gated: AttentionBundle | None = None
        memory = None
        for i, block in enumerate(self.blocks):
            if i == 0:
                memory = tsgd_fuse_first(ups)
            elif self.fusion == "sum":
                memory = tsgd_fuse_first(ups)
            elif forced_gates is not None:
                g = Tensor(np.full((n, self.num_scales), float(forced_gates),
                                   dtype=ups[0].dtype))
                gates = ScaleGates(gates=g, num_scales=self.num_scales)
                memory = gated_sum(ups, gates.gates)
                gates_out.append(gates)
            else:
                assert prev_gated is not None
                memory, gates = tsgd_fuse(ups, prev_gated, self.gate_heads[i - 1])
                gates_out.append(gates)
            queries, _, _, prev_gated = block(
                queries, memory, source=f"decoder.block{i + 1}"
            )
        return queries, gates_out, memory


def predict_scores(f_dec_last: Tensor, y: Tensor) -> Tensor:
    """Pre-softmax patch-class scores F Y^T / sqrt(d); the training target."""
    if f_dec_last.shape[1] != y.shape[1]:
        raise ShapeError(
            f"feature width {f_dec_last.shape[1]} != query width {y.shape[1]}"
        )
    return scale(matmul(f_dec_last, transpose(y)), 1.0 / np.sqrt(y.shape[1]))


def predict(f_dec_last: Tensor, y: Tensor, spatial: tuple[int, int]) -> SegLogits:
    """Score every patch against every class: softmax(F Y^T / sqrt(d))."""
    return SegLogits(p=softmax(predict_scores(f_dec_last, y), axis=1), spatial=spatial)


def logits_to_mask(p: SegLogits, image_size: tuple[int, int]) -> np.ndarray:
    """Per-patch argmax, replicated to pixel resolution.

    Ties go to the lowest class index. ``image_size`` must be a whole
    multiple of the patch grid on both axes.
    """
    h, w = p.spatial
    ih, iw = image_size
    if ih % h or iw % w:
        raise ShapeError(f"image {ih}x{iw} is not a multiple of patch grid {h}x{w}")
    labels = np.argmax(p.p.data, axis=1).reshape(h, w)
    return np.repeat(np.repeat(labels, ih // h, axis=0), iw // w, axis=1)
