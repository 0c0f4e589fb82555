"""Dense arrays with reverse-mode differentiation.

The engine is deliberately small: it implements exactly the operations the
segmentation model needs, each as a function that computes the forward value
with numpy and registers a closure routing the output gradient back to its
inputs. ``backward()`` on a scalar walks the recorded graph once in reverse
topological order.

Conventions:

- float64 is the default dtype; float32 is supported for faster training
  (tolerances quoted in the test suite assume float64).
- Spatial fields are stored flattened, one row per grid cell in row-major
  order, with the grid shape carried separately by the caller.
- Gradients accumulate. Repeated ``backward()`` calls without zeroing add
  their contributions; training code must clear grads before each step.
- Tensors are immutable after construction except for grad accumulation and
  in-place parameter updates performed by the optimizer between steps.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "softmax",
    "layernorm",
    "gelu",
    "linear",
    "concat",
    "narrow",
    "take",
    "tsum",
    "upsample_bilinear",
    "cross_entropy",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """N-dimensional real array participating in reverse-mode differentiation.

    ``requires_grad`` marks leaves that should receive gradients; tensors
    produced by operations inherit it from their inputs so the chain rule
    can flow through intermediates.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._children: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar so model code reads naturally.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` of every requires_grad tensor reachable from here.

        The tensor must be scalar (0-d). Contributions accumulate into any
        grads already present.
        """
        if self.data.ndim != 0:
            raise ShapeError(
                f"backward: loss must be scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if id(child) not in seen:
                    stack.append((child, False))
        _accumulate(self, np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, children: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(c.requires_grad for c in children)
    if out.requires_grad:
        out._children = children
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        _accumulate(b, _unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape).astype(a.dtype, copy=False))
        _accumulate(b, _unbroadcast(g * a.data, b.shape).astype(b.dtype, copy=False))

    return _node(data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    data = x.data * c

    def backward(g):
        _accumulate(x, (g * c).astype(x.dtype, copy=False))

    return _node(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: rank-2 operands required, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the two axes of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"transpose: rank-2 tensor required, got {x.shape}")
    data = x.data.T.copy()

    def backward(g):
        _accumulate(x, g.T)

    return _node(data, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Normalized exponentials along ``axis``, max-shifted for stability."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _node(data, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map.

    ``x`` is N x d; ``gamma`` and ``beta`` are length-d vectors. Variance is
    the biased per-row estimate; ``eps`` keeps zero-variance rows finite.
    """
    if x.ndim != 2:
        raise ShapeError(f"layernorm: rank-2 input required, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: gamma/beta must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        _accumulate(x, (gg - m1 - xhat * m2) * inv)
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))

    return _node(data, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact erf form.

    The erf form is used project-wide (model and oracles alike) so that a
    single convention governs every build.
    """
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, (g * (cdf + x.data * pdf)).astype(x.dtype, copy=False))

    return _node(data.astype(x.dtype, copy=False), (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear: rank-2 x and w required, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: x columns {x.shape} do not match w rows {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match w {w.shape}")
    data = x.data @ w.data + b.data

    def backward(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _node(data, (x, w, b), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; the backward pass splits the gradient."""
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or any(
            t.shape[i] != first[i] for i in range(t.ndim) if i != axis % t.ndim
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accumulate(t, g[tuple(idx)])
            offset += n

    return _node(data, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not (0 <= start and length >= 0 and start + length <= x.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} "
            f"of shape {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(x, full)

    return _node(data, (x,), backward)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened input; output takes the index array's shape.

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.data.size):
        raise ShapeError(f"take: index out of range for {x.data.size} elements")
    data = x.data.reshape(-1)[indices]

    def backward(g):
        flat = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(flat, indices.reshape(-1), g.reshape(-1))
        _accumulate(x, flat.reshape(x.data.shape))

    return _node(data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.full_like(x.data, g))

    return _node(data, (x,), backward)


# Interpolation matrices are pure functions of the grid sizes; cache them.
_UPSAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _interp_axis_weights(n_src: int, n_dst: int) -> np.ndarray:
    """1-d bilinear weight matrix (n_dst x n_src), align-corners=false.

    Source coordinates are sampled at (i + 0.5) * n_src / n_dst - 0.5 and
    edge samples replicate the border row, so rows always sum to one.
    """
    m = np.zeros((n_dst, n_src), dtype=np.float64)
    ratio = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * ratio - 0.5
        i0f = math.floor(src)
        f = src - i0f
        i0 = min(max(i0f, 0), n_src - 1)
        i1 = min(max(i0f + 1, 0), n_src - 1)
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def upsample_matrix(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Dense (H'W' x HW) bilinear interpolation operator for flattened rows."""
    key = (src_hw, dst_hw)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is None:
        mh = _interp_axis_weights(src_hw[0], dst_hw[0])
        mw = _interp_axis_weights(src_hw[1], dst_hw[1])
        cached = np.kron(mh, mw)
        _UPSAMPLE_CACHE[key] = cached
    return cached


def upsample_bilinear(
    x: Tensor, src_hw: tuple[int, int], dst_hw: tuple[int, int]
) -> Tensor:
    """Channelwise bilinear upsampling of a flattened (H*W) x d field.

    Uses the align-corners=false convention. Only enlargement is supported;
    equal sizes return the input unchanged.
    """
    h, w = src_hw
    h2, w2 = dst_hw
    if x.ndim != 2 or x.shape[0] != h * w:
        raise ShapeError(
            f"upsample_bilinear: expected {h * w} rows for grid {src_hw}, got {x.shape}"
        )
    if h2 < h or w2 < w:
        raise ShapeError(f"upsample_bilinear: target {dst_hw} smaller than source {src_hw}")
    if (h2, w2) == (h, w):
        return x
    m = upsample_matrix(src_hw, dst_hw)
    weights = Tensor(m if x.dtype == np.float64 else m.astype(x.dtype))
    return matmul(weights, x)


def cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    ``labels`` is an integer vector, one entry per logits row; entries equal
    to ``ignore_index`` are excluded from the mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    n, c = logits.shape
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: empty loss, every position is ignored")
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"cross_entropy: label outside [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    data = np.asarray(-logp[valid, lab].sum() / n_valid, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        grad = p.copy()
        grad[np.arange(n)[valid], lab] -= 1.0
        grad[~valid] = 0.0
        _accumulate(logits, grad * (float(g) / n_valid))

    return _node(data, (logits,), backward)
