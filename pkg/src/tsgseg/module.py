"""Parameter containers and the module tree walk.

A module's parameters are discovered by walking its attributes: bare
``Parameter`` values, child modules, and lists of either. Names are the
attribute path (lists contribute their index), which is what the checkpoint
format keys on, so attribute names double as the persistence schema.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor; always participates in differentiation."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class providing recursive parameter discovery."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        """All (name, parameter) pairs under this module.

        Shared parameters (the same object reachable by several paths) are
        reported once, under the first path encountered.
        """
        out: list[tuple[str, Parameter]] = []
        self._collect(prefix, out, set())
        return out

    def _collect(self, prefix: str, out, seen: set[int]) -> None:
        if id(self) in seen:
            return
        seen.add(id(self))
        for name, value in vars(self).items():
            path = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            _collect_value(path, value, out, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _collect_value(path: str, value, out, seen: set[int]) -> None:
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            out.append((path, value))
    elif isinstance(value, Module):
        value._collect(path, out, seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect_value(f"{path}.{i}", item, out, seen)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64):
    """Glorot-normal weight draw for a (fan_in, fan_out) matrix."""
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    """Affine layer ``x @ w + b``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float64, zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = glorot(rng, d_in, d_out, dtype)
        self.w = Parameter(w)
        # A disabled bias stays a plain zero tensor: it joins the forward
        # computation but is not a trainable parameter.
        if bias:
            self.b = Parameter(np.zeros(d_out, dtype=dtype))
        else:
            self.b = Tensor(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import linear

        return linear(x, self.w, self.b)


class LayerNorm(Module):
    """Learned per-row standardization."""

    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import layernorm

        return layernorm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two-layer perceptron with a GELU between the layers."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dtype=np.float64,
                 zero_init_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import gelu

        return self.fc2(gelu(self.fc1(x)))


def iter_modules(root: Module) -> Iterator[Module]:
    """Depth-first walk over unique child modules, root included."""
    seen: set[int] = set()
    stack = [root]
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        yield m
        for value in vars(m).values():
            stack.extend(_child_modules(value))


def _child_modules(value) -> list[Module]:
    if isinstance(value, Module):
        return [value]
    if isinstance(value, (list, tuple)):
        out: list[Module] = []
        for item in value:
            out.extend(_child_modules(item))
        return out
    return []
