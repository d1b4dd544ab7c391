"""Parameter containers, initializers and the transformer sub-layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor mapping; names are dotted paths."""

    def __init__(self, trainable: bool = True):
        self.trainable = trainable
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=self.trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)


class Scope:
    """Read view of a ParamStore under a fixed prefix."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.store

    def add(self, name: str, value: np.ndarray) -> Tensor:
        return self.store.add(f"{self.prefix}.{name}", value)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    """Semi-orthogonal matrix (orthonormal rows or columns, whichever is fewer)."""
    n = max(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return gain * q[:rows, :cols]


def xavier(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    std = gain * math.sqrt(2.0 / (rows + cols))
    return rng.standard_normal((rows, cols)) * std


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def init_ffn(scope: Scope, rng, dim: int, hidden: int, init=xavier, zero_out: bool = False) -> None:
    scope.add("w1", init(rng, dim, hidden))
    scope.add("b1", np.zeros(hidden))
    scope.add("w2", np.zeros((hidden, dim)) if zero_out else init(rng, hidden, dim))
    scope.add("b2", np.zeros(dim))


def ffn(x: Tensor, p: Scope) -> Tensor:
    """linear -> GELU -> linear."""
    return linear(T.gelu(linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def init_ln(scope: Scope, dim: int) -> None:
    scope.add("g", np.ones(dim))
    scope.add("b", np.zeros(dim))


def ln(x: Tensor, p: Scope) -> Tensor:
    return T.layer_norm(x, p["g"], p["b"])


def init_mhsa(scope: Scope, rng, dim: int, init=xavier) -> None:
    for name in ("q", "k", "v", "o"):
        scope.add(f"w{name}", init(rng, dim, dim))
        scope.add(f"b{name}", np.zeros(dim))


def mhsa(x: Tensor, p: Scope, heads: int, return_attention: bool = False):
    """Multi-head softmax self-attention over the second-to-last axis.

    ``x`` is (..., N, C). With ``return_attention`` the (..., heads, N, N)
    probability tensor is returned as well.
    """
    *lead, n, c = x.shape
    d = c // heads

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (*lead, n, heads, d))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return T.transpose(t, axes)

    q = split(linear(x, p["wq"], p["bq"]))
    k = split(linear(x, p["wk"], p["bk"]))
    v = split(linear(x, p["wv"], p["bv"]))
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    attn = T.softmax_rows(scores)
    ctx = T.matmul(attn, v)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    ctx = T.reshape(T.transpose(ctx, axes), (*lead, n, c))
    out = linear(ctx, p["wo"], p["bo"])
    return (out, attn) if return_attention else out


def init_block(scope: Scope, rng, dim: int, init=xavier, zero_out: bool = False) -> None:
    init_ln(scope.store.scope(f"{scope.prefix}.ln1"), dim)
    init_mhsa(scope.store.scope(f"{scope.prefix}.attn"), rng, dim, init=init)
    if zero_out:
        scope.store[f"{scope.prefix}.attn.wo"].data[...] = 0
    init_ln(scope.store.scope(f"{scope.prefix}.ln2"), dim)
    init_ffn(scope.store.scope(f"{scope.prefix}.ffn"), rng, dim, 4 * dim, init=init, zero_out=zero_out)


def transformer_block(x: Tensor, p: Scope, heads: int) -> Tensor:
    """Pre-norm ViT block: ``x + mhsa(ln(x))`` then ``+ ffn(ln(.))``."""
    s = p.store
    pre = p.prefix
    x = T.add(x, mhsa(ln(x, s.scope(f"{pre}.ln1")), s.scope(f"{pre}.attn"), heads))
    return T.add(x, ffn(ln(x, s.scope(f"{pre}.ln2")), s.scope(f"{pre}.ffn")))
