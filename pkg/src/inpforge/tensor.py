"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the anomaly-detection model needs are provided. Every
op records a :class:`Node` on its output when at least one input requires a
gradient and recording is enabled; :meth:`Tensor.backward` then walks the
recorded graph once in reverse topological order.

Numerics run in 32-bit by default. Wrapping construction in
``precision("check-64bit")`` builds 64-bit tensors, which is what the
finite-difference checker expects.
"""

from __future__ import annotations

import enum
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DegenerateInputWarning, NumericError, ShapeError


class DualPrecisionMode(enum.Enum):
    STANDARD = "standard-32bit"
    CHECK = "check-64bit"


_DTYPES = {DualPrecisionMode.STANDARD: np.float32, DualPrecisionMode.CHECK: np.float64}

# Tapes are confined to one worker, so recording state is per thread.
_local = threading.local()


def _state():
    if not hasattr(_local, "mode"):
        _local.mode = DualPrecisionMode.STANDARD
        _local.grad_enabled = True
    return _local


def current_mode() -> DualPrecisionMode:
    return _state().mode


def current_dtype():
    return _DTYPES[_state().mode]


@contextmanager
def precision(mode: DualPrecisionMode | str):
    """Temporarily switch the dtype used for newly constructed tensors."""
    st = _state()
    prev = st.mode
    st.mode = DualPrecisionMode(mode)
    try:
        yield
    finally:
        st.mode = prev


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state().grad_enabled


class Node:
    """Provenance of a non-leaf tensor: producing op, inputs and the vjp."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or current_dtype())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring it."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t.node.parents, t.node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype or current_dtype()))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        out.node = Node(op, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), vjp, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    p = a.dtype.type(p)
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` (tensor operand) or ``scale``/``power`` (scalar)."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b) if isinstance(b, Tensor) else scale(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "power":
        return power(a, b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# -- linear algebra and shape ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ---------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    pdf = xd.dtype.type(_INV_SQRT_2PI) * np.exp(xd.dtype.type(-0.5) * xd * xd)
    return _result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must be ({c},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), vjp, "layer_norm")


# -- distances and gradient surgery ----------------------------------------

def cosine_distance(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """``1 - cos(u, v)`` along the last axis (broadcasting over leading axes).

    Norms are clamped below at ``eps``, so a zero vector on either side gives
    distance exactly 1; a :class:`DegenerateInputWarning` is emitted then.
    """
    _broadcast_shape(u, v, "cosine_distance")
    ud, vd = u.data, v.data
    eps = ud.dtype.type(eps)
    nu_raw = np.sqrt((ud * ud).sum(axis=-1, keepdims=True))
    nv_raw = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    if (nu_raw < eps).any() or (nv_raw < eps).any():
        warnings.warn("cosine_distance: zero-norm input, distance defined as 1", DegenerateInputWarning, stacklevel=2)
    nu = np.maximum(nu_raw, eps)
    nv = np.maximum(nv_raw, eps)
    dot = (ud * vd).sum(axis=-1, keepdims=True)
    cos = dot / (nu * nv)
    out = (1.0 - cos)[..., 0]

    def vjp(g):
        g = -g[..., None]
        gu = gv = None
        if u.requires_grad:
            gu = vd / (nu * nv) - np.where(nu_raw >= eps, cos * ud / (nu * nu), 0.0)
            gu = _unbroadcast(g * gu, ud.shape)
        if v.requires_grad:
            gv = ud / (nu * nv) - np.where(nv_raw >= eps, cos * vd / (nv * nv), 0.0)
            gv = _unbroadcast(g * gv, vd.shape)
        return gu, gv

    return _result(out.astype(ud.dtype, copy=False), (u, v), vjp, "cosine_distance")


def grad_scale(x: Tensor, w) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``w``.

    ``w`` is treated as a constant (a Tensor's graph is ignored) and must be
    nonnegative and broadcastable to ``x``.
    """
    wd = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=x.dtype)
    if (wd < 0).any():
        raise ConfigError("grad_scale: weights must be nonnegative")
    try:
        if np.broadcast_shapes(x.shape, wd.shape) != x.shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"grad_scale: weight shape {wd.shape} does not broadcast to {x.shape}") from None
    wd = wd.astype(x.dtype, copy=False)
    return _result(x.data, (x,), lambda g: (g * wd,), "grad_scale")


def min_axis(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Minimum along ``axis`` with its index; ties go to the lowest index.

    The gradient reaches the winning entry only.
    """
    idx = np.argmin(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    vals = np.take_along_axis(x.data, idx_k, axis=axis).squeeze(axis)
    src = x.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(out, idx_k, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _result(vals, (x,), vjp, "min"), idx


# -- gradient checking -----------------------------------------------------

def check_gradients(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` is called with the tensor(s) in ``x`` and must return a scalar.
    Numeric derivatives use central differences with step ``eps``; run it on
    64-bit tensors, 32-bit round-off swamps the differences.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    f(*xs).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*xs).data)
                flat[i] = orig - eps
                fm = float(f(*xs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                worst = max(worst, abs(float(gflat[i]) - num) / max(1.0, abs(num)))
    return worst
