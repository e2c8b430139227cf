"""Dense float tensors with reverse-mode automatic differentiation.

Reference arithmetic is 64-bit; tensors built from float32 data stay in
float32 (fast mode). The graph is built eagerly during the forward pass and
freed by ``backward``, so a loss can be differentiated exactly once.
Broadcasting is restricted to trailing-axis bias addition and scalars; any
other shape mismatch raises.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "bce_with_logits",
    "count_macs",
    "gather_rows",
    "gelu",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "permute",
    "reshape",
    "roll",
    "select",
    "sigmoid",
    "softmax",
    "sub",
    "tsum",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.mac_stack = []


_state = _State()


@contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def count_macs():
    """Count multiply-accumulates of every matmul, keyed by its tag."""
    counts: dict[str, int] = {}
    _state.mac_stack.append(counts)
    try:
        yield counts
    finally:
        _state.mac_stack.pop()


def _record_macs(tag: str, n: int) -> None:
    for counts in _state.mac_stack:
        counts[tag] = counts.get(tag, 0) + n


class Tensor:
    """A dense real array plus an optional gradient buffer.

    Treat the underlying data as immutable: ops never modify inputs, and
    sharing a Tensor across threads for reading is safe. Interior nodes of a
    computation graph hold references to their parents and a vector-Jacobian
    callback; both are dropped once ``backward`` consumes the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp = _vjp
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.data.dtype))
    return Tensor(value)  # float32/float64 preserved, other dtypes widen to float64


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if _state.grad_enabled and any(_tracked(p) for p in parents):
        return Tensor(data, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _sum_to_suffix(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to a trailing-axes bias shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may be a scalar or a trailing-axes bias."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        mode = "equal"
    elif bd.ndim == 0 or ad.ndim == 0:
        mode = "scalar"
    elif bd.ndim < ad.ndim and bd.shape == ad.shape[ad.ndim - bd.ndim:]:
        mode = "suffix"
    else:
        raise ValueError(f"add: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad + bd

    def vjp(g):
        ga = g if ad.shape == g.shape else _sum_to_suffix(g, ad.shape)
        if mode == "equal":
            gb = g
        elif mode == "scalar":
            gb = g.sum().reshape(bd.shape) if bd.ndim == 0 else g
            ga = g.sum().reshape(ad.shape) if ad.ndim == 0 else ga
        else:
            gb = _sum_to_suffix(g, bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b, like=as_tensor(a))))

def mul(a, b) -> Tensor:
    """Elementwise product; operands must have equal shapes unless one is scalar."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    if not (ad.shape == bd.shape or ad.ndim == 0 or bd.ndim == 0):
        raise ValueError(f"mul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad * bd

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if ad.ndim == 0 and g.shape != ():
            ga = ga.sum().reshape(())
        if bd.ndim == 0 and g.shape != ():
            gb = gb.sum().reshape(())
        return ga, gb

    return _make(out, (a, b), vjp)


def matmul(a, b, tag: str = "matmul") -> Tensor:
    """Matrix product. Supports 2-D x 2-D, batched x batched (equal leading
    dims), and batched x 2-D (shared weight). Inner extents must agree."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner extents differ ({ad.shape} x {bd.shape})")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ ({ad.shape} x {bd.shape})")
    out = ad @ bd
    batch = int(np.prod(ad.shape[:-2], dtype=np.int64)) if ad.ndim > 2 else 1
    _record_macs(tag, batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    """Cyclic shift: the element at index i moves to (i + shift) mod extent."""
    a = as_tensor(a)
    out = np.roll(a.data, shift, axis=axis)
    return _make(out, (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Pick one slice along an axis (used to unpack fused projections)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)
    shape = a.data.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _make(out, (a,), vjp)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from a 2-D table; backward scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ValueError("gather_rows: table must be 2-D")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    out = table.data[idx]
    shape = table.data.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), vjp)


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / count,)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; each slice along ``axis`` sums to one."""
    a = as_tensor(a)
    ax = a.ndim + axis if axis < 0 else axis
    if not 0 <= ax < a.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for {a.shape}")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = as_tensor(a)
    gamma = as_tensor(gamma, like=a)
    beta = as_tensor(beta, like=a)
    n = a.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ValueError("layer_norm: gamma/beta must match the last extent")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _make(out, (a, gamma, beta), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), vjp)


def bce_with_logits(logits: Tensor, targets, pos_weight=None) -> Tensor:
    """Mean binary cross-entropy from logits, in log-sum-exp form.

    ``targets`` must contain only 0s and 1s. ``pos_weight``, when given,
    scales the positive-class term per trailing axis (e.g. one weight per
    label column).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ValueError(f"bce_with_logits: shapes differ ({logits.shape} vs {t.shape})")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    z = logits.data
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    log_sig = -np.logaddexp(0.0, -z)
    log_one_minus = -np.logaddexp(0.0, z)
    if pos_weight is not None:
        w = np.asarray(pos_weight, dtype=z.dtype)
        per = -(w * t * log_sig + (1.0 - t) * log_one_minus)
    else:
        w = None
        per = -(t * log_sig + (1.0 - t) * log_one_minus)
    count = per.size
    out = np.asarray(per.sum() / count)
    if not np.isfinite(out):
        raise FloatingPointError("bce_with_logits: non-finite loss")

    def vjp(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        if w is not None:
            dz = (w * t * (sig - 1.0) + (1.0 - t) * sig) / count
        else:
            dz = (sig - t) / count
        return (g * dz,)

    return _make(out, (logits,), vjp)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf reachable from a scalar loss.

    The graph is traversed once in reverse topological order and freed
    afterwards; calling backward a second time on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _tracked(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._vjp = None
            node._parents = ()
    loss._consumed = True


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
