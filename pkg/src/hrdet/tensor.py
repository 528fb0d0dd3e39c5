"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure; ``backward`` walks the
reachable nodes in reverse creation order. Storage is float32 unless a
different float dtype is requested (the gradient checker runs in float64).
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from . import kernels

_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Set the float dtype used for newly constructed tensors."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def get_default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or _default_dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- autodiff ----------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            for p in node._parents:
                if p.requires_grad and p._id not in nodes:
                    stack.append(p)
        grads = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_wrap(o, self.dtype), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(_wrap(o, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    out = (x * cdf).astype(x.dtype)
    return Tensor._make(out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),))


def activation(name: str):
    try:
        return {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return Tensor._make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), bw)


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,),
                        lambda g: (_unbroadcast(g, src),))


def _check_index(shape, idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    for ax, it in enumerate(items):
        if ax >= len(shape):
            raise IndexError(f"too many indices for shape {shape}")
        n = shape[ax]
        if isinstance(it, (int, np.integer)):
            if not -n <= it < n:
                raise IndexError(f"index {it} out of range for axis {ax} of extent {n}")
        elif isinstance(it, slice):
            for bound in (it.start, it.stop):
                if bound is not None and not -n <= bound <= n:
                    raise IndexError(f"slice bound {bound} out of range for axis {ax} of extent {n}")
        elif isinstance(it, (list, np.ndarray)):
            arr = np.asarray(it)
            if arr.dtype != bool and arr.size and (arr.max() >= n or arr.min() < -n):
                raise IndexError(f"index array out of range for axis {ax} of extent {n}")


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    _check_index(a.shape, idx)
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), bw)


# -- normalisers and probabilities ----------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (out * (g - dot),)

    return Tensor._make(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype),)

    return Tensor._make(out, (a,), bw)


def _normalize(x: np.ndarray, axes, eps: float):
    mu = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return ((x - mu) * inv), inv


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes):
    g = g.astype(np.float64)
    n = np.prod([xhat.shape[a] for a in axes])
    gm = g.sum(axis=axes, keepdims=True) / n
    gxm = (g * xhat).sum(axis=axes, keepdims=True) / n
    return inv * (g - gm - xhat * gxm)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    xhat, inv = _normalize(x.data, (-1,), eps)
    out = (xhat * gain.data + bias.data).astype(x.dtype)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dx = _normalize_backward(g * gain.data, xhat, inv, (-1,)).astype(x.dtype)
        dgain = (g * xhat).sum(axis=lead).astype(x.dtype)
        dbias = g.sum(axis=lead, dtype=np.float64).astype(x.dtype)
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), bw)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of a (C, H, W) map with per-channel affine."""
    C, H, W = x.shape
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    xg = x.data.reshape(groups, C // groups, H, W)
    axes = (1, 2, 3)
    xhat, inv = _normalize(xg, axes, eps)
    xhat = xhat.reshape(C, H, W)
    out = (xhat * gain.data[:, None, None] + bias.data[:, None, None]).astype(x.dtype)

    def bw(g):
        gx = (g * gain.data[:, None, None]).reshape(groups, C // groups, H, W)
        dx = _normalize_backward(gx, xhat.reshape(groups, C // groups, H, W), inv, axes)
        dgain = (g * xhat).sum(axis=(1, 2)).astype(x.dtype)
        dbias = g.sum(axis=(1, 2), dtype=np.float64).astype(x.dtype)
        return dx.reshape(C, H, W).astype(x.dtype), dgain, dbias

    return Tensor._make(out, (x, gain, bias), bw)


# -- spatial ops ----------------------------------------------------------------

def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if k > n + 2 * pad or span % stride:
        raise ValueError(
            f"conv extent {n} with kernel {k}, stride {stride}, pad {pad} "
            f"does not give an integral output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with a (C_out, C_in, kh, kw) kernel."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = conv_output_extent(H, kh, stride, pad)
    Wo = conv_output_extent(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, stride)
    wm = w.data.reshape(O, -1)
    out = (wm @ cols).reshape(O, Ho, Wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    Hp, Wp = xp.shape[1:]

    def bw(g):
        gm = g.reshape(O, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = np.ascontiguousarray(wm.T @ gm)
        dxp = kernels.col2im(dcols, C, Hp, Wp, kh, kw, stride)
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        db = gm.sum(axis=1, dtype=np.float64).astype(x.dtype) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(out.astype(x.dtype, copy=False), parents, bw)


def _check_pool(x: Tensor, k: int):
    C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"pool size {k} does not divide spatial extent {H}x{W}")
    return C, H, W


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    C, H, W = _check_pool(x, k)
    blocks = x.data.reshape(C, H // k, k, W // k, k).transpose(0, 1, 3, 2, 4).reshape(C, H // k, W // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(C, H // k, W // k, k, k).transpose(0, 1, 3, 2, 4).reshape(C, H, W),)

    return Tensor._make(out, (x,), bw)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    C, H, W = _check_pool(x, k)
    out = x.data.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4), dtype=np.float64).astype(x.dtype)

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k),)

    return Tensor._make(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)),)

    return Tensor._make(out, (x,), bw)


# -- losses -----------------------------------------------------------------------

def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Summed smooth L1 of ``pred - target`` (quadratic below |x| = 1)."""
    pred = _wrap(pred)
    target = _wrap(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 length mismatch: {pred.shape} vs {target.shape}")
    x = pred.data - target.data
    ax = np.abs(x)
    small = ax < 1.0
    val = np.where(small, 0.5 * x * x, ax - 0.5).sum(dtype=np.float64)
    slope = np.where(small, x, np.sign(x))

    def bw(g):
        return g * slope, -g * slope

    return Tensor._make(np.asarray(val, dtype=pred.dtype), (pred, target), bw)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels over the last axis."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    total = sum_(picked) * -1.0
    return total * (1.0 / len(labels)) if reduction == "mean" else total
