"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learnable computation in this package runs through the ops defined
here.  Forward values live in row-major numpy arrays; each op whose inputs
require gradients records a backward closure, and ``Tensor.backward()``
replays the recorded graph in reverse topological order, accumulating
d(loss)/d(leaf) into the ``.grad`` buffers of gradient-requiring leaves.
Repeated ``backward()`` calls accumulate until grads are cleared.

Elementwise add/sub/mul/div accept numpy-broadcastable operands (backward
sums over broadcast axes); matmul accepts 2-D operands or stacks with equal
leading dims (or a stacked left operand against a 2-D right operand).  All
other ops require exact shapes.  Any non-finite forward value raises
immediately while ``finite_checks`` is on (the default).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True
_FINITE_CHECKS = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/eval paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` of every gradient-requiring leaf reachable from
        this scalar.  Fresh gradients are computed per call and added to any
        existing buffers, so two calls without zeroing double every gradient.
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        store: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def acc(t: "Tensor", g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            key = id(t)
            prev = store.get(key)
            store[key] = g if prev is None else prev + g

        for node in order:
            g = store.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, acc)
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS, reversed: root first, leaves last."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    """Wrap an op result, recording the backward closure when needed."""
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast up from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, acc):
        acc(a, _unbroadcast(g / b.data, a.data.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, acc):
        acc(a, -g)

    return _make(-a.data, (a,), bw)


# -- matmul ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {sa} @ {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner extents differ: {sa} @ {sb}")
    if a.ndim == b.ndim:
        if sa[:-2] != sb[:-2]:
            raise ShapeError(f"matmul stack dims differ: {sa} @ {sb}")
    elif b.ndim != 2:
        raise ShapeError(f"matmul supports stacked @ 2-D, got {sa} @ {sb}")

    out = a.data @ b.data

    def bw(g, acc):
        if a.requires_grad:
            acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.data.shape
                acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ bias broadcast over leading axes)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- transcendental / activation -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g, acc):
        acc(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, acc):
        acc(a, g / a.data)

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g, acc):
        acc(a, g * (0.5 / out))

    return _make(out, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    def bw(g, acc):
        acc(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def pow_(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g, acc):
        acc(a, g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a >= lo."""
    mask = a.data >= lo

    def bw(g, acc):
        acc(a, g * mask)

    return _make(np.maximum(a.data, lo), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g, acc):
        acc(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g, acc):
        acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g, acc):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du))

    return _make(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


# -- normalization ----------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.shape[-1]
    lead = tuple(range(x.ndim - 1))

    def bw(g, acc):
        if gamma.requires_grad:
            acc(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            acc(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            acc(
                x,
                inv
                * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                ),
            )
        _ = n

    return _make(out, (x, gamma, beta), bw)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """BatchNorm over a [B, C, H, W] map using batch statistics.

    Returns (normalized tensor, batch_mean, batch_var) with the stats as
    plain arrays for the caller's running-average update.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    axes = (0, 2, 3)
    m = float(np.prod([x.shape[i] for i in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gam = gamma.data.reshape(1, -1, 1, 1)
    out = gam * xhat + beta.data.reshape(1, -1, 1, 1)

    def bw(g, acc):
        if gamma.requires_grad:
            acc(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            acc(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gam
            acc(
                x,
                inv
                * (
                    dxhat
                    - dxhat.sum(axis=axes, keepdims=True) / m
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
                ),
            )

    y = _make(out, (x, gamma, beta), bw)
    return y, mu.reshape(-1), var.reshape(-1)


def batch_norm_infer(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """BatchNorm over [B, C, H, W] with frozen running statistics."""
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, -1, 1, 1)
    mu = running_mean.reshape(1, -1, 1, 1)
    gam = gamma.data.reshape(1, -1, 1, 1)
    xhat = (x.data - mu) * inv
    out = gam * xhat + beta.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)

    def bw(g, acc):
        if gamma.requires_grad:
            acc(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            acc(beta, g.sum(axis=axes))
        if x.requires_grad:
            acc(x, g * gam * inv)

    return _make(out, (x, gamma, beta), bw)


# -- reductions -------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
        g = g.reshape(kshape)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, acc):
        acc(a, _expand_reduced(np.asarray(g), a.data.shape, axis, keepdims))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i % a.ndim] for i in axes]))

    def bw(g, acc):
        acc(a, _expand_reduced(np.asarray(g) / count, a.data.shape, axis, keepdims))

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


# -- shape manipulation -------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape

    def bw(g, acc):
        acc(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g, acc):
        acc(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, acc):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            acc(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def pad(a: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``pad_width`` is per-axis (before, after) like np.pad."""
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.data.shape))

    def bw(g, acc):
        acc(a, g[key])

    return _make(np.pad(a.data, pw), (a,), bw)


def roll(a: Tensor, shift: Sequence[int], axis: Sequence[int]) -> Tensor:
    shift = tuple(shift)
    axis = tuple(axis)

    def bw(g, acc):
        acc(a, np.roll(g, tuple(-s for s in shift), axis=axis))

    return _make(np.roll(a.data, shift, axis=axis), (a,), bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints / slices); gradient scatters back into place."""

    def bw(g, acc):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] = g
            acc(a, buf)

    return _make(a.data[key], (a,), bw)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g, acc):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            acc(a, buf)

    return _make(a.data[idx], (a,), bw)


def gather2d(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[...] = a[rows[...], cols[...]] for same-shape integer index arrays."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(g, acc):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, cols), g)
            acc(a, buf)

    return _make(a.data[rows, cols], (a,), bw)


def scatter_rows(a: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Embed rows of ``a`` into a zero tensor of ``length`` rows (inverse of gather)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((length,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)

    def bw(g, acc):
        acc(a, g[idx])

    return _make(out, (a,), bw)


# -- convolution ---------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad_px: int = 0) -> Tensor:
    """2-D cross-correlation on [B, C, H, W] (or [C, H, W]) inputs.

    w is [O, C, kh, kw]; output extents must divide exactly:
    H' = (H + 2*pad - kh) / stride + 1, likewise W'.
    """
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] and [O,C,kh,kw], got {x.shape} and {w.shape}")
    B, C, H, W = xd.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if (H + 2 * pad_px - kh) % stride or (W + 2 * pad_px - kw) % stride:
        raise ShapeError(
            f"conv2d non-integral output extent for input {x.shape}, kernel {w.shape}, "
            f"stride {stride}, pad {pad_px}"
        )
    Ho = (H + 2 * pad_px - kh) // stride + 1
    Wo = (W + 2 * pad_px - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d kernel {w.shape} does not fit padded input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad_px, pad_px), (pad_px, pad_px))) if pad_px else xd
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, Ho, Wo, C, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    ).reshape(B, Ho * Wo, C * kh * kw)
    w2 = w.data.reshape(O, -1)
    out = cols @ w2.T  # [B, Ho*Wo, O]
    if b is not None:
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {O} output channels")
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1).reshape(B, O, Ho, Wo))
    if squeeze:
        out = out[0]

    def bw(g, acc):
        gb = g[None] if squeeze else g
        gmat = gb.reshape(-1, O, Ho * Wo).transpose(0, 2, 1)  # [B, Ho*Wo, O]
        if b is not None and b.requires_grad:
            acc(b, gmat.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = np.einsum("bpk,bpo->ok", cols, gmat)
            acc(w, gw.reshape(O, C, kh, kw))
        if x.requires_grad:
            gcols = (gmat @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i + stride * Ho
                for j in range(kw):
                    wi = j + stride * Wo
                    gxp[:, :, i:hi:stride, j:wi:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad_px : pad_px + H, pad_px : pad_px + W] if pad_px else gxp
            acc(x, gx[0] if squeeze else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)
