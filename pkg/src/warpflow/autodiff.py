"""Minimal dense-tensor engine with reverse-mode differentiation.

Define-by-run: every op builds a node holding its parents and a backward
closure; the graph is rebuilt on each forward pass. 64-bit floats are the
default (gradient checks need the headroom); 32-bit is opt-in for training
speed. Cross-correlation convention for conv2d, align-corners=false for all
interpolation.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "full",
    "randn",
    "concat",
    "stack",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "layer_norm",
    "self_attention",
    "bilinear_resize",
    "resize_matrices",
    "set_nan_checks",
    "no_grad",
    "trace_context",
]

_NAN_CHECKS = False


def set_nan_checks(enabled: bool) -> None:
    """Enable per-op finiteness assertions (slow; meant for tests)."""
    global _NAN_CHECKS
    _NAN_CHECKS = enabled


class GradientError(RuntimeError):
    pass


class DimensionError(ValueError):
    pass


# Profiler hook: when a trace list is active, every op appends a record
# (op name, output shape, output float count). bench_profiler builds its
# ledger from these records.
_TRACE: Optional[list] = None


class trace_context:
    def __init__(self):
        self.records: list[tuple[str, tuple[int, ...], int]] = []

    def __enter__(self):
        global _TRACE
        self._prev = _TRACE
        _TRACE = self.records
        return self

    def __exit__(self, *exc):
        global _TRACE
        _TRACE = self._prev
        return False


def _trace(name: str, out: np.ndarray) -> None:
    if _TRACE is not None:
        _TRACE.append((name, out.shape, int(out.size)))


class no_grad:
    """Context that suppresses graph construction."""

    _active = False

    def __enter__(self):
        self._prev = no_grad._active
        no_grad._active = True
        return self

    def __exit__(self, *exc):
        no_grad._active = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_done", "_grad_shared")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), backward: Optional[Callable] = None,
                 op: str = "leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward
        self._op = op
        self._done = False
        self._grad_shared = False

    # -- basic introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Populates .grad on every reachable requires_grad tensor. Calling it a
        second time on the same graph is an error (the tape is consumed).
        """
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar, got shape {self.shape}")
        if self._done:
            raise GradientError("backward already ran on this graph; rebuild the forward pass")

        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._done = True

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # keep a reference; copy lazily only if a second contribution
            # arrives (backward closures may hand the same array to several
            # parents, so in-place updates need an owned buffer)
            self.grad = g
            self._grad_shared = True
        else:
            if self._grad_shared:
                self.grad = self.grad.astype(self.grad.dtype, copy=True)
                self._grad_shared = False
            self.grad += g

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- shaped views ----------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    # -- pointwise shortcuts ---------------------------------------------------
    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)


# -----------------------------------------------------------------------------
# construction helpers
# -----------------------------------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def randn(rng: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype),
                  requires_grad=requires_grad)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_graph(*ts: Tensor) -> bool:
    return not no_grad._active and any(t.requires_grad for t in ts)


def _make(out_data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    _trace(op, out_data)
    if _NAN_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    grad_on = not no_grad._active and any(p.requires_grad for p in parents)
    if grad_on:
        return Tensor(out_data, requires_grad=True, parents=parents,
                      backward=backward, op=op)
    return Tensor(out_data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -----------------------------------------------------------------------------
# arithmetic ops
# -----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(-g)

    return _make(-a.data, "neg", (a,), bwd)


# -----------------------------------------------------------------------------
# pointwise nonlinearities
# -----------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g * (a.data > 0))

    return _make(out, "relu", (a,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    from scipy.special import erf as _erf  # local import keeps cold start cheap

    phi = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out = a.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accum(g * (phi + a.data * pdf))

    return _make(out, "gelu", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a._accum(g * out)

    return _make(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return _make(out, "log", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, "tanh", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bwd(g):
        a._accum(g * np.sign(a.data))

    return _make(out, "abs", (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * 0.5 / out)

    return _make(out, "sqrt", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        a._accum(g / (1.0 + np.exp(-a.data)))

    return _make(out, "softplus", (a,), bwd)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    out = np.logaddexp(a.data, b.data)

    def bwd(g):
        sa = 1.0 / (1.0 + np.exp(b.data - a.data))
        if a.requires_grad:
            a._accum(_unbroadcast(g * sa, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * (1.0 - sa), b.shape))

    return _make(out, "logaddexp", (a, b), bwd)


ELEMENTWISE_FNS = {
    "relu": relu,
    "gelu": gelu,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
}


def elementwise(fn: str, x: Tensor, y: Optional[Tensor] = None) -> Tensor:
    """Dispatch-by-name pointwise op (binary fns take two arguments)."""
    f = ELEMENTWISE_FNS.get(fn)
    if f is None:
        raise KeyError(f"unknown elementwise fn '{fn}'")
    if fn in ("add", "mul"):
        if y is None:
            raise ValueError(f"'{fn}' needs two operands")
        return f(x, y)
    return f(x)


# -----------------------------------------------------------------------------
# reductions and reshapes
# -----------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, a.shape))

    return _make(out, "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _make(out, "reshape", (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        a._accum(np.transpose(g, inv))

    return _make(out, "transpose", (a,), bwd)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis
               for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[idx] += g          # basic indexing never aliases within itself
        else:
            np.add.at(buf, idx, g)
        a._accum(buf)

    return _make(np.ascontiguousarray(out), "slice", (a,), bwd)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out, "concat", tuple(ts), bwd)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(out, "stack", tuple(ts), bwd)


# -----------------------------------------------------------------------------
# linear algebra
# -----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), bwd)


# -----------------------------------------------------------------------------
# softmax / layer norm (fused backward rules)
# -----------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accum(out * (g - dot))

    return _make(out, "softmax", (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1,
               eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        n = x.shape[axis]
        if x.requires_grad:
            gh = g * gamma.data
            t1 = gh.mean(axis=axis, keepdims=True)
            t2 = (gh * xhat).mean(axis=axis, keepdims=True)
            x._accum(inv * (gh - t1 - xhat * t2))
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.shape))

    return _make(out, "layer_norm", (x, gamma, beta), bwd)


# -----------------------------------------------------------------------------
# convolution
# -----------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with an OCkk kernel."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d kernels must be odd-sized")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise DimensionError("conv2d output size is not integral for this stride/padding")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    # shift-gather im2col: (C*kh*kw, N*Ho*Wo) built from cache-friendly slice
    # copies, matmuls stay large and contiguous
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
            cols[:, i, j] = sl.transpose(1, 0, 2, 3)
    cols2d = cols.reshape(c * kh * kw, n * ho * wo)
    wm = w.data.reshape(o, c * kh * kw)
    out = (wm @ cols2d).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        go = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if w.requires_grad:
            w._accum((go @ cols2d.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (wm.T @ go).reshape(c, kh, kw, n, ho, wo)
            gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        gcols[:, i, j].transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accum(gx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, "conv2d", parents, bwd)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accum(gx)

    return _make(out, "avg_pool2d", (x,), bwd)


# -----------------------------------------------------------------------------
# bilinear interpolation (separable, align_corners=false)
# -----------------------------------------------------------------------------

def resize_matrices(in_h: int, in_w: int, out_h: int, out_w: int, dtype=np.float64):
    """Row/column interpolation matrices R (out_h,in_h) and C (out_w,in_w)."""
    def axis_matrix(n_in, n_out):
        m = np.zeros((n_out, n_in), dtype=dtype)
        if n_in == 1:
            m[:, 0] = 1.0
            return m
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m[np.arange(n_out), lo] += 1.0 - frac
        m[np.arange(n_out), hi] += frac
        return m

    return axis_matrix(in_h, out_h), axis_matrix(in_w, out_w)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError("target size must be at least 1x1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        # still goes through _make so profiler traces remain complete
        def bwd_id(g):
            x._accum(g)
        return _make(x.data.copy(), "bilinear_resize", (x,), bwd_id)

    rm, cm = resize_matrices(h, w, out_h, out_w, dtype=x.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = np.einsum("oh,bhw,pw->bop", rm, flat, cm, optimize=True)
    out = out.reshape(n, c, out_h, out_w)

    def bwd(g):
        gf = g.reshape(n * c, out_h, out_w)
        gx = np.einsum("oh,bop,pw->bhw", rm, gf, cm, optimize=True)
        x._accum(gx.reshape(x.shape))

    return _make(np.ascontiguousarray(out), "bilinear_resize", (x,), bwd)


# -----------------------------------------------------------------------------
# attention
# -----------------------------------------------------------------------------

def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   heads: int) -> Tensor:
    """Multi-head self-attention over (..., L, d) tokens."""
    d = x.shape[-1]
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    batch = x.shape[:-2]
    ln = x.shape[-2]

    def split(t):
        t = reshape(t, batch + (ln, heads, dh))
        perm = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return transpose(t, perm)                         # ..., heads, L, dh

    qh, kh, vh = split(q), split(k), split(v)
    att = softmax(matmul(qh, transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
                  * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = matmul(att, vh)                                 # ..., heads, L, dh
    perm_back = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    ctx = reshape(transpose(ctx, perm_back), batch + (ln, d))
    return matmul(ctx, wo)
