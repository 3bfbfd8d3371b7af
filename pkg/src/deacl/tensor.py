"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: elementwise arithmetic, matmul, 3x3
convolution, batch normalization, pooling, softmax and friends. Graphs
are rebuilt on every forward pass and backward walks each node exactly
once in reverse topological order. Default precision is float32; the
DEACL_FLOAT64 env var (or `use_dtype`) switches everything to float64
for high-precision oracle runs.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class ZeroNormError(TensorError):
    pass


class GraphError(TensorError):
    pass


_DEFAULT_DTYPE = np.float64 if os.environ.get("DEACL_FLOAT64") == "1" else np.float32
_CHECK_FINITE = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 oracle runs)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional real array, optionally tracked in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_backprop_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backprop_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        out = Tensor(self.data.copy())
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        if self._backprop_done:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        self._backprop_done = True

        topo = []
        visited = set()
        stack = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    data = np.asarray(data)
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backprop_done = False
    out._op = op
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))
    return _make(a.data / b.data, (a, b), bwd, "div")


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    def bwd(g):
        _accum(a, g * p * np.power(a.data, p - 1.0))
    return _make(np.power(a.data, p), (a,), bwd, "power")


def texp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    def bwd(g):
        _accum(a, g * out_data)
    return _make(out_data, (a,), bwd, "exp")


def tlog(a):
    a = _as_tensor(a)
    def bwd(g):
        _accum(a, g / a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)  # non-finite values are rejected in _make
    return _make(out, (a,), bwd, "log")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    def bwd(g):
        _accum(a, g * mask)
    return _make(np.where(mask, a.data, 0), (a,), bwd, "relu")


def clamp(a, lo, hi):
    """Clamp to [lo, hi]; gradient is identity inside the interval, zero outside."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    def bwd(g):
        _accum(a, g * inside)
    return _make(np.clip(a.data, lo, hi), (a,), bwd, "clamp")


def sign(a):
    """Elementwise sign; deliberately gradient-free (attack update only)."""
    a = _as_tensor(a)
    return Tensor(np.sign(a.data))


# -- reductions and shape -------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


def reshape(a, shape):
    a = _as_tensor(a)
    def bwd(g):
        _accum(a, np.asarray(g).reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    def bwd(g):
        _accum(a, np.asarray(g).T)
    return _make(a.data.T, (a,), bwd, "transpose")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    def bwd(g):
        g = np.asarray(g)
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def l2_norm(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=keepdims)
    val = np.sqrt(sq)
    def bwd(g):
        if np.any(val == 0):
            raise ZeroNormError("l2_norm backward at a zero vector")
        g = np.asarray(g)
        v = val
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            v = np.expand_dims(v, axis)
        _accum(a, g * a.data / v)
    return _make(val, (a,), bwd, "l2_norm")


# -- softmax family -------------------------------------------------------


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        g = np.asarray(g)
        _accum(a, (g - (g * s).sum(axis=axis, keepdims=True)) * s)
    return _make(s, (a,), bwd, "softmax")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)
    def bwd(g):
        g = np.asarray(g)
        _accum(a, g - s * g.sum(axis=axis, keepdims=True))
    return _make(out_data, (a,), bwd, "log_softmax")


# -- spatial ops ----------------------------------------------------------


def pad2d(a, pad):
    """Zero-pad the two trailing spatial dims of a [B,C,H,W] tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError("pad2d expects a [B,C,H,W] tensor")
    p = int(pad)
    padded = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    def bwd(g):
        g = np.asarray(g)
        _accum(a, g[:, :, p:-p, p:-p] if p else g)
    return _make(padded, (a,), bwd, "pad2d")


def conv2d(x, w, stride=1, pad=1):
    """3x3 convolution, stride 1 or 2, zero padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise ShapeError("conv2d input must be [B,C,H,W]")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError("conv2d kernel must be [O,C,3,3]")
    if w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.data.shape} vs {w.data.shape}")
    if stride not in (1, 2):
        raise ShapeError("conv2d stride must be 1 or 2")
    B, C, H, W = x.data.shape
    O = w.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - 3) // stride + 1
    Wo = (Wp - 3) // stride + 1
    # gather the 9 shifted views: cols[B,C,3,3,Ho,Wo]
    cols = np.empty((B, C, 3, 3, Ho, Wo), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    out_data = np.einsum("ocij,bcijhw->bohw", w.data, cols, optimize=True)

    def bwd(g):
        g = np.asarray(g)
        _accum(w, np.einsum("bohw,bcijhw->ocij", g, cols, optimize=True))
        if x.requires_grad:
            gcols = np.einsum("ocij,bohw->bcijhw", w.data, g, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            _accum(x, gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp)

    return _make(out_data, (x, w), bwd, "conv2d")


def global_avg_pool(x):
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects [B,C,H,W]")
    B, C, H, W = x.data.shape
    def bwd(g):
        g = np.asarray(g)[:, :, None, None]
        _accum(x, np.broadcast_to(g / (H * W), x.data.shape))
    return _make(x.data.mean(axis=(2, 3)), (x,), bwd, "global_avg_pool")


def batch_normalize(x, gamma, beta, state, mode):
    """Per-channel normalization of a [B,C,H,W] tensor.

    mode "train": batch statistics, running averages updated.
    mode "attack": batch statistics, running averages untouched.
    mode "eval": running averages, no update.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError("batch_normalize expects [B,C,H,W]")
    if mode not in ("train", "attack", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    eps = state.eps
    axes = (0, 2, 3)
    if mode == "eval":
        m = state.running_mean[None, :, None, None]
        v = state.running_var[None, :, None, None]
        inv = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - m) * inv
        def bwd_eval(g):
            g = np.asarray(g)
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            _accum(x, g * gamma.data[None, :, None, None] * inv)
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        return _make(out, (x, gamma, beta), bwd_eval, "batch_normalize")

    m = x.data.mean(axis=axes)
    v = x.data.var(axis=axes)
    if mode == "train":
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * m.astype(np.float64)
        state.running_var = (1 - mom) * state.running_var + mom * v.astype(np.float64)
    inv = (1.0 / np.sqrt(v + eps))[None, :, None, None]
    xhat = (x.data - m[None, :, None, None]) * inv
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        g = np.asarray(g)
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            gsum = gx_hat.sum(axis=axes, keepdims=True)
            gdot = (gx_hat * xhat).sum(axis=axes, keepdims=True)
            _accum(x, inv * (gx_hat - gsum / n - xhat * gdot / n))

    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), bwd, "batch_normalize")


# -- composite helpers ----------------------------------------------------


def cosine_similarity(a, b):
    """Cosine similarity of two equal-length vectors, differentiable in both."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("cosine_similarity expects two equal-length vectors")
    if np.linalg.norm(a.data) == 0 or np.linalg.norm(b.data) == 0:
        raise ZeroNormError("cosine_similarity of a zero vector is undefined")
    return tsum(mul(a, b)) / (l2_norm(a) * l2_norm(b))


def cosine_rows(a, b):
    """Row-wise cosine similarity of two [B,d] tensors -> [B]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError("cosine_rows expects matching [B,d] tensors")
    if np.any(np.linalg.norm(a.data, axis=1) == 0) or np.any(np.linalg.norm(b.data, axis=1) == 0):
        raise ZeroNormError("cosine_rows given a zero-norm row")
    num = tsum(mul(a, b), axis=1)
    return num / (l2_norm(a, axis=1) * l2_norm(b, axis=1))


def normalize_rows(a):
    a = _as_tensor(a)
    if np.any(np.linalg.norm(a.data, axis=1) == 0):
        raise ZeroNormError("normalize_rows given a zero-norm row")
    return div(a, l2_norm(a, axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels is an integer array, not a Tensor."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    B, K = logits.data.shape
    onehot = np.zeros((B, K), dtype=logits.data.dtype)
    onehot[np.arange(B), labels] = 1.0
    logp = log_softmax(logits, axis=1)
    return -tmean(tsum(mul(logp, Tensor(onehot)), axis=1))


def cross_entropy_per_sample(logits, labels):
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    B, K = logits.data.shape
    onehot = np.zeros((B, K), dtype=logits.data.dtype)
    onehot[np.arange(B), labels] = 1.0
    logp = log_softmax(logits, axis=1)
    return -tsum(mul(logp, Tensor(onehot)), axis=1)


# -- gradient checking ----------------------------------------------------


def grad_check(f, xs, h=1e-3):
    """Max relative error between analytic gradients of f and central differences.

    f maps the tensors in xs to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    out = f(*xs)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    worst = 0.0
    for x in xs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f(*xs).data)
            flat[k] = orig - h
            fm = float(f(*xs).data)
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
