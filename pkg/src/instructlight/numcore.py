"""Dense tensors with reverse-mode automatic differentiation.

The op set is the closed set the models in this package need: matmul,
2-D convolution, layer normalization, softmax attention, pointwise
nonlinearities, reductions and reshapes.  Data lives in row-major numpy
arrays (float32 for training, float64 for gradient checks); gradients are
accumulated into ``Tensor.grad`` by :func:`backward`.

Every forward op verifies that its result is finite and raises
:class:`NonFiniteError` otherwise: a NaN that propagates silently into a
long diffusion run is far more expensive than the check.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "backward",
    "zero_grads",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "layer_norm",
    "channel_norm",
    "softmax",
    "scaled_dot_attention",
    "silu",
    "sigmoid",
    "reshape",
    "transpose",
    "concat",
    "embedding",
    "broadcast_to",
    "upsample_nearest",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr, op):
    # single-pass detector: any NaN/Inf propagates into the sum; finite
    # activations at realistic magnitudes cannot overflow the accumulator
    if arr.size and not math.isfinite(float(arr.sum(dtype=np.float64))):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None
        _check_finite(arr, "tensor")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Parameter:
    """Named tensor with a trainable flag.

    ``trainable=False`` makes gradient accumulation a no-op, which is how
    backbone freezing is enforced throughout the package.
    """

    __slots__ = ("tensor", "name")

    def __init__(self, data, name, trainable=True):
        self.tensor = Tensor(np.asarray(data), requires_grad=trainable)
        self.tensor.requires_grad = bool(trainable)  # independent of grad mode
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.tensor.requires_grad = bool(flag)
        if not flag:
            self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.data.shape}, trainable={self.trainable})"


def tensor(data, dtype=np.float32, requires_grad=False):
    """Create a tensor from array-like data with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(p for p in parents if p.requires_grad) if track else ()
    out._backward = backward_fn if track else None
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_check(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    av = _as_tensor(a)
    if not isinstance(b, Tensor):
        out = av.data + np.asarray(b, dtype=av.data.dtype)

        def _bw(g):
            _accum(av, _unbroadcast(g, av.data.shape))

        return _make(out, (av,), _bw, "add")
    bv = b
    _binary_check(av, bv, "add")
    out = av.data + bv.data

    def _bw(g):
        _accum(av, _unbroadcast(g, av.data.shape))
        _accum(bv, _unbroadcast(g, bv.data.shape))

    return _make(out, (av, bv), _bw, "add")


def mul(a, b):
    av = _as_tensor(a)
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=av.data.dtype)
        out = av.data * scale

        def _bw(g):
            _accum(av, _unbroadcast(g * scale, av.data.shape))

        return _make(out, (av,), _bw, "mul")
    bv = b
    _binary_check(av, bv, "mul")
    out = av.data * bv.data

    def _bw(g):
        _accum(av, _unbroadcast(g * bv.data, av.data.shape))
        _accum(bv, _unbroadcast(g * av.data, bv.data.shape))

    return _make(out, (av, bv), _bw, "mul")


def matmul(a, b):
    """Matrix product; supports stacked (batched) operands via broadcasting."""
    av, bv = _as_tensor(a), _as_tensor(b)
    _binary_check(av, bv, "matmul")
    if av.data.ndim < 2 or bv.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    if av.data.shape[-1] != bv.data.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree {av.data.shape} x {bv.data.shape}")
    out = av.data @ bv.data

    def _bw(g):
        if av.requires_grad:
            _accum(av, _unbroadcast(g @ np.swapaxes(bv.data, -1, -2), av.data.shape))
        if bv.requires_grad:
            _accum(bv, _unbroadcast(np.swapaxes(av.data, -1, -2) @ g, bv.data.shape))

    return _make(out, (av, bv), _bw, "matmul")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation of NCHW input with OIKK kernels."""
    xv, wv = _as_tensor(x), _as_tensor(w)
    _binary_check(xv, wv, "conv2d")
    if xv.data.ndim != 4 or wv.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weights")
    n, cin, ih, iw = xv.data.shape
    cout, cin_w, kh, kw = wv.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: channel mismatch {cin} vs {cin_w}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (ih + 2 * ph - kh) // sh + 1
    ow = (iw + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError("conv2d: kernel does not fit padded input")

    xp = np.pad(xv.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xv.data
    # gather per kernel offset (cache-friendly slice copies) into the
    # [N, C*K*K, OH*OW] layout, which also makes the output reshape free
    cols6 = np.empty((n, cin, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols6[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    cols = cols6.reshape(n, cin * kh * kw, oh * ow)
    w2 = wv.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(n, cout, oh, ow)

    def _bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        if wv.requires_grad:
            _accum(wv, (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.data.shape))
        if xv.requires_grad:
            dcols = (w2.T @ g2).reshape(n, cin, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += dcols[:, :, i, j]
            _accum(xv, dxp[:, :, ph:ph + ih, pw:pw + iw] if (ph or pw) else dxp)

    return _make(out, (xv, wv), _bw, "conv2d")


# --------------------------------------------------------------------------
# normalization / attention
# --------------------------------------------------------------------------

def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    xv = _as_tensor(x)
    mu = xv.data.mean(axis=-1, keepdims=True)
    xc = xv.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.data.dtype))
    xhat = xc * inv
    parents = [xv]
    gv = bv = None
    if gain is not None:
        gv = _as_tensor(gain)
        parents.append(gv)
    if bias is not None:
        bv = _as_tensor(bias)
        parents.append(bv)
    out = xhat
    if gv is not None:
        out = out * gv.data
    if bv is not None:
        out = out + bv.data

    def _bw(g):
        gx = g * gv.data if gv is not None else g
        if xv.requires_grad:
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(xv, inv * (gx - m1 - xhat * m2))
        if gv is not None and gv.requires_grad:
            _accum(gv, _unbroadcast(g * xhat, gv.data.shape))
        if bv is not None and bv.requires_grad:
            _accum(bv, _unbroadcast(g, bv.data.shape))

    return _make(np.ascontiguousarray(out), tuple(parents), _bw, "layer_norm")


def channel_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the channel axis of NCHW feature maps,
    without the transpose round-trips a last-axis norm would need."""
    if eps <= 0:
        raise ValueError("channel_norm: eps must be > 0")
    xv = _as_tensor(x)
    if xv.data.ndim != 4:
        raise ValueError("channel_norm expects NCHW input")
    gv, bv = _as_tensor(gain), _as_tensor(bias)
    mu = xv.data.mean(axis=1, keepdims=True)
    xc = xv.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.data.dtype))
    xhat = xc * inv
    g4 = gv.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + bv.data.reshape(1, -1, 1, 1)

    def _bw(g):
        gx = g * g4
        if xv.requires_grad:
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            _accum(xv, inv * (gx - m1 - xhat * m2))
        if gv.requires_grad:
            _accum(gv, (g * xhat).sum(axis=(0, 2, 3)))
        if bv.requires_grad:
            _accum(bv, g.sum(axis=(0, 2, 3)))

    return _make(out, (xv, gv, bv), _bw, "channel_norm")


def softmax(x):
    """Softmax over the last axis."""
    xv = _as_tensor(x)
    z = xv.data - xv.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        if xv.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(xv, (g - dot) * y)

    return _make(y, (xv,), _bw, "softmax")


def scaled_dot_attention(q, k, v, mask=None):
    """Single-head attention; returns (output, row-stochastic weights).

    ``mask`` is an optional 0/1 array broadcastable to the logit shape;
    zero entries are excluded from the softmax.
    """
    qv, kv, vv = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if qv.data.shape[-1] != kv.data.shape[-1]:
        raise ValueError("attention: q and k feature dims disagree")
    if kv.data.shape[-2] != vv.data.shape[-2]:
        raise ValueError("attention: k and v sequence lengths disagree")
    d = qv.data.shape[-1]
    logits = mul(matmul(qv, transpose(kv, _swap_last(kv.data.ndim))), 1.0 / math.sqrt(d))
    if mask is not None:
        m = np.asarray(mask, dtype=logits.data.dtype)
        logits = add(logits, (m - 1.0) * np.asarray(1e9, dtype=logits.data.dtype))
    weights = softmax(logits)
    return matmul(weights, vv), weights


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------

def sigmoid(x):
    xv = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-xv.data))

    def _bw(g):
        _accum(xv, g * y * (1.0 - y))

    return _make(y, (xv,), _bw, "sigmoid")


def silu(x):
    xv = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-xv.data))
    y = xv.data * s

    def _bw(g):
        _accum(xv, g * s * (1.0 + xv.data * (1.0 - s)))

    return _make(y, (xv,), _bw, "silu")


# --------------------------------------------------------------------------
# reductions / shape
# --------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    xv = _as_tensor(x)
    out = xv.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(xv, np.broadcast_to(gg, xv.data.shape).copy() if np.ndim(gg) else np.full_like(xv.data, gg))

    return _make(np.asarray(out), (xv,), _bw, "sum")


def tmean(x, axis=None, keepdims=False):
    xv = _as_tensor(x)
    out = xv.data.mean(axis=axis, keepdims=keepdims)
    count = xv.data.size if axis is None else np.prod([xv.data.shape[a] for a in np.atleast_1d(axis)])

    def _bw(g):
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(xv, np.broadcast_to(gg, xv.data.shape).copy() if np.ndim(gg) else np.full_like(xv.data, gg))

    return _make(np.asarray(out), (xv,), _bw, "mean")


def reshape(x, shape):
    xv = _as_tensor(x)
    out = xv.data.reshape(shape)

    def _bw(g):
        _accum(xv, g.reshape(xv.data.shape))

    return _make(out, (xv,), _bw, "reshape")


def transpose(x, axes):
    xv = _as_tensor(x)
    out = np.transpose(xv.data, axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        _accum(xv, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(np.ascontiguousarray(out), (xv,), _bw, "transpose")


def concat(tensors, axis):
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(ts), _bw, "concat")


def embedding(table, ids):
    """Row lookup into a [vocab, dim] table; gradient scatter-adds by id."""
    tv = _as_tensor(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.data.shape[0]):
        raise ValueError("embedding: id out of range")
    out = tv.data[idx]

    def _bw(g):
        if tv.requires_grad:
            dt = np.zeros_like(tv.data)
            np.add.at(dt, idx, g)
            _accum(tv, dt)

    return _make(np.ascontiguousarray(out), (tv,), _bw, "embedding")


def broadcast_to(x, shape):
    xv = _as_tensor(x)
    out = np.broadcast_to(xv.data, shape)

    def _bw(g):
        _accum(xv, _unbroadcast(g, xv.data.shape))

    return _make(np.ascontiguousarray(out), (xv,), _bw, "broadcast_to")


def upsample_nearest(x, factor=2):
    """Nearest-neighbour spatial upsampling of an NCHW tensor."""
    xv = _as_tensor(x)
    n, c, h, w = xv.data.shape
    out = np.ascontiguousarray(xv.data.repeat(factor, axis=2).repeat(factor, axis=3))

    def _bw(g):
        _accum(xv, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(out, (xv,), _bw, "upsample_nearest")


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable tensor.

    The graph is released as it is consumed; a second backward through the
    same nodes is not supported.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


def zero_grads(params):
    for p in params:
        p.tensor.grad = None
