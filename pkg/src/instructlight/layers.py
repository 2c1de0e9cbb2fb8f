"""Parameterized building blocks on top of the tensor core.

Modules register parameters through ordinary attribute assignment; the
recursive walk in :meth:`Module.named_parameters` yields deterministic,
dotted names used for checkpointing and optimizer state.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


class Module:
    """Base class: collects parameters from attributes, lists and tuples."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


def he_init(rng, shape, fan_in, dtype=np.float32):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def xavier_init(rng, shape, fan_in, fan_out, dtype=np.float32):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng=None, bias=True, init="xavier", name="linear", dtype=np.float32):
        if init == "zero":
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        elif init == "he":
            w = he_init(rng, (in_dim, out_dim), in_dim, dtype)
        else:
            w = xavier_init(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias") if bias else None

    def __call__(self, x):
        vector = isinstance(x, Tensor) and x.data.ndim == 1
        if vector:
            x = nc.reshape(x, (1, -1))
        out = nc.matmul(x, self.weight.tensor)
        if self.bias is not None:
            out = nc.add(out, self.bias.tensor)
        return nc.reshape(out, (-1,)) if vector else out


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None,
                 bias=True, init="he", name="conv", dtype=np.float32):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        if init == "zero":
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            w = he_init(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias") if bias else None

    def __call__(self, x):
        out = nc.conv2d(x, self.weight.tensor, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = nc.add(out, self.bias.tensor.reshape((1, -1, 1, 1)))
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, affine=True, name="ln", dtype=np.float32):
        self.eps = eps
        if affine:
            self.gain = Parameter(np.ones(dim, dtype=dtype), f"{name}.gain")
            self.bias = Parameter(np.zeros(dim, dtype=dtype), f"{name}.bias")
        else:
            self.gain = None
            self.bias = None

    def __call__(self, x):
        g = self.gain.tensor if self.gain is not None else None
        b = self.bias.tensor if self.bias is not None else None
        return nc.layer_norm(x, g, b, eps=self.eps)


class ChannelNorm(Module):
    """Layer normalization over the channel axis of NCHW feature maps."""

    def __init__(self, channels, eps=1e-5, name="cnorm", dtype=np.float32):
        self.eps = eps
        self.gain = Parameter(np.ones(channels, dtype=dtype), f"{name}.gain")
        self.bias = Parameter(np.zeros(channels, dtype=dtype), f"{name}.bias")

    def __call__(self, x):
        return nc.channel_norm(x, self.gain.tensor, self.bias.tensor, eps=self.eps)


class Embedding(Module):
    def __init__(self, vocab, dim, rng, name="embed", dtype=np.float32):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(vocab, dim)).astype(dtype), f"{name}.table")

    def __call__(self, ids):
        return nc.embedding(self.table.tensor, ids)


class Sequential(Module):
    def __init__(self, *blocks):
        self.blocks = list(blocks)

    def __call__(self, x):
        for b in self.blocks:
            x = b(x) if isinstance(b, Module) else b(x)
        return x


def flatten_spatial(x):
    """NCHW -> (N, H*W, C) token view."""
    n, c, h, w = x.data.shape
    return nc.reshape(nc.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def unflatten_spatial(x, h, w):
    """(N, H*W, C) -> NCHW."""
    n, hw, c = x.data.shape
    return nc.transpose(nc.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def as_batch(x, dtype=np.float32):
    """Wrap a numpy array as a non-grad tensor input."""
    return Tensor(np.asarray(x, dtype=dtype))
