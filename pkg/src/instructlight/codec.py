"""Latent codec (encoder/decoder pair) and the conditioning image encoder.

Images are CHW float arrays in [0, 1]; values are clamped on ingestion and
emission.  Two codec modes exist: an exact identity passthrough (pixel-space
diffusion, fastest test path) and a small deterministic convolutional
autoencoder with spatial reduction factor ``f`` and ``c`` latent channels,
trained separately with an L2 reconstruction loss and then frozen.  The
encoder output is tanh-bounded so latents stay compatible with unit-variance
noising.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .layers import Conv2d, Module
from .numcore import Tensor


def load_image(path):
    """Read an 8-bit RGB PNG into a CHW float32 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(image, path):
    """Write a CHW float image in [0, 1] as an 8-bit RGB PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def clip01(arr):
    return np.clip(np.asarray(arr), 0.0, 1.0)


def _ensure_batch(x, dtype=np.float32):
    if isinstance(x, Tensor):
        if x.data.ndim == 3:
            return nc.reshape(x, (1,) + x.data.shape), True
        return x, False
    arr = np.asarray(x, dtype=dtype)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    return Tensor(arr), single


def _maybe_squeeze(t, single):
    return nc.reshape(t, t.data.shape[1:]) if single else t


class IdentityCodec(Module):
    """Exact passthrough codec: pixel-space latents, factor 1."""

    factor = 1

    def __init__(self, latent_channels=3):
        self.latent_channels = latent_channels

    def encode(self, x):
        t, single = _ensure_batch(x)
        return _maybe_squeeze(t, single)

    def decode(self, z):
        t, single = _ensure_batch(z)
        out = Tensor(np.clip(t.data, 0.0, 1.0))
        return _maybe_squeeze(out, single)


class ConvCodec(Module):
    """Deterministic convolutional autoencoder with tanh-bounded latents."""

    def __init__(self, factor=4, latent_channels=4, base=32, rng=None, dtype=np.float32):
        if factor < 2 or factor & (factor - 1):
            raise ValueError("ConvCodec factor must be a power of two >= 2")
        self.factor = factor
        self.latent_channels = latent_channels
        n_down = factor.bit_length() - 1

        chans = [3] + [min(base * 2 ** i, base * 2) for i in range(n_down)]
        self.enc_convs = []
        for i in range(n_down):
            self.enc_convs.append(Conv2d(chans[i], chans[i + 1], 3, stride=2,
                                         rng=rng, name=f"enc{i}", dtype=dtype))
        self.enc_mid = Conv2d(chans[-1], chans[-1], 3, rng=rng, name="enc_mid", dtype=dtype)
        self.enc_out = Conv2d(chans[-1], latent_channels, 3, rng=rng, name="enc_out", dtype=dtype)

        self.dec_in = Conv2d(latent_channels, chans[-1], 3, rng=rng, name="dec_in", dtype=dtype)
        self.dec_convs = []
        for i in reversed(range(n_down)):
            self.dec_convs.append(Conv2d(chans[i + 1], max(chans[i], base), 3,
                                         rng=rng, name=f"dec{i}", dtype=dtype))
        self.dec_mid = Conv2d(max(chans[0], base), base, 3, rng=rng, name="dec_mid", dtype=dtype)
        self.dec_out = Conv2d(base, 3, 3, rng=rng, name="dec_out", dtype=dtype)

    def _check_dims(self, h, w):
        if h % self.factor or w % self.factor:
            raise ValueError(f"image dims {h}x{w} not divisible by factor {self.factor}")

    def encode(self, x):
        t, single = _ensure_batch(x)
        self._check_dims(*t.data.shape[-2:])
        h = t
        for conv in self.enc_convs:
            h = nc.silu(conv(h))
        h = nc.silu(self.enc_mid(h))
        z = self.enc_out(h)
        # tanh-bounded latent: 2*sigmoid(2x)-1
        z = nc.add(nc.mul(nc.sigmoid(nc.mul(z, 2.0)), 2.0), -1.0)
        return _maybe_squeeze(z, single)

    def decode(self, z):
        t, single = _ensure_batch(z)
        if t.data.shape[-3] != self.latent_channels:
            raise ValueError(f"latent has {t.data.shape[-3]} channels, "
                             f"expected {self.latent_channels}")
        h = nc.silu(self.dec_in(t))
        for conv in self.dec_convs:
            h = nc.silu(conv(nc.upsample_nearest(h, 2)))
        h = nc.silu(self.dec_mid(h))
        out = nc.sigmoid(self.dec_out(h))
        return _maybe_squeeze(out, single)


class ImageEncoder(Module):
    """Trainable encoder producing the conditioning latent from the
    low-light image; a 4-layer strided conv stack mirroring the control
    branch stem.  Output shape always equals the diffusion latent shape."""

    def __init__(self, factor=4, latent_channels=4, base=32, rng=None, dtype=np.float32):
        if factor != 1 and (factor < 2 or factor & (factor - 1)):
            raise ValueError("ImageEncoder factor must be 1 or a power of two")
        self.factor = factor
        self.latent_channels = latent_channels
        n_down = factor.bit_length() - 1
        strides = [2] * n_down + [1] * (4 - n_down)
        chans = [3, base, base * 2, base * 2, latent_channels]
        self.convs = []
        for i, s in enumerate(strides):
            self.convs.append(Conv2d(chans[i], chans[i + 1], 3, stride=s,
                                     rng=rng, name=f"cond{i}", dtype=dtype))

    def __call__(self, y):
        t, single = _ensure_batch(y)
        h, w = t.data.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"image dims {h}x{w} not divisible by factor {self.factor}")
        x = t
        for conv in self.convs[:-1]:
            x = nc.silu(conv(x))
        out = self.convs[-1](x)
        return _maybe_squeeze(out, single)


def build_codec(mode, factor=4, latent_channels=4, rng=None, dtype=np.float32):
    if mode == "identity":
        return IdentityCodec(latent_channels=3)
    if mode == "learned":
        return ConvCodec(factor=factor, latent_channels=latent_channels, rng=rng, dtype=dtype)
    raise ValueError(f"unknown codec mode: {mode}")
