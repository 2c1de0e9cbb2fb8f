"""Noise-prediction network.

A compact U-Net predicts the noise in a latent given the timestep and the
instruction prior (consumed only through cross-attention at the configured
levels and the middle block).  A control branch - a trainable copy of the
U-Net encoder fed the sum of the noisy latent and a projection of the
conditioning latent - produces one residual per decoder junction, injected
through zero-initialized 1x1 projections so the branch is exactly neutral
at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .fusion import TimeEmbedder
from .layers import ChannelNorm, Conv2d, Linear, Module, flatten_spatial, unflatten_spatial


@dataclass(frozen=True)
class UNetSpec:
    """Architecture knobs for the denoiser U-Net."""

    latent_channels: int = 4
    base_channels: int = 48
    channel_mults: tuple = (1, 2, 2)
    attention_levels: tuple = (1, 2)
    cond_dim: int = 128
    temb_dim: int = 128

    def __post_init__(self):
        if not self.attention_levels:
            raise ValueError("at least one level must carry cross-attention, "
                             "otherwise the instruction prior is unused")
        if any(l < 0 or l >= len(self.channel_mults) for l in self.attention_levels):
            raise ValueError(f"attention level out of range: {self.attention_levels}")

    @property
    def level_channels(self):
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def n_levels(self):
        return len(self.channel_mults)

    def to_dict(self):
        return {"latent_channels": self.latent_channels,
                "base_channels": self.base_channels,
                "channel_mults": list(self.channel_mults),
                "attention_levels": list(self.attention_levels),
                "cond_dim": self.cond_dim,
                "temb_dim": self.temb_dim}


class ResBlock(Module):
    def __init__(self, cin, cout, temb_dim, rng, dtype=np.float32):
        self.norm1 = ChannelNorm(cin, dtype=dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng=rng, name="conv1", dtype=dtype)
        self.temb_proj = Linear(temb_dim, cout, rng, name="temb", dtype=dtype)
        self.norm2 = ChannelNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, name="conv2", dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng=rng, name="skip", dtype=dtype) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(nc.silu(self.norm1(x)))
        shift = self.temb_proj(nc.silu(temb))
        h = nc.add(h, nc.reshape(shift, shift.data.shape[:-1] + (shift.data.shape[-1], 1, 1)))
        h = self.conv2(nc.silu(self.norm2(h)))
        return nc.add(h, self.skip(x) if self.skip is not None else x)


class CrossAttention(Module):
    """Spatial tokens attend to the instruction prior tokens."""

    def __init__(self, channels, cond_dim, rng, dtype=np.float32):
        self.norm = ChannelNorm(channels, dtype=dtype)
        self.q_proj = Linear(channels, channels, rng, name="q", dtype=dtype)
        self.k_proj = Linear(cond_dim, channels, rng, name="k", dtype=dtype)
        self.v_proj = Linear(cond_dim, channels, rng, name="v", dtype=dtype)
        self.out_proj = Linear(channels, channels, rng, name="out", dtype=dtype)

    def __call__(self, x, prior):
        n, c, h, w = x.data.shape
        tokens = flatten_spatial(self.norm(x))
        attn, weights = nc.scaled_dot_attention(
            self.q_proj(tokens), self.k_proj(prior), self.v_proj(prior))
        out = unflatten_spatial(self.out_proj(attn), h, w)
        return nc.add(x, out), weights


class _Encoder(Module):
    """Shared layout of the U-Net encoder and its control-branch copy."""

    def __init__(self, spec, rng, dtype=np.float32):
        chs = spec.level_channels
        self.stem = Conv2d(spec.latent_channels, chs[0], 3, rng=rng, name="stem", dtype=dtype)
        self.res = []
        self.attn = []
        self.down = []
        for i, ch in enumerate(chs):
            cin = chs[0] if i == 0 else chs[i]
            self.res.append(ResBlock(cin, ch, spec.temb_dim, rng, dtype=dtype))
            self.attn.append(CrossAttention(ch, spec.cond_dim, rng, dtype=dtype)
                             if i in spec.attention_levels else None)
            if i + 1 < len(chs):
                self.down.append(Conv2d(ch, chs[i + 1], 3, stride=2, rng=rng,
                                        name=f"down{i}", dtype=dtype))
        self.mid1 = ResBlock(chs[-1], chs[-1], spec.temb_dim, rng, dtype=dtype)
        self.mid_attn = CrossAttention(chs[-1], spec.cond_dim, rng, dtype=dtype)
        self.mid2 = ResBlock(chs[-1], chs[-1], spec.temb_dim, rng, dtype=dtype)

    def run(self, x, temb, prior, attn_sink=None, tag=""):
        skips = []
        h = self.stem(x)
        for i, block in enumerate(self.res):
            h = block(h, temb)
            if self.attn[i] is not None:
                h, w = self.attn[i](h, prior)
                if attn_sink is not None:
                    attn_sink.append({"level": f"{tag}enc{i}", "weights": w,
                                      "shape": h.data.shape[-2:]})
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        h = self.mid1(h, temb)
        h, w = self.mid_attn(h, prior)
        if attn_sink is not None:
            attn_sink.append({"level": f"{tag}mid", "weights": w,
                              "shape": h.data.shape[-2:]})
        h = self.mid2(h, temb)
        return h, skips


class UNet(Module):
    """Shape-preserving noise predictor eps(z_t, t, prior)."""

    def __init__(self, spec, rng, dtype=np.float32):
        self.spec = spec
        chs = spec.level_channels
        self.time_embedder = TimeEmbedder(spec.temb_dim, spec.temb_dim, rng,
                                          zero_out=False, dtype=dtype)
        self.encoder = _Encoder(spec, rng, dtype=dtype)
        self.up_res = []
        self.up_attn = []
        self.up = []
        for i in reversed(range(spec.n_levels)):
            self.up_res.append(ResBlock(2 * chs[i], chs[i], spec.temb_dim, rng, dtype=dtype))
            self.up_attn.append(CrossAttention(chs[i], spec.cond_dim, rng, dtype=dtype)
                                if i in spec.attention_levels else None)
            if i > 0:
                self.up.append(Conv2d(chs[i], chs[i - 1], 3, rng=rng, name=f"up{i}", dtype=dtype))
        self.out_norm = ChannelNorm(chs[0], dtype=dtype)
        self.out_conv = Conv2d(chs[0], spec.latent_channels, 3, rng=rng, init="zero",
                               name="out", dtype=dtype)

    def _check_input(self, z_t):
        n, c, h, w = z_t.data.shape
        div = 2 ** (self.spec.n_levels - 1)
        if h % div or w % div:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {div}")
        if c != self.spec.latent_channels:
            raise ValueError(f"latent has {c} channels, expected {self.spec.latent_channels}")

    def forward_with_temb(self, z_t, temb, prior, control_residuals=None, attn_sink=None):
        self._check_input(z_t)
        h, skips = self.encoder.run(z_t, temb, prior, attn_sink=attn_sink)
        if control_residuals is not None:
            skips = [nc.add(s, r) for s, r in zip(skips, control_residuals[:-1])]
            h = nc.add(h, control_residuals[-1])
        for j, i in enumerate(reversed(range(self.spec.n_levels))):
            h = nc.concat([h, skips[i]], axis=1)
            h = self.up_res[j](h, temb)
            if self.up_attn[j] is not None:
                h, w = self.up_attn[j](h, prior)
                if attn_sink is not None:
                    attn_sink.append({"level": f"dec{i}", "weights": w,
                                      "shape": h.data.shape[-2:]})
            if j < len(self.up):
                h = self.up[j](nc.upsample_nearest(h, 2))
        return self.out_conv(nc.silu(self.out_norm(h)))

    def __call__(self, z_t, t, prior, control_residuals=None, attn_sink=None):
        temb = self.time_embedder(t)
        return self.forward_with_temb(z_t, temb.values, prior,
                                      control_residuals=control_residuals,
                                      attn_sink=attn_sink)


class ControlBranch(Module):
    """Trainable encoder copy with zero-initialized fusion projections."""

    def __init__(self, spec, rng, dtype=np.float32):
        chs = spec.level_channels
        self.cond_proj = Conv2d(spec.latent_channels, spec.latent_channels, 3,
                                rng=rng, name="cond_proj", dtype=dtype)
        self.encoder = _Encoder(spec, rng, dtype=dtype)
        self.fusers = [Conv2d(ch, ch, 1, rng=rng, init="zero", bias=False,
                              name=f"fuse{i}", dtype=dtype)
                       for i, ch in enumerate(chs)]
        self.mid_fuser = Conv2d(chs[-1], chs[-1], 1, rng=rng, init="zero", bias=False,
                                name="fuse_mid", dtype=dtype)

    def __call__(self, z_t, cond_latent, temb, prior, attn_sink=None):
        if cond_latent.data.shape != z_t.data.shape:
            raise ValueError(f"conditioning latent shape {cond_latent.data.shape} "
                             f"!= noisy latent shape {z_t.data.shape}")
        x = nc.add(z_t, self.cond_proj(cond_latent))
        h, skips = self.encoder.run(x, temb, prior, attn_sink=attn_sink, tag="ctrl_")
        residuals = [f(s) for f, s in zip(self.fusers, skips)]
        residuals.append(self.mid_fuser(h))
        return residuals


def eps_theta(z_t, t, cond_latent, prior, unet, control=None, attn_sink=None):
    """Full conditional noise prediction with control residuals injected."""
    temb = unet.time_embedder(t)
    residuals = None
    if control is not None:
        residuals = control(z_t, cond_latent, temb.values, prior, attn_sink=attn_sink)
    return unet.forward_with_temb(z_t, temb.values, prior,
                                  control_residuals=residuals, attn_sink=attn_sink)
