"""Instruction-prior fusion stack.

A fixed set of learnable query tokens is refined by a stack of blocks, each
applying time-modulated layer normalization, cross-attention over the
concatenation of the (normalized) queries with the text embeddings, and a
feed-forward update.  The stack output is the instruction prior consumed by
the denoiser's cross-attention layers; its token count never depends on the
instruction length.

Block arithmetic, with p the incoming queries and c the time embedding:

    p_in = p + c
    a    = AdaLN(p_in, c)
    p2   = p_in + Wo CA(q=a, kv=[a; text])
    out  = p2 + FFN(AdaLN(p2, c))

All out-projections (attention out, FFN out, the modulation projections and
the final layer of the time embedder) start at zero, so a freshly built
stack is the identity on its queries for any text and timestep.  Ablation
modes: "adaln" (full), "ln" (no time conditioning), "mlp" (blocks replaced
by feed-forward updates over mean-pooled text), "none" (bare queries).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .layers import LayerNorm, Linear, Module
from .numcore import Parameter, Tensor

FUSION_MODES = ("none", "mlp", "ln", "adaln")


def sinusoidal_time_embedding(t, dim):
    """Deterministic sinusoidal timestep features: [sin.. | cos..].

    Accepts a scalar or a 1-D array of timesteps; returns float64
    [dim] or [len(t), dim].
    """
    if dim < 2:
        raise ValueError("time embedding dim must be >= 2")
    tt = np.asarray(t, dtype=np.float64)
    scalar = tt.ndim == 0
    tt = np.atleast_1d(tt)
    if np.any(tt < 0):
        raise ValueError("timesteps must be >= 0")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = tt[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb[0] if scalar else emb


@dataclass
class TimeEmbedding:
    """Projected timestep conditioning vector(s)."""

    dim: int
    values: Tensor  # [dim] or [N, dim]


class TimeEmbedder(Module):
    """Sinusoidal features followed by a trainable 2-layer projection."""

    def __init__(self, base_dim, out_dim, rng, zero_out=True, dtype=np.float32):
        self.base_dim = base_dim
        self.out_dim = out_dim
        self.dtype = dtype
        self.proj_in = Linear(base_dim, out_dim, rng, name="temb.in", dtype=dtype)
        self.proj_out = Linear(out_dim, out_dim, rng, name="temb.out",
                               init="zero" if zero_out else "xavier", dtype=dtype)

    def __call__(self, t):
        base = sinusoidal_time_embedding(t, self.base_dim).astype(self.dtype)
        scalar = base.ndim == 1
        out = self.proj_out(nc.silu(self.proj_in(Tensor(np.atleast_2d(base)))))
        if scalar:
            out = nc.reshape(out, (self.out_dim,))
        return TimeEmbedding(self.out_dim, out)


class AdaLayerNorm(Module):
    """Layer norm whose scale/shift are zero-initialized projections of a
    conditioning vector; equals plain LayerNorm at initialization."""

    def __init__(self, dim, cond_dim, rng, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.scale_proj = Linear(cond_dim, dim, rng, init="zero", name="adaln.scale", dtype=dtype)
        self.shift_proj = Linear(cond_dim, dim, rng, init="zero", name="adaln.shift", dtype=dtype)

    def __call__(self, x, cond):
        scale = self.scale_proj(cond)
        shift = self.shift_proj(cond)
        if scale.data.ndim == x.data.ndim - 1:
            shape = scale.data.shape[:-1] + (1, scale.data.shape[-1])
            scale = nc.reshape(scale, shape)
            shift = nc.reshape(shift, shape)
        h = nc.layer_norm(x, eps=self.eps)
        return nc.add(nc.mul(h, nc.add(scale, 1.0)), shift)


class FusionBlock(Module):
    """One refinement block; ``norm`` selects adaptive or plain layer norm."""

    def __init__(self, dim, cond_dim, rng, norm="adaln", ffn_mult=2, dtype=np.float32):
        self.norm_kind = norm
        if norm == "adaln":
            self.norm1 = AdaLayerNorm(dim, cond_dim, rng, dtype=dtype)
            self.norm2 = AdaLayerNorm(dim, cond_dim, rng, dtype=dtype)
        else:
            self.norm1 = LayerNorm(dim, dtype=dtype)
            self.norm2 = LayerNorm(dim, dtype=dtype)
        self.q_proj = Linear(dim, dim, rng, name="attn.q", dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, name="attn.k", dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, name="attn.v", dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, init="zero", name="attn.out", dtype=dtype)
        self.ffn_in = Linear(dim, dim * ffn_mult, rng, init="he", name="ffn.in", dtype=dtype)
        self.ffn_out = Linear(dim * ffn_mult, dim, rng, init="zero", name="ffn.out", dtype=dtype)

    def _normed(self, norm, x, cond):
        return norm(x, cond) if self.norm_kind == "adaln" else norm(x)

    def __call__(self, queries, text, cond, text_mask=None):
        if text.data.shape[-1] != queries.data.shape[-1]:
            raise ValueError("fusion block: query and text widths disagree")
        normed = self._normed(self.norm1, queries, cond)
        kv = nc.concat([normed, text], axis=-2) if text.data.shape[-2] else normed
        mask = None
        if text_mask is not None and text.data.shape[-2]:
            ones = np.ones(text_mask.shape[:-1] + (queries.data.shape[-2],), dtype=text_mask.dtype)
            mask = np.concatenate([ones, text_mask], axis=-1)[..., None, :]
        attn, weights = nc.scaled_dot_attention(
            self.q_proj(normed), self.k_proj(kv), self.v_proj(kv), mask=mask)
        updated = nc.add(queries, self.out_proj(attn))
        h = self._normed(self.norm2, updated, cond)
        return nc.add(updated, self.ffn_out(nc.silu(self.ffn_in(h)))), weights


class PooledTextBlock(Module):
    """Ablation block: feed-forward update from mean-pooled text features."""

    def __init__(self, dim, rng, ffn_mult=2, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.ffn_in = Linear(dim, dim * ffn_mult, rng, init="he", name="ffn.in", dtype=dtype)
        self.ffn_out = Linear(dim * ffn_mult, dim, rng, init="zero", name="ffn.out", dtype=dtype)

    def __call__(self, queries, text, text_mask=None):
        n_tok = text.data.shape[-2]
        if n_tok == 0:
            pooled = Tensor(np.zeros(text.data.shape[:-2] + (1, text.data.shape[-1]),
                                     dtype=text.data.dtype))
        elif text_mask is not None:
            m = np.asarray(text_mask, dtype=text.data.dtype)[..., :, None]
            denom = np.maximum(m.sum(axis=-2, keepdims=True), 1.0)
            pooled = nc.mul(nc.tsum(nc.mul(text, m), axis=-2, keepdims=True), 1.0 / denom)
        else:
            pooled = nc.tmean(text, axis=-2, keepdims=True)
        update = self.ffn_out(nc.silu(self.ffn_in(self.norm(pooled))))
        return nc.add(queries, update)


@dataclass
class FusionResult:
    """Instruction prior plus per-block attention weights for inspection."""

    prior: Tensor                       # [..., n_query, dim]
    attention: list = field(default_factory=list)


class InstructionFusion(Module):
    """The full stack: learnable queries threaded through n blocks."""

    def __init__(self, dim=128, n_query=8, n_blocks=4, mode="adaln", rng=None,
                 time_base_dim=128, ffn_mult=2, dtype=np.float32):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode: {mode}")
        self.mode = mode
        self.dim = dim
        self.n_query = n_query
        self.queries = Parameter(rng.normal(0.0, 0.5, size=(n_query, dim)).astype(dtype), "queries")
        if mode == "adaln":
            self.time_embedder = TimeEmbedder(time_base_dim, dim, rng, zero_out=True, dtype=dtype)
            self.blocks = [FusionBlock(dim, dim, rng, norm="adaln", ffn_mult=ffn_mult, dtype=dtype)
                           for _ in range(n_blocks)]
        elif mode == "ln":
            self.time_embedder = None
            self.blocks = [FusionBlock(dim, dim, rng, norm="ln", ffn_mult=ffn_mult, dtype=dtype)
                           for _ in range(n_blocks)]
        elif mode == "mlp":
            self.time_embedder = None
            self.blocks = [PooledTextBlock(dim, rng, ffn_mult=ffn_mult, dtype=dtype)
                           for _ in range(n_blocks)]
        else:
            self.time_embedder = None
            self.blocks = []

    def __call__(self, text, t=0, text_mask=None):
        """Fuse text embeddings into the instruction prior.

        ``text`` is [L, dim] or [N, L, dim]; ``t`` a timestep or per-sample
        vector; returns a FusionResult whose prior has n_query tokens.
        """
        if not isinstance(text, Tensor):
            text = Tensor(np.asarray(text))
        batched = text.data.ndim == 3
        q = nc.reshape(self.queries.tensor, (1, self.n_query, self.dim)) if batched \
            else self.queries.tensor

        if self.mode == "none":
            return FusionResult(prior=q)

        if self.mode == "mlp":
            result = FusionResult(prior=q)
            p = q
            for block in self.blocks:
                p = block(p, text, text_mask)
            result.prior = p
            return result

        if batched:
            q = nc.broadcast_to(q, (text.data.shape[0], self.n_query, self.dim))
        cond = None
        add_vec = None
        if self.mode == "adaln":
            temb = self.time_embedder(t)
            cond = temb.values
            add_vec = cond
            if batched and add_vec.data.ndim == 2:
                add_vec = nc.reshape(add_vec, (add_vec.data.shape[0], 1, self.dim))
        result = FusionResult(prior=q)
        p = q
        for block in self.blocks:
            if self.mode == "adaln":
                p = nc.add(p, add_vec)
            p, weights = block(p, text, cond, text_mask)
            result.attention.append(weights)
        result.prior = p
        return result
