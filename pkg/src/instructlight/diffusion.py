"""Noise schedules, forward noising and the spaced ancestral sampler.

Everything here is pure numpy over immutable schedule tables; timesteps are
1-based (t in 1..T, with t=0 denoting the clean endpoint of a reverse step).
Per-sample timestep vectors are accepted wherever a scalar t is, so batched
training does not need a Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables: betas, alphas and their running product."""

    T: int
    betas: np.ndarray       # beta_1..beta_T, float64
    alphas: np.ndarray      # 1 - beta_t
    alpha_bars: np.ndarray  # cumulative product of alphas

    def alpha_bar(self, t):
        """alpha_bar at timestep t (scalar or array); alpha_bar(0) == 1."""
        tt = np.asarray(t)
        if np.any(tt < 0) or np.any(tt > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[tt]
        return float(out) if np.ndim(t) == 0 else out

    def to_dict(self):
        return {"kind": "linear", "T": self.T,
                "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


@dataclass(frozen=True)
class TimestepSpacing:
    """Strictly decreasing subset of {1..T} used by the reverse loop."""

    steps: tuple

    def pairs(self):
        """(t, t_prev) transitions ending at t_prev=0."""
        seq = list(self.steps) + [0]
        return list(zip(seq[:-1], seq[1:]))


def make_schedule(kind="linear", T=1000, beta_start=1e-4, beta_end=0.02):
    """Build a linear variance schedule."""
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind: {kind}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coeff(value, t, like):
    """Broadcast a per-timestep coefficient over sample dims of `like`."""
    c = np.asarray(value, dtype=like.dtype)
    if c.ndim == 0:
        return c
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def q_sample(z0, t, eps, sched):
    """Diffuse a clean latent to timestep t with the given noise draw."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError("q_sample: z0 and eps shapes disagree")
    tt = np.asarray(t)
    if np.any(tt < 1) or np.any(tt > sched.T):
        raise ValueError(f"q_sample: t out of range 1..{sched.T}")
    ab = sched.alpha_bar(t)
    return _coeff(np.sqrt(ab), t, z0) * z0 + _coeff(np.sqrt(1.0 - ab), t, z0) * eps


def predict_x0_from_eps(z_t, t, eps_hat, sched):
    """Invert the forward map: recover the clean latent implied by eps_hat."""
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ValueError("predict_x0_from_eps: shapes disagree")
    tt = np.asarray(t)
    if np.any(tt < 1) or np.any(tt > sched.T):
        raise ValueError(f"predict_x0_from_eps: t out of range 1..{sched.T}")
    ab = sched.alpha_bar(t)
    return (z_t - _coeff(np.sqrt(1.0 - ab), t, z_t) * eps_hat) / _coeff(np.sqrt(ab), t, z_t)


def ddpm_step(z_t, t, t_prev, eps_hat, sched, noise, clamp_range=None):
    """One spaced ancestral step t -> t_prev.

    The posterior mean is computed from the clamped clean-latent estimate;
    posterior noise is added except at the terminal step (t_prev == 0).
    ``noise`` is supplied by the caller so sampling stays deterministic.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"ddpm_step: need t > t_prev >= 0, got {t} -> {t_prev}")
    z_t = np.asarray(z_t)
    z0_hat = predict_x0_from_eps(z_t, t, eps_hat, sched)
    if clamp_range is not None:
        z0_hat = np.clip(z0_hat, clamp_range[0], clamp_range[1])
    if t_prev == 0:
        return z0_hat.astype(z_t.dtype)
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    alpha_sp = ab_t / ab_p
    beta_sp = 1.0 - alpha_sp
    coef0 = np.sqrt(ab_p) * beta_sp / (1.0 - ab_t)
    coefT = np.sqrt(alpha_sp) * (1.0 - ab_p) / (1.0 - ab_t)
    mean = (coef0 * z0_hat + coefT * z_t).astype(z_t.dtype)
    var = beta_sp * (1.0 - ab_p) / (1.0 - ab_t)
    return mean + np.asarray(np.sqrt(var), dtype=z_t.dtype) * np.asarray(noise, dtype=z_t.dtype)


def spaced_steps(T, S):
    """Evenly spread S reverse timesteps starting at T and ending at 1."""
    if not 1 <= S <= T:
        raise ValueError(f"spaced_steps: need 1 <= S <= T, got S={S}, T={T}")
    if S == 1:
        return TimestepSpacing(steps=(T,))
    stride = (T - 1) / (S - 1)
    steps = tuple(int(T - round(i * stride)) for i in range(S))
    if len(set(steps)) != S:
        raise ValueError("spaced_steps: spacing collapsed duplicate timesteps")
    return TimestepSpacing(steps=steps)
