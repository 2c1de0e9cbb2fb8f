"""Fidelity metrics and the multi-seed evaluation protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; +inf when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(sigma=1.5, truncate=3.5):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, kernel):
    """Separable 'valid' convolution with a symmetric 1-D kernel."""
    r = (len(kernel) - 1) // 2
    h, w = img.shape
    tmp = np.zeros((h, w - 2 * r))
    for i, kv in enumerate(kernel):
        tmp += kv * img[:, i:w - 2 * r + i]
    out = np.zeros((h - 2 * r, w - 2 * r))
    for i, kv in enumerate(kernel):
        out += kv * tmp[i:h - 2 * r + i, :]
    return out


def ssim(a, b, peak=1.0):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    C1 = (0.01*peak)^2, C2 = (0.03*peak)^2; population statistics; the mean
    is taken over valid windows and over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError("ssim expects CHW or HW images")
    kernel = _gaussian_kernel()
    win = len(kernel)
    if min(a.shape[-2:]) < win:
        raise ValueError(f"image smaller than the {win}x{win} ssim window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    values = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        ux = _filter_valid(x, kernel)
        uy = _filter_valid(y, kernel)
        uxx = _filter_valid(x * x, kernel)
        uyy = _filter_valid(y * y, kernel)
        uxy = _filter_valid(x * y, kernel)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        values.append(s.mean())
    return float(np.mean(values))


@dataclass
class EvalReport:
    """Per-image metrics, per-seed means and the cross-seed aggregate."""

    seeds: list
    per_image: dict = field(default_factory=dict)   # seed -> list of {id, psnr, ssim}
    per_seed_mean: dict = field(default_factory=dict)
    cross_seed_mean: dict = field(default_factory=dict)
    cross_seed_std: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)    # input-vs-target reference metrics
    provenance: dict = field(default_factory=dict)

    def finalize(self):
        for metric in ("psnr", "ssim"):
            means = [self.per_seed_mean[s][metric] for s in self.seeds]
            self.cross_seed_mean[metric] = float(np.mean(means))
            self.cross_seed_std[metric] = float(np.std(means))
        return self

    def to_dict(self):
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return {"value": None, "infinite": True}
            return v

        return {
            "seeds": list(self.seeds),
            "per_image": {str(s): [{k: enc(v) for k, v in row.items()} for row in rows]
                          for s, rows in self.per_image.items()},
            "per_seed_mean": {str(s): m for s, m in self.per_seed_mean.items()},
            "cross_seed_mean": self.cross_seed_mean,
            "cross_seed_std": self.cross_seed_std,
            "baseline": self.baseline,
            "provenance": self.provenance,
        }

    def to_json(self, indent=1):
        return json.dumps(self.to_dict(), indent=indent)


def finite_psnr_mean(values):
    """Mean over finite PSNR entries (identical pairs are excluded)."""
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def eval_run(bundle, dataset, seeds=(0, 1, 2, 3, 4), sample_steps=None, batch_size=16):
    """Enhance every pair once per seed and aggregate PSNR/SSIM.

    The instruction for each pair comes from the bundle's configured
    provider (ground-truth scene templates when available).
    """
    from . import pipeline  # late import: pipeline depends on this module

    report = EvalReport(seeds=list(seeds))
    x0, y = dataset.arrays()
    for seed in seeds:
        outputs = pipeline.enhance_dataset(bundle, dataset, seed=seed,
                                           sample_steps=sample_steps, batch_size=batch_size)
        rows = []
        for i, sample in enumerate(dataset.samples):
            rows.append({"id": sample.id,
                         "psnr": psnr(outputs[i], x0[i]),
                         "ssim": ssim(outputs[i], x0[i])})
        report.per_image[seed] = rows
        report.per_seed_mean[seed] = {
            "psnr": finite_psnr_mean([r["psnr"] for r in rows]),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
        }
    report.baseline = {
        "psnr": finite_psnr_mean([psnr(y[i], x0[i]) for i in range(len(dataset))]),
        "ssim": float(np.mean([ssim(y[i], x0[i]) for i in range(len(dataset))])),
    }
    report.provenance = {"n_images": len(dataset),
                         "sample_steps": sample_steps,
                         "config_hash": bundle.config.hash(),
                         "checkpoint": bundle.checkpoint_hash or bundle.param_fingerprint()}
    return report.finalize()
