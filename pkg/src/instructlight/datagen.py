"""Procedural paired low/normal-light data with ground-truth scene metadata.

Normal-light images are simple geometric scenes (rectangles, circles, a
gradient or uniform backdrop) under a directional light whose position and
intensity class are recorded in the scene descriptor.  Low-light
counterparts apply a gain/gamma/noise degradation

    y = clip(a * x0**gamma + n),  a in [0.05, 0.4], gamma in [1.5, 3.0]

whose parameters and noise seed are stored per sample, so the degradation
is exactly invertible for bookkeeping checks.  The random gain destroys
absolute-brightness cues in y: the intensity class of the target is only
knowable from the instruction, which is what makes instruction conditioning
measurable downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import load_image, save_image
from .instructions import SceneDescriptor, compose_layout, luma

INTENSITY_RANGE = {"bright": (1.0, 0.55), "moderate": (0.72, 0.40), "soft": (0.50, 0.28)}
_SHADOW_OF = {"left": "right", "right": "left", "top": "down", "center": "none"}

GAIN_RANGE = (0.05, 0.4)
GAMMA_RANGE = (1.5, 3.0)
SIGMA_RANGE = (0.01, 0.05)


@dataclass
class PairedSample:
    """One training pair plus everything needed to reproduce it."""

    x0: np.ndarray                 # normal-light CHW in [0,1]
    y: np.ndarray                  # low-light CHW in [0,1]
    scene: SceneDescriptor
    id: str
    degradation: dict = field(default_factory=dict)


class PairedDataset:
    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def arrays(self):
        x0 = np.stack([s.x0 for s in self.samples])
        y = np.stack([s.y for s in self.samples])
        return x0, y

    def scenes(self):
        return [s.scene for s in self.samples]


def _position_ramp(position, size):
    """Illumination multiplier field in [0,1] before intensity scaling."""
    lin = np.linspace(1.0, 0.0, size)
    if position == "left":
        field2d = np.tile(lin, (size, 1))
    elif position == "right":
        field2d = np.tile(lin[::-1], (size, 1))
    elif position == "top":
        field2d = np.tile(lin[:, None], (1, size))
    else:  # center: radial falloff
        yy, xx = np.mgrid[0:size, 0:size]
        r = np.hypot(yy - size / 2, xx - size / 2) / (size / np.sqrt(2))
        field2d = 1.0 - np.clip(r, 0.0, 1.0)
    return field2d.astype(np.float32)


def _draw_rect(img, rng):
    size = img.shape[1]
    h = int(rng.integers(size // 8, size // 3))
    w = int(rng.integers(size // 8, size // 3))
    top = int(rng.integers(0, size - h))
    left = int(rng.integers(0, size - w))
    color = rng.uniform(0.25, 0.9, size=3).astype(np.float32)
    img[:, top:top + h, left:left + w] = color[:, None, None]
    return top, left, h, w


def _draw_circle(img, rng):
    size = img.shape[1]
    radius = int(rng.integers(size // 10, size // 5))
    cy = int(rng.integers(radius, size - radius))
    cx = int(rng.integers(radius, size - radius))
    color = rng.uniform(0.25, 0.9, size=3).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    img[:, mask] = color[:, None]
    return cy, cx, radius


def _apply_shadow(img, box, direction, size):
    if direction == "none":
        return
    top, left, h, w = box
    off = max(2, size // 16)
    moves = {"left": (0, -off), "right": (0, off), "up": (-off, 0), "down": (off, 0)}
    dy, dx = moves[direction]
    t0 = np.clip(top + dy, 0, size)
    l0 = np.clip(left + dx, 0, size)
    img[:, t0:np.clip(t0 + h, 0, size), l0:np.clip(l0 + w, 0, size)] *= 0.55


def render_scene(scene, rng, size=64, n_rect=1, n_circ=1):
    """Render the normal-light image for a scene descriptor."""
    if " uniform " in scene.layout:
        background = np.full((3, size, size), 0.45, dtype=np.float32)
    else:
        sky = np.linspace(0.75, 0.35, size, dtype=np.float32)
        background = np.tile(sky[None, :, None], (3, 1, size))
        background[2] *= 1.15  # blue-tinted gradient sky
    img = background.copy()

    boxes = []
    for _ in range(n_rect):
        boxes.append(_draw_rect(img, rng))
    for _ in range(n_circ):
        cy, cx, r = _draw_circle(img, rng)
        boxes.append((cy - r, cx - r, 2 * r, 2 * r))

    for box in boxes:
        _apply_shadow(img, box, scene.shadow_direction, size)

    if scene.has_reflections:
        band = slice(int(size * 0.85), size)
        img[:, band, :] = 0.6 * img[:, band, :] + 0.4 * img[:, band, :].max()

    hi, lo = INTENSITY_RANGE[scene.intensity]
    ramp = lo + (hi - lo) * _position_ramp(scene.light_position, size)
    if scene.light_source == "none":
        ramp = lo + 0.5 * (ramp - lo)  # flatter field, no dominant source
    img *= ramp[None, :, :]
    return np.clip(img, 0.0, 1.0)


def apply_degradation(x0, info):
    """y = clip(a * x0**gamma + noise(sigma, seed))."""
    noise = 0.0
    if info["sigma"] > 0.0:
        noise = np.random.default_rng(info["noise_seed"]).normal(
            0.0, info["sigma"], size=x0.shape)
    return np.clip(info["a"] * np.power(x0, info["gamma"]) + noise, 0.0, 1.0) \
        .astype(np.float32)


def degrade(x0, rng):
    """Sample and apply the low-light degradation; returns (y, bookkeeping)."""
    info = {
        "a": float(rng.uniform(*GAIN_RANGE)),
        "gamma": float(rng.uniform(*GAMMA_RANGE)),
        "sigma": float(rng.uniform(*SIGMA_RANGE)),
        "noise_seed": int(rng.integers(0, 2 ** 31 - 1)),
    }
    return apply_degradation(x0, info), info


def invert_degradation(y, info):
    """Oracle inverse using the stored parameters and regenerated noise."""
    noise = np.random.default_rng(info["noise_seed"]).normal(
        0.0, info["sigma"], size=y.shape)
    base = np.clip((y - noise) / info["a"], 0.0, 1.0)
    return np.power(base, 1.0 / info["gamma"]).astype(np.float32)


def inverse_recovery_psnr(sample):
    """PSNR of the oracle inverse against the target, restricted to pixels
    the [0,1] clamp did not saturate (identifiable from y alone).  Saturated
    pixels are unrecoverable by construction; the unsaturated ones recover
    exactly when the stored bookkeeping is correct."""
    rec = invert_degradation(sample.y, sample.degradation)
    mask = (sample.y > 0.0) & (sample.y < 1.0)
    if not mask.any():
        return 0.0
    mse = float(np.mean((rec[mask] - sample.x0[mask]) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def generate_scene(rng, size=64, index=0):
    """Generate one paired sample with ground-truth metadata."""
    position = str(rng.choice(["left", "right", "top", "center"]))
    intensity = str(rng.choice(["bright", "moderate", "soft"]))
    source = str(rng.choice(["window", "lamp", "sky"]))
    has_reflections = bool(rng.random() < 0.3)
    n_rect = int(rng.integers(1, 4))
    n_circ = int(rng.integers(0, 3))
    background = "gradient" if rng.random() < 0.7 else "uniform"
    scene = SceneDescriptor(
        light_source=source,
        intensity=intensity,
        light_position=position,
        shadow_direction=_SHADOW_OF[position],
        has_reflections=has_reflections,
        layout=compose_layout(n_rect, n_circ, background),
    )
    x0 = render_scene(scene, rng, size=size, n_rect=n_rect, n_circ=n_circ)
    y, info = degrade(x0, rng)
    return PairedSample(x0=x0, y=y, scene=scene, id=f"sample_{index:05d}", degradation=info)


def generate_dataset(n, seed=0, size=64):
    rng = np.random.default_rng(seed)
    return PairedDataset([generate_scene(rng, size=size, index=i) for i in range(n)])


# ---------------------------------------------------------------------------
# on-disk layout: PNG pairs + one JSON sidecar per sample
# ---------------------------------------------------------------------------

def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    (out / "low").mkdir(parents=True, exist_ok=True)
    (out / "high").mkdir(parents=True, exist_ok=True)
    (out / "meta").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        save_image(s.y, out / "low" / f"{s.id}.png")
        save_image(s.x0, out / "high" / f"{s.id}.png")
        meta = {"scene": s.scene.to_dict(), "degradation": s.degradation, "id": s.id}
        (out / "meta" / f"{s.id}.json").write_text(json.dumps(meta, indent=1))
    return out


def load_dataset(in_dir):
    root = Path(in_dir)
    samples = []
    for meta_path in sorted((root / "meta").glob("*.json")):
        meta = json.loads(meta_path.read_text())
        sid = meta["id"]
        samples.append(PairedSample(
            x0=load_image(root / "high" / f"{sid}.png"),
            y=load_image(root / "low" / f"{sid}.png"),
            scene=SceneDescriptor.from_dict(meta["scene"]),
            id=sid,
            degradation=meta.get("degradation", {}),
        ))
    if not samples:
        raise FileNotFoundError(f"no samples under {in_dir}")
    return PairedDataset(samples)


def _center_crop(img, size):
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top:top + size, left:left + size]


def load_paired_dir(path_low, path_high, size=None):
    """Pair real images from two folders by filename stem.

    Scene metadata is absent: instructions must come from a manual,
    external or heuristic provider.  Mixed sizes are center-cropped to
    ``size`` when given.
    """
    low_dir, high_dir = Path(path_low), Path(path_high)
    if not low_dir.is_dir() or not high_dir.is_dir():
        raise FileNotFoundError("paired directories must both exist")
    low = {p.stem: p for p in sorted(low_dir.glob("*.png"))}
    high = {p.stem: p for p in sorted(high_dir.glob("*.png"))}
    common = sorted(set(low) & set(high))
    if not common:
        raise ValueError("no filename stems shared between the two folders")
    samples = []
    for stem in common:
        y = load_image(low[stem])
        x0 = load_image(high[stem])
        if size is not None:
            y = _center_crop(y, size)
            x0 = _center_crop(x0, size)
        samples.append(PairedSample(x0=x0, y=y, scene=None, id=stem))
    return PairedDataset(samples)


def mean_luma(image):
    return float(luma(image).mean())
