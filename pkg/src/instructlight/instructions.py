"""Lighting instructions: template synthesis, tokenization and text encoding.

Instructions are composed of up to three facets, always in the same order:
lighting (source, position, intensity), shadows and reflections, and the
spatial scene summary.  The template provider renders them deterministically
from ground-truth scene metadata; at inference time the same templates can
be driven by an external vision-language endpoint or by a small
image-statistics heuristic.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import requests

from . import numcore as nc
from .layers import Embedding, LayerNorm, Linear, Module
from .numcore import Tensor

FACET_ORDER = ("lighting", "shadows", "spatial")

LIGHT_SOURCES = ("window", "lamp", "sky", "none")
INTENSITIES = ("bright", "moderate", "soft")
POSITIONS = ("left", "right", "top", "center")
SHADOW_DIRECTIONS = ("left", "right", "up", "down", "none")

_SOURCE_PHRASE = {
    "window": "natural daylight through a window",
    "lamp": "an artificial lamp",
    "sky": "a natural open sky",
    "none": "no distinct light source",
}
_POSITION_PHRASE = {
    "left": "the left side",
    "right": "the right side",
    "top": "the top",
    "center": "the center",
}
_SHADOW_PHRASE = {
    "left": "to the left",
    "right": "to the right",
    "up": "upward",
    "down": "downward",
    "none": "in no particular direction",
}

COUNT_WORDS = ("no", "one", "two", "three", "four")
BACKGROUNDS = ("gradient", "uniform")


@dataclass(frozen=True)
class SceneDescriptor:
    """Ground-truth illumination metadata attached to a generated sample."""

    light_source: str = "window"
    intensity: str = "moderate"
    light_position: str = "left"
    shadow_direction: str = "right"
    has_reflections: bool = False
    layout: str = "one rectangle and one circle on a gradient background"

    def __post_init__(self):
        if self.light_source not in LIGHT_SOURCES:
            raise ValueError(f"unknown light_source: {self.light_source}")
        if self.intensity not in INTENSITIES:
            raise ValueError(f"unknown intensity: {self.intensity}")
        if self.light_position not in POSITIONS:
            raise ValueError(f"unknown light_position: {self.light_position}")
        if self.shadow_direction not in SHADOW_DIRECTIONS:
            raise ValueError(f"unknown shadow_direction: {self.shadow_direction}")

    def to_dict(self):
        return {
            "light_source": self.light_source,
            "intensity": self.intensity,
            "light_position": self.light_position,
            "shadow_direction": self.shadow_direction,
            "has_reflections": self.has_reflections,
            "layout": self.layout,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Instruction:
    """A textual enhancement instruction with per-facet provenance."""

    text: str
    facets: dict = field(default_factory=dict)
    source: str = "template"  # template | external_vlm | manual

    @classmethod
    def manual(cls, text):
        return cls(text=text, facets={}, source="manual")


def compose_layout(n_rect, n_circ, background):
    """Scene-summary phrase used by the data generator and the templates."""
    if background not in BACKGROUNDS:
        raise ValueError(f"unknown background: {background}")
    rect = "rectangle" if n_rect == 1 else "rectangles"
    circ = "circle" if n_circ == 1 else "circles"
    return (f"{COUNT_WORDS[n_rect]} {rect} and {COUNT_WORDS[n_circ]} {circ} "
            f"on a {background} background")


def _lighting_facet(scene):
    return (f"The scene is lit by {_SOURCE_PHRASE[scene.light_source]} "
            f"from {_POSITION_PHRASE[scene.light_position]} "
            f"with {scene.intensity} intensity.")


def _shadows_facet(scene):
    tail = ("with visible reflections on smooth surfaces."
            if scene.has_reflections else "and no visible reflections.")
    return f"Shadows fall {_SHADOW_PHRASE[scene.shadow_direction]} {tail}"


def _spatial_facet(scene):
    return f"The scene shows {scene.layout}."

_FACET_RENDERERS = {
    "lighting": _lighting_facet,
    "shadows": _shadows_facet,
    "spatial": _spatial_facet,
}


def synthesize_instruction(scene, facets=FACET_ORDER):
    """Render the instruction for a scene, keeping only the masked-in facets.

    An empty facet selection yields the empty-instruction sentinel.
    """
    chosen = [f for f in FACET_ORDER if f in facets]
    parts = {}
    for f in chosen:
        parts[f] = _FACET_RENDERERS[f](scene)
    text = " ".join(parts[f] for f in chosen)
    facet_map = {f: parts.get(f) for f in FACET_ORDER}
    return Instruction(text=text, facets=facet_map, source="template")


def template_corpus():
    """Instruction texts covering every template phrase (for the vocabulary)."""
    texts = []
    base_layout = compose_layout(1, 1, "gradient")
    for src in LIGHT_SOURCES:
        for inten in INTENSITIES:
            for pos in POSITIONS:
                for shadow in SHADOW_DIRECTIONS:
                    for refl in (False, True):
                        scene = SceneDescriptor(src, inten, pos, shadow, refl, base_layout)
                        texts.append(synthesize_instruction(scene).text)
    ref = SceneDescriptor(layout=base_layout)
    for n_rect in range(5):
        for n_circ in range(5):
            for bg in BACKGROUNDS:
                scene = SceneDescriptor(layout=compose_layout(n_rect, n_circ, bg))
                texts.append(synthesize_instruction(scene, facets=("spatial",)).text)
    return texts


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_PUNCT = ".,;:!?"


def normalize_text(text):
    """Lowercase, split off punctuation, collapse whitespace."""
    out = []
    for raw in text.lower().split():
        word = ""
        for ch in raw:
            if ch in _PUNCT:
                if word:
                    out.append(word)
                    word = ""
                out.append(ch)
            else:
                word += ch
        if word:
            out.append(word)
    return " ".join(out)


class Tokenizer:
    """Word-level tokenizer over the template lexicon with byte fallback.

    ids: 0=PAD, 1=BOS, 2=EOS, 3..258 byte tokens, then lexicon words.
    """

    PAD, BOS, EOS = 0, 1, 2
    N_SPECIAL = 3
    MAX_LEN = 77

    def __init__(self, extra_texts=()):
        words = set()
        for text in list(template_corpus()) + list(extra_texts):
            words.update(normalize_text(text).split())
        self.words = sorted(words)
        self._word_to_id = {w: self.N_SPECIAL + 256 + i for i, w in enumerate(self.words)}
        self._id_to_word = {i: w for w, i in self._word_to_id.items()}

    @property
    def vocab_size(self):
        return self.N_SPECIAL + 256 + len(self.words)

    def tokenize(self, text):
        body = []
        for word in normalize_text(text).split():
            wid = self._word_to_id.get(word)
            if wid is not None:
                body.append(wid)
            else:
                # byte fallback; trailing space byte marks the word boundary
                body.extend(self.N_SPECIAL + b for b in word.encode("utf-8") + b" ")
        body = body[: self.MAX_LEN - 2]
        return [self.BOS] + body + [self.EOS]

    def detokenize(self, ids):
        out = []
        pending = bytearray()

        def flush():
            if pending:
                out.extend(pending.decode("utf-8", errors="replace").split())
                pending.clear()

        for i in ids:
            if i < self.N_SPECIAL:
                flush()
                continue
            if i < self.N_SPECIAL + 256:
                pending.append(i - self.N_SPECIAL)
            else:
                flush()
                out.append(self._id_to_word[i])
        flush()
        return " ".join(out)


def encode_token_batch(token_lists, pad_id=Tokenizer.PAD):
    """Pad variable-length id lists to [N, L] plus a 0/1 attention mask."""
    n = len(token_lists)
    length = max(len(t) for t in token_lists)
    ids = np.full((n, length), pad_id, dtype=np.int64)
    mask = np.zeros((n, length), dtype=np.float32)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
        mask[i, : len(toks)] = 1.0
    return ids, mask


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

class _SelfAttentionBlock(Module):
    def __init__(self, dim, rng, ffn_mult=4, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.q_proj = Linear(dim, dim, rng, name="q", dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, name="k", dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, name="v", dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, name="out", dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn_in = Linear(dim, dim * ffn_mult, rng, init="he", name="ffn.in", dtype=dtype)
        self.ffn_out = Linear(dim * ffn_mult, dim, rng, name="ffn.out", dtype=dtype)

    def __call__(self, x, mask=None):
        h = self.norm1(x)
        att_mask = None if mask is None else np.asarray(mask)[..., None, :]
        attn, _ = nc.scaled_dot_attention(self.q_proj(h), self.k_proj(h), self.v_proj(h),
                                          mask=att_mask)
        x = nc.add(x, self.out_proj(attn))
        h = self.norm2(x)
        return nc.add(x, self.ffn_out(nc.silu(self.ffn_in(h))))


class TextEncoder(Module):
    """Trainable embedding table plus a small bidirectional transformer."""

    def __init__(self, vocab_size, dim=128, n_blocks=2, max_len=Tokenizer.MAX_LEN,
                 rng=None, dtype=np.float32):
        self.dim = dim
        self.max_len = max_len
        self.token_embed = Embedding(vocab_size, dim, rng, name="tok", dtype=dtype)
        self.pos_embed = Embedding(max_len, dim, rng, name="pos", dtype=dtype)
        self.blocks = [_SelfAttentionBlock(dim, rng, dtype=dtype) for _ in range(n_blocks)]
        self.final_norm = LayerNorm(dim, dtype=dtype)

    def __call__(self, ids, mask=None):
        """Encode [L] or [N, L] token ids; returns embeddings with width dim."""
        idx = np.asarray(ids)
        if idx.shape[-1] > self.max_len:
            raise ValueError(f"token sequence longer than max_len={self.max_len}")
        pos = np.arange(idx.shape[-1])
        x = nc.add(self.token_embed(idx), self.pos_embed(np.broadcast_to(pos, idx.shape)))
        for blk in self.blocks:
            x = blk(x, mask)
        return self.final_norm(x)


# ---------------------------------------------------------------------------
# external vision-language endpoint
# ---------------------------------------------------------------------------

DEFAULT_VLM_PROMPT = (
    "Provide a detailed description of the lighting conditions (including "
    "light source, position, intensity), shadows and reflections "
    "distribution, and scene information in this image"
)


class VlmError(RuntimeError):
    """Base class for recoverable describer-endpoint failures."""


class VlmConnectionError(VlmError):
    pass


class VlmTimeoutError(VlmError):
    pass


class VlmProtocolError(VlmError):
    pass


@dataclass(frozen=True)
class VlmEndpoint:
    url: str
    auth_header: Optional[str] = None
    timeout: float = 30.0


def image_to_png_b64(image):
    """CHW float image in [0,1] -> base64-encoded 8-bit RGB PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def describe_external(image, endpoint, prompt=DEFAULT_VLM_PROMPT):
    """Ask a chat-completion style HTTP endpoint to describe the lighting.

    Raises VlmConnectionError / VlmTimeoutError / VlmProtocolError; all are
    recoverable and callers may fall back to another provider.
    """
    headers = {"Content-Type": "application/json"}
    if endpoint.auth_header:
        headers["Authorization"] = endpoint.auth_header
    body = {"prompt": prompt, "image_b64": image_to_png_b64(image)}
    try:
        resp = requests.post(endpoint.url, data=json.dumps(body), headers=headers,
                             timeout=endpoint.timeout)
    except requests.Timeout as exc:
        raise VlmTimeoutError(f"describer endpoint timed out after {endpoint.timeout}s") from exc
    except requests.ConnectionError as exc:
        raise VlmConnectionError(f"describer endpoint unreachable: {endpoint.url}") from exc
    if resp.status_code != 200:
        raise VlmProtocolError(f"describer endpoint returned HTTP {resp.status_code}")
    try:
        text = resp.json()["text"]
    except (ValueError, KeyError) as exc:
        raise VlmProtocolError("describer reply is not JSON with a 'text' field") from exc
    if not isinstance(text, str):
        raise VlmProtocolError("describer reply 'text' is not a string")
    return Instruction(text=text, facets={}, source="external_vlm")


# ---------------------------------------------------------------------------
# heuristic image-statistics describer
# ---------------------------------------------------------------------------

def luma(image):
    """Rec.601 luma of a CHW image."""
    arr = np.asarray(image)
    return 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]


def describe_heuristic(image):
    """Instruction inferred from image statistics alone.

    Mean luma picks the intensity word; the luma gradient picks the light
    position.  This is an engineering surrogate for an external describer,
    usable when no endpoint is configured.
    """
    y = luma(image)
    mean = float(y.mean())
    if mean > 0.45:
        intensity = "bright"
    elif mean > 0.28:
        intensity = "moderate"
    else:
        intensity = "soft"

    h, w = y.shape
    col_ramp = np.linspace(-1.0, 1.0, w)
    row_ramp = np.linspace(-1.0, 1.0, h)
    gx = float((y.mean(axis=0) * col_ramp).mean())
    gy = float((y.mean(axis=1) * row_ramp).mean())
    thresh = 0.01
    if abs(gx) < thresh and abs(gy) < thresh:
        position = "center"
    elif abs(gx) >= abs(gy):
        position = "left" if gx < 0 else "right"
    else:
        position = "top" if gy < 0 else "center"

    shadow = {"left": "right", "right": "left", "top": "down", "center": "none"}[position]
    source = "sky" if (intensity == "bright" and position == "top") else (
        "window" if intensity == "bright" else "lamp")
    scene = SceneDescriptor(light_source=source, intensity=intensity,
                            light_position=position, shadow_direction=shadow,
                            has_reflections=False, layout=compose_layout(1, 1, "gradient"))
    return synthesize_instruction(scene, facets=("lighting", "shadows"))
