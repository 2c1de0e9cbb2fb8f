"""Training and enhancement pipelines.

Owns the model bundle (every component plus the schedule and the frozen /
trainable partition), the decoupled-weight-decay Adam optimizer, the
training loop with periodic validation and resumable checkpoints, and the
iterative enhancement loop that re-derives its instruction from the
previous pass's output.

Checkpoint format: a single-line UTF-8 JSON manifest (config, tensor
directory with byte offsets, latent-range stats, RNG state, payload hash)
followed by raw little-endian IEEE-754 tensor payloads.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion as df
from . import numcore as nc
from .codec import ImageEncoder, build_codec, clip01
from .config import Config
from .denoiser import ControlBranch, UNet, UNetSpec, eps_theta
from .fusion import InstructionFusion
from .instructions import (
    Instruction,
    TextEncoder,
    Tokenizer,
    VlmEndpoint,
    VlmError,
    describe_external,
    describe_heuristic,
    encode_token_batch,
    synthesize_instruction,
)
from .numcore import NonFiniteError, Tensor

logger = logging.getLogger("instructlight")

CHECKPOINT_FORMAT = "instructlight-checkpoint"


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

class ModelBundle:
    """All model components plus bookkeeping shared by train and sample."""

    def __init__(self, config, codec, image_encoder, unet, control, fusion,
                 text_encoder, tokenizer, schedule):
        self.config = config
        self.codec = codec
        self.image_encoder = image_encoder
        self.unet = unet
        self.control = control
        self.fusion = fusion
        self.text_encoder = text_encoder
        self.tokenizer = tokenizer
        self.schedule = schedule
        identity = config.codec.mode == "identity"
        self.latent_range = (0.0, 1.0) if identity else (-1.0, 1.0)
        self.codec_pretrained = identity  # identity codec needs no pretraining
        self.checkpoint_hash = None

    def _components(self):
        return [("codec", self.codec), ("cond_enc", self.image_encoder),
                ("unet", self.unet), ("control", self.control),
                ("fusion", self.fusion), ("text", self.text_encoder)]

    def named_parameters(self):
        for prefix, mod in self._components():
            yield from mod.named_parameters(prefix)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def trainable_names(self):
        return [n for n, p in self.named_parameters() if p.trainable]

    def frozen_names(self):
        return [n for n, p in self.named_parameters() if not p.trainable]

    def apply_freeze_policy(self):
        """Codec frozen once pretrained; under freeze_backbone only the
        fusion stack, control branch and conditioning encoder train."""
        self.codec.set_trainable(self.config.codec.mode == "learned"
                                 and not self.codec_pretrained)
        backbone_trainable = not self.config.train.freeze_backbone
        self.unet.set_trainable(backbone_trainable)
        self.text_encoder.set_trainable(backbone_trainable)
        self.fusion.set_trainable(True)
        self.control.set_trainable(True)
        self.image_encoder.set_trainable(True)

    def latent_shape(self, height, width=None):
        width = height if width is None else width
        f = self.codec.factor
        if height % f or width % f:
            raise ValueError(f"image dims {height}x{width} not divisible by codec factor {f}")
        return (self.codec.latent_channels, height // f, width // f)

    def param_fingerprint(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def build_bundle(config):
    """Construct a bundle from a config with one deterministic init stream."""
    rng = np.random.default_rng(config.train.seed)
    codec = build_codec(config.codec.mode, factor=config.codec.f,
                        latent_channels=config.codec.c, rng=rng)
    latent_channels = codec.latent_channels
    image_encoder = ImageEncoder(factor=codec.factor, latent_channels=latent_channels,
                                 base=config.codec.base, rng=rng)
    spec = UNetSpec(latent_channels=latent_channels,
                    base_channels=config.unet.base_channels,
                    channel_mults=config.unet.channel_mults,
                    attention_levels=config.unet.attention_levels,
                    cond_dim=config.fusion.d,
                    temb_dim=config.unet.temb_dim)
    unet = UNet(spec, rng)
    control = ControlBranch(spec, rng)
    fusion = InstructionFusion(dim=config.fusion.d, n_query=config.fusion.n_query,
                               n_blocks=config.fusion.n_blocks, mode=config.fusion.mode,
                               rng=rng)
    tokenizer = Tokenizer()
    text_encoder = TextEncoder(tokenizer.vocab_size, dim=config.fusion.d,
                               n_blocks=config.instruct.text_blocks, rng=rng)
    schedule = df.make_schedule(config.schedule.kind, config.schedule.T,
                                config.schedule.beta_start, config.schedule.beta_end)
    div = config.codec.f if config.codec.mode == "learned" else 1
    div *= 2 ** (len(config.unet.channel_mults) - 1)
    if config.train.image_size % div:
        raise ValueError(f"train.image_size must be divisible by {div}")
    bundle = ModelBundle(config, codec, image_encoder, unet, control, fusion,
                         text_encoder, tokenizer, schedule)
    bundle.apply_freeze_policy()
    return bundle


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over named parameters."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in named_params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            update = m / (c1 * denom)
            if self.weight_decay:
                update += self.weight_decay * p.data
            update *= self.lr
            np.subtract(p.data, update, out=p.tensor.data)

    def state_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"optim.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays, t):
        self.t = t
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v."):]] = arr.copy()


# ---------------------------------------------------------------------------
# instructions for a batch
# ---------------------------------------------------------------------------

def training_instruction(bundle, sample):
    """Instruction used for a training pair: ground-truth scene template
    when metadata exists, otherwise the heuristic read off the target."""
    facets = bundle.config.instruct.facet_mask
    if sample.scene is not None:
        return synthesize_instruction(sample.scene, facets=facets)
    return describe_heuristic(sample.x0)


def _prior_inputs(bundle, instructions):
    toks = [bundle.tokenizer.tokenize(i.text) for i in instructions]
    return encode_token_batch(toks)


# ---------------------------------------------------------------------------
# codec pretraining
# ---------------------------------------------------------------------------

def pretrain_codec(bundle, dataset, log_fn=None):
    """Train the learned autoencoder with L2 reconstruction, then freeze it
    and record the latent range used by the sampler clamp."""
    cfg = bundle.config.codec
    if bundle.config.codec.mode != "learned" or bundle.codec_pretrained:
        return
    rng = np.random.default_rng(bundle.config.train.seed ^ 0x5EED)
    opt = AdamW(lr=cfg.pretrain_lr, weight_decay=0.0)
    named = list(bundle.codec.named_parameters("codec"))
    x0, _ = dataset.arrays()
    n = len(dataset)
    batch = min(bundle.config.train.batch, n)
    for step in range(1, cfg.pretrain_steps + 1):
        idx = rng.integers(0, n, size=batch)
        x = Tensor(x0[idx])
        rec = bundle.codec.decode(bundle.codec.encode(x))
        diff = nc.add(rec, nc.mul(x, -1.0))
        loss = nc.tmean(nc.mul(diff, diff))
        nc.backward(loss)
        opt.step(named)
        nc.zero_grads(p for _, p in named)
        if log_fn and (step % 100 == 0 or step == 1):
            log_fn({"phase": "codec", "step": step, "loss": float(loss.item())})
    bundle.codec_pretrained = True
    bundle.apply_freeze_policy()

    lo, hi = np.inf, -np.inf
    with nc.no_grad():
        for start in range(0, n, 64):
            z = bundle.codec.encode(Tensor(x0[start:start + 64])).data
            lo = min(lo, float(z.min()))
            hi = max(hi, float(z.max()))
    bundle.latent_range = (lo, hi)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(batch, bundle, opt, rng):
    """One optimization step of the noise-prediction objective.

    Returns the per-element epsilon-MSE.  A non-finite loss aborts the step.
    """
    x0 = np.asarray(batch["x0"], dtype=np.float32)
    y = np.asarray(batch["y"], dtype=np.float32)
    instructions = batch["instructions"]
    n = x0.shape[0]
    sched = bundle.schedule

    z0 = bundle.codec.encode(Tensor(x0)).data
    cond_latent = bundle.image_encoder(Tensor(y))
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = df.q_sample(z0, t, eps, sched).astype(np.float32)

    ids, mask = _prior_inputs(bundle, instructions)
    text = bundle.text_encoder(ids, mask)
    prior = bundle.fusion(text, t=t, text_mask=mask).prior
    noise_pred = eps_theta(Tensor(z_t), t, cond_latent, prior,
                           bundle.unet, control=bundle.control)
    diff = nc.add(noise_pred, Tensor(-eps))
    loss = nc.tmean(nc.mul(diff, diff))
    loss_val = float(loss.item())
    if not np.isfinite(loss_val):
        raise NonFiniteError("training loss is not finite")
    nc.backward(loss)
    opt.step(bundle.named_parameters())
    nc.zero_grads(bundle.parameters())
    return loss_val


def validation_mse(bundle, val_samples, seed=0, batch=16):
    """Epsilon-MSE on held-out pairs with a fixed evaluation noise draw."""
    rng = np.random.default_rng([seed, 0xA1])
    sched = bundle.schedule
    total, count = 0.0, 0
    with nc.no_grad():
        for start in range(0, len(val_samples), batch):
            chunk = val_samples[start:start + batch]
            x0 = np.stack([s.x0 for s in chunk])
            y = np.stack([s.y for s in chunk])
            instructions = [training_instruction(bundle, s) for s in chunk]
            z0 = bundle.codec.encode(Tensor(x0)).data
            cond_latent = bundle.image_encoder(Tensor(y))
            t = rng.integers(1, sched.T + 1, size=len(chunk))
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            z_t = df.q_sample(z0, t, eps, sched).astype(np.float32)
            ids, mask = _prior_inputs(bundle, instructions)
            text = bundle.text_encoder(ids, mask)
            prior = bundle.fusion(text, t=t, text_mask=mask).prior
            pred = eps_theta(Tensor(z_t), t, cond_latent, prior,
                             bundle.unet, control=bundle.control)
            total += float(np.sum((pred.data - eps) ** 2))
            count += eps.size
    return total / count


@dataclass
class TrainState:
    step: int
    optimizer: AdamW
    rng: np.random.Generator


def split_dataset(dataset, config):
    """Deterministic train/validation split derived from the seed."""
    n = len(dataset)
    val_count = min(config.train.val_count, max(1, n // 4))
    order = np.random.default_rng(config.train.seed).permutation(n)
    val_idx = set(order[:val_count].tolist())
    train = [dataset[i] for i in range(n) if i not in val_idx]
    val = [dataset[i] for i in range(n) if i in val_idx]
    return train, val


def train_loop(dataset, config, out_dir, resume_from=None, log_fn=None):
    """Run (or resume) the full training schedule; returns the final
    checkpoint path.  Emits line-delimited JSON log records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    def emit(record):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        if log_fn:
            log_fn(record)

    if resume_from is not None:
        bundle, state = load_checkpoint(resume_from, with_train_state=True)
        if bundle.config.hash() != config.hash():
            raise ValueError("resume config differs from checkpoint config")
    else:
        bundle = build_bundle(config)
        pretrain_codec(bundle, dataset, log_fn=emit)
        state = TrainState(step=0,
                           optimizer=AdamW(lr=config.train.lr,
                                           weight_decay=config.train.weight_decay),
                           rng=np.random.default_rng(config.train.seed + 1))

    train_samples, val_samples = split_dataset(dataset, config)
    n_train = len(train_samples)
    tcfg = config.train
    final_path = out / "checkpoint_final.bin"

    while state.step < tcfg.steps:
        state.step += 1
        idx = state.rng.integers(0, n_train, size=tcfg.batch)
        chosen = [train_samples[i] for i in idx]
        batch = {
            "x0": np.stack([s.x0 for s in chosen]),
            "y": np.stack([s.y for s in chosen]),
            "instructions": [training_instruction(bundle, s) for s in chosen],
        }
        try:
            loss = train_step(batch, bundle, state.optimizer, state.rng)
        except NonFiniteError as exc:
            raise NonFiniteError(f"aborted at step {state.step}: {exc}") from exc
        record = {"step": state.step, "loss": loss, "lr": tcfg.lr}
        if val_samples and state.step % tcfg.val_every == 0:
            record["val_mse"] = validation_mse(bundle, val_samples, seed=tcfg.seed)
        if state.step % 50 == 0 or state.step == 1 or "val_mse" in record:
            emit(record)
        if tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0 \
                and state.step < tcfg.steps:
            save_checkpoint(bundle, out / f"checkpoint_{state.step:06d}.bin", state)

    save_checkpoint(bundle, final_path, state)
    return final_path


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------

def _as_instruction(instruction):
    if isinstance(instruction, Instruction):
        return instruction
    return Instruction.manual(str(instruction))


def _attention_export(sink, fusion_result, mask, n_query):
    """Token-conditioned spatial maps: rows are instruction tokens and are
    normalized to sum to one."""
    if fusion_result.attention:
        block_w = fusion_result.attention[-1].data  # [N, n_q, n_q + L]
        text_part = block_w[..., n_query:]
    else:
        text_part = None
    maps = []
    for entry in sink:
        if entry["level"].startswith("ctrl_"):
            continue
        a = entry["weights"].data  # [N, HW, n_q]
        if text_part is not None and text_part.shape[-1]:
            m = np.swapaxes(a @ text_part, -1, -2)  # [N, L, HW]
        else:
            m = np.swapaxes(a, -1, -2)              # [N, n_q, HW]
        denom = np.maximum(m.sum(axis=-1, keepdims=True), 1e-12)
        maps.append({"level": entry["level"], "shape": tuple(int(v) for v in entry["shape"]),
                     "token_maps": (m / denom).astype(np.float32)})
    return maps


def enhance_batch(images, instructions, bundle, seeds, sample_steps=None,
                  collect_attention=False):
    """Spaced reverse diffusion for a batch of images (one seed each).

    Noise is drawn from one generator per image, so a batched call is
    bit-identical to the same images enhanced one at a time.
    """
    cfg = bundle.config
    steps = sample_steps or cfg.sample.s_steps
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if any(im.shape != images[0].shape for im in images):
        raise ValueError("all images in a batch must share one shape")
    lat_shape = bundle.latent_shape(*images[0].shape[-2:])
    instructions = [_as_instruction(i) for i in instructions]
    ids, mask = _prior_inputs(bundle, instructions)
    sched = bundle.schedule
    attn_maps = None
    with nc.no_grad():
        text = bundle.text_encoder(ids, mask)
        cond_latent = bundle.image_encoder(Tensor(np.stack(images)))
        rngs = [np.random.default_rng(int(s)) for s in seeds]
        z = np.stack([r.standard_normal(lat_shape) for r in rngs]).astype(np.float32)
        for t, t_prev in df.spaced_steps(sched.T, steps).pairs():
            fus = bundle.fusion(text, t=t, text_mask=mask)
            sink = [] if (collect_attention and t_prev == 0) else None
            pred = eps_theta(Tensor(z), t, cond_latent, fus.prior,
                             bundle.unet, control=bundle.control, attn_sink=sink)
            noise = np.stack([r.standard_normal(lat_shape) for r in rngs]).astype(np.float32)
            z = df.ddpm_step(z, t, t_prev, pred.data, sched, noise,
                             clamp_range=bundle.latent_range)
            if sink is not None:
                attn_maps = _attention_export(sink, fus, mask, cfg.fusion.n_query)
        decoded = bundle.codec.decode(Tensor(z)).data
    return clip01(decoded), attn_maps


def enhance(image, instruction, bundle, seed=0, sample_steps=None):
    """Enhance one low-light image under one instruction; deterministic in
    (image, instruction, seed, checkpoint)."""
    out, _ = enhance_batch([image], [instruction], bundle, [seed],
                           sample_steps=sample_steps)
    return out[0]


def enhance_dataset(bundle, dataset, seed=0, sample_steps=None, batch_size=16):
    """Enhance every pair with per-image seeds derived from (seed, index)."""
    facets = bundle.config.instruct.facet_mask
    outputs = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        instructions = [
            synthesize_instruction(s.scene, facets=facets) if s.scene is not None
            else describe_heuristic(s.y)
            for s in chunk
        ]
        seeds = [np.random.SeedSequence([seed, start + i]).generate_state(1)[0]
                 for i in range(len(chunk))]
        out, _ = enhance_batch([s.y for s in chunk], instructions, bundle, seeds,
                               sample_steps=sample_steps)
        outputs.extend(out)
    return np.stack(outputs)


# ---------------------------------------------------------------------------
# iterative enhancement
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    index: int
    instruction_text: str
    instruction_source: str
    seed: int
    output: np.ndarray
    attention: list = field(default_factory=list)
    duration_s: float = 0.0

    def stats(self):
        from .instructions import luma

        y = luma(self.output)
        return {"mean_luma": float(y.mean()), "contrast": float(y.std())}


@dataclass
class EnhancementJob:
    k: int
    seed: int
    iterations: list = field(default_factory=list)
    config_hash: str = ""
    checkpoint_hash: str = ""

    def summary(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "iterations": [
                {"index": r.index, "instruction": r.instruction_text,
                 "source": r.instruction_source, "seed": r.seed,
                 "duration_s": round(r.duration_s, 4), **r.stats()}
                for r in self.iterations
            ],
        }


def default_describer(bundle):
    """External endpoint when configured, else the image-statistics
    heuristic."""
    icfg = bundle.config.instruct
    if icfg.provider == "external" and icfg.endpoint_url:
        endpoint = VlmEndpoint(icfg.endpoint_url, icfg.endpoint_auth or None,
                               icfg.endpoint_timeout)
        return lambda image: describe_external(image, endpoint)
    return describe_heuristic


def iterative_enhance(image, initial_instruction, bundle, k=None, seed=0,
                      sample_steps=None, describer=None, collect_attention=True):
    """Run k enhancement passes; pass j >= 2 re-derives its instruction from
    the previous output.  Describer failures fall back to reusing the
    previous instruction with a logged warning."""
    cfg = bundle.config
    k = cfg.sample.k if k is None else k
    if k < 1:
        raise ValueError("iterations k must be >= 1")
    if describer is None:
        describer = default_describer(bundle)
    image = np.asarray(image, dtype=np.float32)
    instruction = _as_instruction(initial_instruction)
    job = EnhancementJob(k=k, seed=seed, config_hash=cfg.hash(),
                         checkpoint_hash=bundle.checkpoint_hash or bundle.param_fingerprint())
    previous = None
    for j in range(1, k + 1):
        if j > 1:
            try:
                instruction = _as_instruction(describer(previous))
            except VlmError as exc:
                logger.warning("describer failed on pass %d (%s); reusing the "
                               "previous instruction", j, exc)
        started = time.perf_counter()
        outs, attn = enhance_batch([image], [instruction], bundle, [seed + j - 1],
                                   sample_steps=sample_steps,
                                   collect_attention=collect_attention)
        previous = outs[0]
        job.iterations.append(IterationRecord(
            index=j, instruction_text=instruction.text,
            instruction_source=instruction.source, seed=seed + j - 1,
            output=previous, attention=attn or [],
            duration_s=time.perf_counter() - started))
    return job


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(bundle, path, train_state=None):
    """Write the manifest line plus raw tensor payload; returns the payload
    content hash recorded in the manifest."""
    entries = []
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder not in ("<", "=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape),
                        "byte_offset": offset, "byte_len": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in bundle.named_parameters():
        push(name, p.data)
    if train_state is not None:
        for name, arr in train_state.optimizer.state_arrays().items():
            push(name, arr)

    payload = b"".join(blobs)
    content_hash = hashlib.sha256(payload).hexdigest()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": bundle.config.to_dict(),
        "config_hash": bundle.config.hash(),
        "schedule": bundle.schedule.to_dict(),
        "latent_range": [float(bundle.latent_range[0]), float(bundle.latent_range[1])],
        "codec_pretrained": bundle.codec_pretrained,
        "step": train_state.step if train_state else None,
        "optimizer_t": train_state.optimizer.t if train_state else None,
        "rng_state": _rng_state(train_state.rng) if train_state else None,
        "tensors": entries,
        "content_hash": content_hash,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
    bundle.checkpoint_hash = content_hash
    return content_hash


def read_manifest(path):
    with open(path, "rb") as fh:
        return json.loads(fh.readline().decode("utf-8"))


def load_checkpoint(path, with_train_state=False):
    """Rebuild a bundle (and optionally the training state) bit-exactly."""
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognized checkpoint")
    if hashlib.sha256(payload).hexdigest() != manifest["content_hash"]:
        raise ValueError("checkpoint payload does not match its content hash")

    arrays = {}
    for e in manifest["tensors"]:
        raw = payload[e["byte_offset"]: e["byte_offset"] + e["byte_len"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])) \
            .reshape(e["shape"]).copy()

    config = Config.from_dict(manifest["config"])
    bundle = build_bundle(config)
    bundle.codec_pretrained = manifest["codec_pretrained"]
    bundle.latent_range = tuple(manifest["latent_range"])
    bundle.checkpoint_hash = manifest["content_hash"]
    for name, p in bundle.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing tensor '{name}'")
        if list(p.data.shape) != list(arrays[name].shape):
            raise ValueError(f"checkpoint tensor '{name}' has wrong shape")
        p.tensor.data = arrays[name]
    bundle.apply_freeze_policy()
    if not with_train_state:
        return bundle

    opt = AdamW(lr=config.train.lr, weight_decay=config.train.weight_decay)
    opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("optim.")},
                          manifest.get("optimizer_t") or 0)
    rng = _restore_rng(manifest["rng_state"]) if manifest.get("rng_state") \
        else np.random.default_rng(config.train.seed + 1)
    state = TrainState(step=manifest.get("step") or 0, optimizer=opt, rng=rng)
    return bundle, state
