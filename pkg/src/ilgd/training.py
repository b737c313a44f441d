"""Noise-prediction training with conditioning dropout and binary checkpoints.

The objective is the simple denoising loss: draw a scene image x0, a
uniform timestep t, Gaussian noise eps; form z_t with the closed-form
forward marginal; regress the network output onto eps with mean squared
error (unit weighting).  With probability `p_uncond` a batch element's
token sequence is replaced by the null sequence so the model also learns
an unconditional branch for classifier-free guidance.

Everything is deterministic given the config seed: batch b draws its
scenes from seeds (b-1)*batch_size .. b*batch_size-1 and its noise from
an rng keyed by [seed, b], so a resumed run is bit-identical to an
uninterrupted one.  Checkpoints are little-endian float64 blobs behind a
JSON header with a SHA-256 checksum and round-trip byte-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import denoiser
from .dataset import (HOLDOUT_BASE, TOKENS_PER_SCENE, VOCAB, generate_scene,
                      null_tokens, render_scene)
from .schedules import NoiseSchedule, forward_marginal

CHECKPOINT_FORMAT = "ilgd-checkpoint"
CHECKPOINT_VERSION = 1
_LATEST = "ckpt_latest.bin"
_LOG = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 3e-4
    p_uncond: float = 0.1
    seed: int = 0
    checkpoint_every: int = 250
    log_every: int = 25
    max_objects: int = 3
    image_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.p_uncond < 1):
            raise ValueError("p_uncond must be in [0, 1)")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    schedule: NoiseSchedule
    vocab: tuple[str, ...]
    version: int = CHECKPOINT_VERSION


# ---------------------------------------------------------------------------
# loss


def eps_objective(eps_hat: ad.Tensor, eps: np.ndarray) -> ad.Tensor:
    """Mean squared error per element; exactly zero for an oracle predictor."""
    diff = ad.sub(eps_hat, ad.Tensor(eps))
    return ad.mean(ad.mul(diff, diff))


def eps_loss(weights: dict[str, np.ndarray], x0: np.ndarray,
             tokens: np.ndarray, schedule: NoiseSchedule,
             rng: np.random.Generator) -> tuple[ad.Tensor,
                                                denoiser.ForwardOutput]:
    """Denoising loss of one batch; t and eps are drawn from `rng`."""
    bsz = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=bsz)
    eps = rng.standard_normal(x0.shape)
    z = forward_marginal(x0, t, schedule, eps)
    fo = denoiser.forward(weights, z, t, tokens)
    return eps_objective(fo.eps, eps), fo


def scene_batch(step: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Images in [-1, 1] and token ids for training step `step` (1-based)."""
    x0, tokens = [], []
    base = (step - 1) * cfg.batch_size
    if base + cfg.batch_size > HOLDOUT_BASE:
        raise ValueError("training seeds would collide with the holdout range")
    for i in range(cfg.batch_size):
        scene = generate_scene(base + i, max_objects=cfg.max_objects,
                               size=cfg.image_size)
        x0.append(2.0 * render_scene(scene) - 1.0)
        tokens.append(scene.tokens(TOKENS_PER_SCENE))
    return np.stack(x0), np.stack(tokens, dtype=np.int64)


# ---------------------------------------------------------------------------
# optimizer


def adam_update(weights, opt_m, opt_v, grads, cfg: TrainConfig, step: int):
    """In-place Adam step with bias correction; deterministic key order."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in sorted(weights):
        g = grads[name]
        m = opt_m[name]
        v = opt_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        weights[name] -= (cfg.learning_rate * (m / c1)
                          / (np.sqrt(v / c2) + cfg.adam_eps))


def train_step(weights, opt_m, opt_v, cfg: TrainConfig,
               schedule: NoiseSchedule, step: int) -> float:
    """One full optimization step; returns the batch loss."""
    x0, tokens = scene_batch(step, cfg)
    rng = np.random.default_rng([cfg.seed, step])
    drop = rng.random(cfg.batch_size) < cfg.p_uncond
    if drop.any():
        tokens[drop] = null_tokens(TOKENS_PER_SCENE)
    with ad.record() as graph:
        loss, fo = eps_loss(weights, x0, tokens, schedule, rng)
        graph.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {step}")
    grads = {name: wt.grad for name, wt in fo.weight_tensors.items()}
    adam_update(weights, opt_m, opt_v, grads, cfg, step)
    return value


def train(cfg: TrainConfig, out_dir: str, resume: bool = True) -> Checkpoint:
    """Run (or resume) training, checkpointing into `out_dir`.

    The latest checkpoint is rewritten atomically every
    `cfg.checkpoint_every` steps; the loss log is appended as
    line-delimited JSON.  A NaN loss aborts with the last checkpoint
    intact.
    """
    os.makedirs(out_dir, exist_ok=True)
    latest = os.path.join(out_dir, _LATEST)
    if resume and os.path.exists(latest):
        ckpt = load_checkpoint(latest)
        # steps / checkpoint_every / log_every only control when the loop
        # stops and reports; everything else determines the trajectory.
        operational = {"steps", "checkpoint_every", "log_every"}
        old = dataclasses.asdict(ckpt.config)
        new = dataclasses.asdict(cfg)
        mismatched = [k for k in new
                      if k not in operational and old[k] != new[k]]
        if mismatched:
            raise ValueError(
                f"resume config differs from checkpoint: {mismatched}")
        weights, opt_m, opt_v = ckpt.weights, ckpt.opt_m, ckpt.opt_v
        start = ckpt.step
        schedule = ckpt.schedule
    else:
        weights = denoiser.init_weights(cfg.seed, len(VOCAB),
                                        TOKENS_PER_SCENE)
        opt_m = {k: np.zeros_like(v) for k, v in weights.items()}
        opt_v = {k: np.zeros_like(v) for k, v in weights.items()}
        start = 0
        schedule = NoiseSchedule.linear()

    ckpt = Checkpoint(weights, opt_m, opt_v, start, cfg, schedule,
                      tuple(VOCAB.tokens))
    log_path = os.path.join(out_dir, _LOG)
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start + 1, cfg.steps + 1):
            t0 = time.time()
            loss = train_step(weights, opt_m, opt_v, cfg, schedule, step)
            ckpt.step = step
            if step % cfg.log_every == 0 or step == cfg.steps or step == 1:
                log.write(json.dumps({"step": step, "loss": loss,
                                      "wall_time": time.time() - t0}) + "\n")
                log.flush()
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save_checkpoint(ckpt, latest)
    return ckpt


def read_log(out_dir: str) -> list[dict]:
    with open(os.path.join(out_dir, _LOG), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# checkpoint serialization


def _tensor_groups(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {}
    for prefix, group in (("w", ckpt.weights), ("m", ckpt.opt_m),
                          ("v", ckpt.opt_v)):
        for name, arr in group.items():
            out[f"{prefix}.{name}"] = arr
    return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Atomic write: JSON header + little-endian float64 blob + checksum."""
    tensors = _tensor_groups(ckpt)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        raw = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(tensors[name].shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "step": ckpt.step,
        "config": dataclasses.asdict(ckpt.config),
        "schedule": ckpt.schedule.params(),
        "vocab": list(ckpt.vocab),
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a checkpoint; reports the parameter count."""
    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        blob = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ValueError("checkpoint checksum mismatch (truncated or corrupt)")

    groups = {"w": {}, "m": {}, "v": {}}
    for entry in header["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
        prefix, name = entry["name"].split(".", 1)
        groups[prefix][name] = arr
    cfg = TrainConfig(**header["config"])
    betas = np.concatenate([[0.0], header["schedule"]["betas"]])
    ckpt = Checkpoint(groups["w"], groups["m"], groups["v"], header["step"],
                      cfg, NoiseSchedule(betas),
                      tuple(header["vocab"]), header["version"])
    n_params = sum(v.size for v in ckpt.weights.values())
    print(f"loaded checkpoint step {ckpt.step}: {n_params} parameters")
    return ckpt
