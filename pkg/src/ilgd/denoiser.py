"""Conditional noise predictor with recordable, injectable cross-attention.

The denoiser is a 4-block transformer over a 16x16 grid of 2x2 pixel
patches (n = 256 latent tokens, width d = 64).  Each block applies
self-attention, cross-attention to the conditioning token sequence, and an
MLP, all modulated by a time embedding through zero-initialised
shift/scale/gate projections so the network is the identity (and predicts
exactly zero noise) at initialisation.

Cross-attention is the control surface for layout guidance:

* recording: head-averaged post-softmax maps A (n x k) per block can be
  captured on the autodiff tape, so a scalar loss on them differentiates
  back to the input latent;
* injection: an `InjectionDirective` adds nu_t * m to every head's raw
  logits before scaling and softmax, where nu_t = nu' * log(1 + sigma_t)
  * max(head-averaged logits) is recomputed per block.  Boosted entries
  can only gain mass (softmax is monotone in its logit), and a zero
  strength is bit-exactly a no-op.

Padding-token key columns receive -1e9 logits ahead of the softmax, so
they carry exactly zero attention mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, add, area_resize, concat, matmul, mean, mul,
                       reshape, scale, slice_, softmax, sub, transpose)

D_MODEL = 64
N_HEADS = 4
N_BLOCKS = 4
PATCH = 2
GRID = 16                      # 32 / PATCH
N_PATCHES = GRID * GRID        # 256
PATCH_DIM = PATCH * PATCH * 3  # 12
MLP_HIDDEN = 2 * D_MODEL
IMAGE_SIZE = GRID * PATCH
PAD_LOGIT_BIAS = -1e9
_RMS_EPS = 1e-6


@dataclass
class InjectionDirective:
    """Request to boost cross-attention logits inside layout masks.

    mask      : (n_patches, k) binary; entry (i, j) boosts token column j
                for latent patch i.
    strength  : nu' >= 0, the dimensionless base strength.
    sigma_t   : noise level of the current step (drives the log(1+sigma)
                factor of the per-block strength rule).
    active    : master switch; inactive directives are bit-exact no-ops.
    """
    mask: np.ndarray
    strength: float
    sigma_t: float
    active: bool = True

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.strength < 0:
            raise ValueError("injection strength must be >= 0")
        uniq = np.unique(self.mask)
        if not np.all(np.isin(uniq, (0.0, 1.0))):
            raise ValueError("injection mask must be binary")


def injection_strength(nu_prime: float, sigma_t: float,
                       logits: np.ndarray) -> float:
    """nu_t = nu' * log(1 + sigma_t) * max(logits).

    `logits` is the head-averaged raw QK^T matrix of one block with
    padding columns already removed.
    """
    if nu_prime < 0 or sigma_t < 0:
        raise ValueError("nu' and sigma_t must be >= 0")
    return float(nu_prime) * math.log1p(float(sigma_t)) * float(np.max(logits))


# ---------------------------------------------------------------------------
# fixed (non-learned) embeddings


def _sinusoid_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Rows of interleaved sin/cos features, one per position."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def time_features(t: np.ndarray) -> np.ndarray:
    """(B, D_MODEL) sinusoidal features of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return _sinusoid_table(t, D_MODEL)


def _position_table() -> np.ndarray:
    """(N_PATCHES, D_MODEL) fixed 2-D positional features for the grid."""
    coords = np.arange(GRID, dtype=np.float64)
    per_axis = _sinusoid_table(coords, D_MODEL // 2)          # (16, 32)
    ys = np.repeat(per_axis, GRID, axis=0)                    # row-major y
    xs = np.tile(per_axis, (GRID, 1))                         # row-major x
    return np.concatenate([ys, xs], axis=1)


_POS_TABLE = _position_table()


# ---------------------------------------------------------------------------
# weights


def init_weights(seed: int, vocab_size: int, k_tokens: int
                 ) -> dict[str, np.ndarray]:
    """Deterministic initial weights; modulations and head start at zero."""
    rng = np.random.default_rng([seed, 3])

    def dense(fan_in, fan_out):
        return rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out))

    w: dict[str, np.ndarray] = {}
    w["patch.w"] = dense(PATCH_DIM, D_MODEL)
    w["patch.b"] = np.zeros(D_MODEL)
    w["token.table"] = rng.normal(0.0, D_MODEL ** -0.5,
                                  size=(vocab_size, D_MODEL))
    w["token.pos"] = rng.normal(0.0, 0.02, size=(k_tokens, D_MODEL))
    w["time.w1"] = dense(D_MODEL, D_MODEL)
    w["time.b1"] = np.zeros(D_MODEL)
    w["time.w2"] = dense(D_MODEL, D_MODEL)
    w["time.b2"] = np.zeros(D_MODEL)
    for i in range(N_BLOCKS):
        p = f"block{i}"
        w[f"{p}.mod.w"] = np.zeros((D_MODEL, 9 * D_MODEL))
        w[f"{p}.mod.b"] = np.zeros(9 * D_MODEL)
        for unit in ("self", "cross"):
            for name in ("wq", "wk", "wv", "wo"):
                w[f"{p}.{unit}.{name}"] = dense(D_MODEL, D_MODEL)
            for name in ("bq", "bk", "bv", "bo"):
                w[f"{p}.{unit}.{name}"] = np.zeros(D_MODEL)
        w[f"{p}.mlp.w1"] = dense(D_MODEL, MLP_HIDDEN)
        w[f"{p}.mlp.b1"] = np.zeros(MLP_HIDDEN)
        w[f"{p}.mlp.w2"] = dense(MLP_HIDDEN, D_MODEL)
        w[f"{p}.mlp.b2"] = np.zeros(D_MODEL)
    w["final.mod.w"] = np.zeros((D_MODEL, 2 * D_MODEL))
    w["final.mod.b"] = np.zeros(2 * D_MODEL)
    w["final.head.w"] = np.zeros((D_MODEL, PATCH_DIM))
    w["final.head.b"] = np.zeros(PATCH_DIM)
    return w


def parameter_count(weights: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in weights.values()))


# ---------------------------------------------------------------------------
# building blocks (all on-tape)


def _rmsnorm(x: Tensor) -> Tensor:
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    return mul(x, scale(add(ms, _RMS_EPS).log(), -0.5).exp())


def _silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); sigmoid via softmax against a zero channel."""
    xr = reshape(x, x.shape + (1,))
    zero = Tensor(np.zeros(xr.shape))
    sig = slice_(softmax(concat([xr, zero], axis=-1), axis=-1),
                 tuple(slice(None) for _ in x.shape) + (0,))
    return mul(x, sig)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


@dataclass
class AttentionOutcome:
    """Cross-attention return bundle for one block."""
    out: Tensor                      # (B, n, d) attended values
    avg_map: Tensor | None           # (B, n, k) head-averaged A, on-tape
    nu_t: float | None               # injection strength actually applied
    uninjected_map: np.ndarray | None  # head-averaged A without injection


def attention(h: Tensor, kv: Tensor, p: dict[str, Tensor], n_heads: int, *,
              pad_bias: np.ndarray | None = None,
              directive: InjectionDirective | None = None,
              record: bool = False, label: str = "") -> AttentionOutcome:
    """Multi-head attention with optional logit injection and map recording.

    `p` holds wq/bq, wk/bk, wv/bv, wo/bo Tensors.  Queries come from `h`
    (B, n, d); keys/values from `kv` (B, k, d_y).  `pad_bias`
    (B, 1, 1, k) is added after scaling so padded key columns get exactly
    zero mass.  Injection adds nu_t * mask to every head's raw logits
    before the 1/sqrt(d_head) scaling.
    """
    bsz, n, d = h.shape
    k = kv.shape[1]
    dh = d // n_heads

    def heads(x, length):
        return transpose(reshape(x, (bsz, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(h, p["wq"], p["bq"]), n)                 # (B,H,n,dh)
    key = heads(_linear(kv, p["wk"], p["bk"]), k)              # (B,H,k,dh)
    v = heads(_linear(kv, p["wv"], p["bv"]), k)

    raw = matmul(q, transpose(key, (0, 1, 3, 2)))              # (B,H,n,k)
    if np.isnan(raw.data).any():
        raise FloatingPointError(f"NaN attention logits in {label}")

    nu_t = None
    uninjected = None
    if directive is not None and directive.active and directive.strength > 0:
        if bsz != 1:
            raise ValueError("injection supports batch size 1 only")
        if directive.mask.shape != (n, k):
            raise ValueError(
                f"injection mask shape {directive.mask.shape} != ({n}, {k})")
        head_avg = raw.data[0].mean(axis=0)                    # (n, k)
        if pad_bias is not None:
            valid_cols = pad_bias[0, 0, 0] == 0.0
        else:
            valid_cols = np.ones(k, dtype=bool)
        nu_t = injection_strength(directive.strength, directive.sigma_t,
                                  head_avg[:, valid_cols])
        uninjected = _softmax_value(raw.data / math.sqrt(dh), pad_bias)
        if nu_t != 0.0:
            raw = add(raw, Tensor(nu_t * directive.mask[None, None]))

    logits = scale(raw, 1.0 / math.sqrt(dh))
    if pad_bias is not None:
        logits = add(logits, Tensor(pad_bias))
    att = softmax(logits, axis=-1)                             # (B,H,n,k)

    avg_map = mean(att, axis=1) if record else None            # (B,n,k)

    ctx = matmul(att, v)                                       # (B,H,n,dh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, n, d))
    out = _linear(ctx, p["wo"], p["bo"])
    return AttentionOutcome(out, avg_map, nu_t, uninjected)


def _softmax_value(logits: np.ndarray, pad_bias: np.ndarray | None
                   ) -> np.ndarray:
    """Plain-numpy head-averaged softmax, used for uninjected twin maps."""
    if pad_bias is not None:
        logits = logits + pad_bias
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=1)


def aggregate_attention(maps: list[Tensor]) -> Tensor:
    """Softmax-weighted average of per-block maps at 16x16 resolution.

    Each (n, k) map is area-resized to the 16x16 grid (identity here, all
    blocks share the resolution), reduced to its scalar mean, and the
    block maps are combined with weights softmax(those means).
    """
    if not maps:
        raise ValueError("aggregate_attention: empty record")
    resized = [area_resize(m, (GRID, GRID), (GRID, GRID)) for m in maps]
    means = concat([reshape(mean(m), (1,)) for m in resized], axis=0)
    weights = softmax(means, axis=-1)
    total = None
    for i, m in enumerate(resized):
        term = mul(reshape(slice_(weights, (slice(i, i + 1),)), (1, 1)), m)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# full forward pass


def _patchify(z: Tensor, bsz: int) -> Tensor:
    x = reshape(z, (bsz, GRID, PATCH, GRID, PATCH, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (bsz, N_PATCHES, PATCH_DIM))


def _unpatchify(x: Tensor, bsz: int) -> Tensor:
    x = reshape(x, (bsz, GRID, GRID, PATCH, PATCH, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (bsz, IMAGE_SIZE, IMAGE_SIZE, 3))


def _modulate(h: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return add(mul(h, add(scale_, 1.0)), shift)


@dataclass
class ForwardOutput:
    eps: Tensor                       # (B, 32, 32, 3)
    z_leaf: Tensor                    # input latent as a graph leaf
    weight_tensors: dict[str, Tensor]
    attn_maps: list[Tensor] = field(default_factory=list)
    uninjected_maps: list[np.ndarray] = field(default_factory=list)
    nu_values: list[float] = field(default_factory=list)


def forward(weights: dict[str, np.ndarray], z: np.ndarray, t, tokens,
            *, record_attention: bool = False,
            directive: InjectionDirective | None = None) -> ForwardOutput:
    """Batched noise prediction.

    z      : (B, 32, 32, 3) latents
    t      : int or (B,) integer timesteps
    tokens : (B, k) integer token ids (id 0 = padding)
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    bsz = z.shape[0]
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                            (bsz,))

    wt = {name: Tensor(val) for name, val in weights.items()}
    z_leaf = Tensor(z)

    onehot = np.eye(wt["token.table"].shape[0])[tokens]        # (B,k,V)
    y = add(matmul(Tensor(onehot), wt["token.table"]), wt["token.pos"])
    pad_bias = np.where(tokens == 0, PAD_LOGIT_BIAS, 0.0)[:, None, None, :]

    temb = _linear(Tensor(time_features(t_arr)), wt["time.w1"], wt["time.b1"])
    temb = _linear(_silu(temb), wt["time.w2"], wt["time.b2"])  # (B, d)

    x = add(_linear(_patchify(z_leaf, bsz), wt["patch.w"], wt["patch.b"]),
            Tensor(_POS_TABLE))

    out = ForwardOutput(eps=None, z_leaf=z_leaf, weight_tensors=wt)

    for i in range(N_BLOCKS):
        p = f"block{i}"
        mod = reshape(_linear(temb, wt[f"{p}.mod.w"], wt[f"{p}.mod.b"]),
                      (bsz, 9, D_MODEL))
        parts = [slice_(mod, (slice(None), slice(j, j + 1))) for j in range(9)]

        def params(unit):
            return {name: wt[f"{p}.{unit}.{name}"]
                    for name in ("wq", "bq", "wk", "bk", "wv", "bv",
                                 "wo", "bo")}

        h = _modulate(_rmsnorm(x), parts[0], parts[1])
        att = attention(h, h, params("self"), N_HEADS,
                        label=f"block{i}.self")
        x = add(x, mul(parts[2], att.out))

        h = _modulate(_rmsnorm(x), parts[3], parts[4])
        cross = attention(h, y, params("cross"), N_HEADS, pad_bias=pad_bias,
                          directive=directive, record=record_attention,
                          label=f"block{i}.cross")
        x = add(x, mul(parts[5], cross.out))
        if record_attention:
            out.attn_maps.append(cross.avg_map)
        if cross.nu_t is not None:
            out.nu_values.append(cross.nu_t)
            out.uninjected_maps.append(cross.uninjected_map)

        h = _modulate(_rmsnorm(x), parts[6], parts[7])
        hidden = _silu(_linear(h, wt[f"{p}.mlp.w1"], wt[f"{p}.mlp.b1"]))
        x = add(x, mul(parts[8], _linear(hidden, wt[f"{p}.mlp.w2"],
                                         wt[f"{p}.mlp.b2"])))

    fmod = reshape(_linear(temb, wt["final.mod.w"], wt["final.mod.b"]),
                   (bsz, 2, D_MODEL))
    h = _modulate(_rmsnorm(x),
                  slice_(fmod, (slice(None), slice(0, 1))),
                  slice_(fmod, (slice(None), slice(1, 2))))
    out.eps = _unpatchify(_linear(h, wt["final.head.w"], wt["final.head.b"]),
                          bsz)
    return out


@dataclass
class EpsPrediction:
    """Single-latent prediction with optional attention record."""
    eps: np.ndarray                       # (32, 32, 3)
    maps: list[Tensor] | None             # per block, (n, k), on-tape
    uninjected_maps: list[np.ndarray]
    nu_values: list[float]
    z_leaf: Tensor
    eps_tensor: Tensor


def predict_eps(weights: dict[str, np.ndarray], z: np.ndarray, t: int,
                tokens: np.ndarray, *, record_attention: bool = False,
                directive: InjectionDirective | None = None) -> EpsPrediction:
    """Unbatched wrapper around `forward` (B = 1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"latent shape {z.shape} != "
                         f"({IMAGE_SIZE}, {IMAGE_SIZE}, 3)")
    fo = forward(weights, z[None], int(t), np.asarray(tokens)[None],
                 record_attention=record_attention, directive=directive)
    maps = None
    if record_attention:
        maps = [slice_(m, (0,)) for m in fo.attn_maps]
        for m in maps:
            rows = m.data.sum(axis=-1)
            if not np.allclose(rows, 1.0, atol=1e-9):
                raise FloatingPointError("attention rows do not sum to 1")
    return EpsPrediction(
        eps=fo.eps.data[0],
        maps=maps,
        uninjected_maps=[u[0] for u in fo.uninjected_maps],
        nu_values=fo.nu_values,
        z_leaf=fo.z_leaf,
        eps_tensor=fo.eps,
    )
