"""Training-free layout control for the conditional denoiser.

Two complementary mechanisms steer sampling toward a target layout:

* cross-attention injection biases the conditional pass's raw attention
  logits inside each target's box mask (see `ilgd.denoiser.attention`);
* an attention-map loss, differentiated back to the input latent through
  the recorded forward pass, shifts the noise prediction in the direction
  that moves attention mass into the boxes.

The combination method applies both; single-mechanism variants and three
reference methods from the same family (two pre-step latent-update
schedules driven by the identical loss gradient, and a per-region fusion
rule that averages candidate latents under pixel masks) are provided for
controlled comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mul, record, sub, sum_
from .dataset import TOKENS_PER_SCENE, VOCAB, LayoutSpec, null_tokens
from .denoiser import (EpsPrediction, InjectionDirective, aggregate_attention,
                       predict_eps)

METHODS = ("none", "inject-only", "loss-only", "ilgd",
           "boxdiff-schedule", "chen-schedule", "multidiffusion")
WINDOW_MODES = ("iteration", "countdown")

DEFAULT_ETA = 0.48
DEFAULT_NU_PRIME = 0.75
DEFAULT_N_LOSS = 25
DEFAULT_N_INJECT = 10


@dataclass(frozen=True)
class GuidanceConfig:
    """Layout-control settings for one sampling run.

    n_loss and n_inject count guided sampler iterations.  In the default
    "iteration" window mode the guided iterations are the first n (shifted
    one step later when skip_first_step is set, which leaves the very
    first, fully-noisy iteration untouched).  In "countdown" mode an
    iteration is guided while more than n iterations remain, i.e. n counts
    the trailing unguided steps; skip_first_step is ignored there.
    """
    method: str = "ilgd"
    eta: float = DEFAULT_ETA
    nu_prime: float = DEFAULT_NU_PRIME
    n_loss: int = DEFAULT_N_LOSS
    n_inject: int = DEFAULT_N_INJECT
    window_mode: str = "iteration"
    skip_first_step: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(
                f"unknown guidance method {self.method!r}; "
                f"expected one of {METHODS}")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(
                f"unknown window mode {self.window_mode!r}; "
                f"expected one of {WINDOW_MODES}")
        if self.eta < 0 or self.nu_prime < 0:
            raise ValueError("eta and nu_prime must be >= 0")
        if self.n_loss < 0 or self.n_inject < 0:
            raise ValueError("n_loss and n_inject must be >= 0")


def uses_injection(method: str) -> bool:
    return method in ("inject-only", "ilgd")


def uses_loss_guidance(method: str) -> bool:
    return method in ("loss-only", "ilgd")


def uses_prestep_update(method: str) -> bool:
    return method in ("boxdiff-schedule", "chen-schedule")


def _window_active(i: int, n: int, mode: str, skip_first: bool,
                   n_steps: int) -> bool:
    """Is 1-based sampler iteration ``i`` inside an n-step guidance window?"""
    if mode == "iteration":
        if skip_first:
            return 2 <= i <= n + 1
        return 1 <= i <= n
    countdown = n_steps - i + 1
    return countdown > n


def loss_window_active(cfg: GuidanceConfig, i: int, n_steps: int) -> bool:
    return _window_active(i, cfg.n_loss, cfg.window_mode,
                          cfg.skip_first_step, n_steps)


def inject_window_active(cfg: GuidanceConfig, i: int, n_steps: int) -> bool:
    return _window_active(i, cfg.n_inject, cfg.window_mode,
                          cfg.skip_first_step, n_steps)


# ---------------------------------------------------------------------------
# attention-map loss


def layout_loss(agg_map: Tensor, layout: LayoutSpec) -> Tensor:
    """Attention mass outside the boxes minus mass inside, target columns only.

    ``agg_map`` is the aggregated (n_patches, k) attention map.  The loss is
    sum(mask_bar * A) - sum(mask * A); both masks are zero away from target
    columns, so non-target tokens never contribute.  Minimising it moves
    each target token's attention into its box.
    """
    inside = sum_(mul(agg_map, Tensor(layout.mask)))
    outside = sum_(mul(agg_map, Tensor(layout.mask_bar)))
    return sub(outside, inside)


@dataclass
class GradientResult:
    """Latent gradient of the layout loss plus the pass that produced it."""
    grad: np.ndarray          # d loss / d z, same shape as z
    value: float              # scalar loss at z
    prediction: EpsPrediction  # the recorded conditional pass (reusable eps)


def loss_gradient(weights: dict[str, np.ndarray], z: np.ndarray, t: int,
                  tokens: np.ndarray, layout: LayoutSpec) -> GradientResult:
    """d(layout loss)/dz through a recorded, non-injected conditional pass.

    The gradient flows through the attention maps only via this pass; the
    same pass's noise prediction is returned so callers that need both do
    not pay for a second forward.
    """
    with record() as graph:
        pred = predict_eps(weights, z, int(t), tokens,
                           record_attention=True)
        agg = aggregate_attention(pred.maps)
        loss = layout_loss(agg, layout)
        graph.backward(loss, wrt=[pred.z_leaf])
    grad = pred.z_leaf.grad
    if grad.ndim == 4:
        grad = grad[0]
    return GradientResult(grad=grad, value=loss.item(), prediction=pred)


def guided_eps(eps: np.ndarray, grad: np.ndarray, eta: float,
               sigma_t: float) -> np.ndarray:
    """Shift a noise prediction along the loss gradient: eps + eta*sigma*grad."""
    return eps + eta * float(sigma_t) * grad


def make_directive(layout: LayoutSpec, nu_prime: float,
                   sigma_t: float) -> InjectionDirective:
    """Injection directive boosting every target token inside its box."""
    return InjectionDirective(layout.mask, nu_prime, sigma_t)


# ---------------------------------------------------------------------------
# reference methods


def boxdiff_alpha(t: float, T: int) -> float:
    """Linearly decaying pre-step rate: 20 at t = T down to 10 at t = 0."""
    return 10.0 + 10.0 * float(t) / float(T)


def chen_alpha(sigma_t: float) -> float:
    """Variance-proportional pre-step rate: 30 * sigma_t^2."""
    return 30.0 * float(sigma_t) ** 2


def prestep_update(z: np.ndarray, grad: np.ndarray, alpha: float
                   ) -> np.ndarray:
    """Latent update z - alpha * grad applied before the sampler step."""
    return z - float(alpha) * grad


def multidiffusion_fuse(candidates: np.ndarray, masks: np.ndarray
                        ) -> np.ndarray:
    """Per-pixel mask-weighted average of candidate latents.

    candidates: (c, H, W, 3) per-region next-step proposals.
    masks:      (c, H, W) non-negative weights; every pixel must be covered
                by at least one candidate.

    This is the closed-form minimiser of
    sum_j || masks_j * (z - candidates_j) ||^2 over z, solved per pixel.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if masks.min() < 0:
        raise ValueError("fusion masks must be non-negative")
    if candidates.shape[0] != masks.shape[0]:
        raise ValueError("one mask per candidate required")
    total = masks.sum(axis=0)
    if np.any(total <= 0):
        raise ValueError("fusion masks leave some pixels uncovered")
    weighted = (masks[..., None] * candidates).sum(axis=0)
    return weighted / total[..., None]


def background_mask(layout: LayoutSpec) -> np.ndarray:
    """Pixels covered by no target box (the null-prompt fusion region)."""
    covered = layout.pixel_masks.max(axis=0) if len(layout.pixel_masks) \
        else np.zeros((layout.image_size, layout.image_size))
    return (covered == 0.0).astype(np.float64)


def candidate_token_sets(layout: LayoutSpec) -> list[np.ndarray]:
    """One single-object conditioning sequence per target.

    Scene sequences are [background, (color, shape) per object, padding],
    so target j's color sits immediately before its shape token.
    """
    k = layout.tokens.shape[0]
    out = []
    for j in layout.target_indices:
        seq = np.full(k, VOCAB.pad_id, dtype=np.int64)
        seq[0] = layout.tokens[0]
        seq[1] = layout.tokens[j - 1]
        seq[2] = layout.tokens[j]
        out.append(seq)
    return out


__all__ = [
    "METHODS", "WINDOW_MODES", "GuidanceConfig", "GradientResult",
    "LayoutSpec", "null_tokens", "TOKENS_PER_SCENE",
    "uses_injection", "uses_loss_guidance", "uses_prestep_update",
    "loss_window_active", "inject_window_active", "layout_loss",
    "loss_gradient", "guided_eps", "make_directive", "boxdiff_alpha",
    "chen_alpha", "prestep_update", "multidiffusion_fuse",
    "background_mask", "candidate_token_sets",
]
