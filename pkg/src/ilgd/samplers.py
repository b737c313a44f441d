"""Reverse-time samplers for the conditional denoiser.

Three integrators over the shared linear-beta schedule:

* ancestral sampling on a strided sub-schedule of the learned posterior,
* the probability-flow ODE with Euler or Heun (trapezoid) steps,
* annealed Langevin dynamics over a ladder of noise levels.

`sample` is the guided driver: it wires the layout-control mechanisms
(attention injection, attention-loss gradients, pre-step latent updates,
or per-region fusion) into each sampler iteration, records per-step
diagnostics, and maps the final latent back to an image in [0, 1].
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import LayoutSpec, null_tokens
from .denoiser import predict_eps
from .guidance import (GuidanceConfig, background_mask, boxdiff_alpha,
                       candidate_token_sets, chen_alpha, guided_eps,
                       inject_window_active, loss_gradient,
                       loss_window_active, make_directive,
                       multidiffusion_fuse, prestep_update, uses_injection,
                       uses_loss_guidance, uses_prestep_update)
from .schedules import (NoiseSchedule, posterior_mean, posterior_variance,
                        score_from_eps, sub_schedule, tweedie_denoise)

SAMPLERS = ("ddpm", "ode-euler", "ode-heun")


@dataclass(frozen=True)
class SamplerConfig:
    """Integrator settings for one sampling run."""
    sampler: str = "ode-heun"
    n_steps: int = 50
    cfg_weight: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; "
                             f"expected one of {SAMPLERS}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")


def cfg_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray,
            weight: float) -> np.ndarray:
    """Classifier-free combination (1 + w) * cond - w * uncond."""
    w = float(weight)
    return (1.0 + w) * np.asarray(eps_cond) - w * np.asarray(eps_uncond)


# ---------------------------------------------------------------------------
# ancestral sampling


def ddpm_step(z: np.ndarray, eps_hat: np.ndarray, t: int, s: int,
              schedule: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral step from t to s < t via the noise-predictor posterior.

    The denoised estimate x0_hat = (z - sigma_t * eps_hat) / sqrt(abar_t)
    parameterises the strided posterior q(z_s | z_t, x0_hat).  At s = 0 the
    posterior collapses onto x0_hat, so the step is exact and noiseless;
    for s > 0 a standard-normal ``noise`` draw is required.
    """
    z = np.asarray(z, dtype=np.float64)
    x0_hat = (z - schedule.sigma(t) * np.asarray(eps_hat)) \
        / math.sqrt(schedule.alpha_bars[t])
    mean = posterior_mean(x0_hat, z, t, schedule, t_prev=s)
    if s == 0:
        return mean
    if noise is None:
        raise ValueError("ddpm_step: noise draw required for s > 0")
    return mean + math.sqrt(posterior_variance(t, schedule, t_prev=s)) * noise


# ---------------------------------------------------------------------------
# probability-flow ODE

# Continuous-time counterpart of the linear discrete schedule: the rate at
# fraction u = t / T matches T * beta_t at the endpoints (0.1 at u = 0,
# 20 at u = 1 for the default schedule).


def continuous_beta(u: float) -> float:
    return 0.1 + 19.9 * float(u)


def continuous_alpha_bar(u: float) -> float:
    """exp(-integral of the continuous rate from 0 to u)."""
    u = float(u)
    return math.exp(-(0.1 * u + 9.95 * u * u))


def continuous_sigma(u: float) -> float:
    return math.sqrt(1.0 - continuous_alpha_bar(u))


def ode_drift(z: np.ndarray, u: float, eps_hat: np.ndarray,
              sigma: float) -> np.ndarray:
    """Reverse-time flow field -(1/2) beta(u) (z - eps_hat / sigma).

    This is drift minus half the squared diffusion rate times the score,
    with the score expressed through the noise prediction as -eps / sigma.
    """
    return -0.5 * continuous_beta(u) * (z - np.asarray(eps_hat) / float(sigma))


def ode_solve(eps_fn, z: np.ndarray, times: np.ndarray, T: int,
              kind: str = "heun", sigma_of=None, pre_step=None) -> np.ndarray:
    """Integrate the flow along a strictly decreasing time grid.

    eps_fn(z, t, i) supplies the noise prediction at time t (float, in
    discrete-schedule units) during 1-based iteration i; sigma_of(t) maps a
    time to the noise scale used to turn predictions into scores (defaults
    to the continuous-schedule value); pre_step(z, t, i), when given, may
    replace the state at the start of each iteration.

    "euler" takes one field evaluation per step; "heun" averages the field
    at both endpoints (trapezoid) for second-order accuracy.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.shape[0] < 2:
        raise ValueError("ode_solve: need at least two time points")
    if np.any(np.diff(times) >= 0):
        raise ValueError("ode_solve: times must be strictly decreasing")
    if times[0] > T or times[-1] < 0:
        raise ValueError(f"ode_solve: times must lie in [0, {T}]")
    if kind not in ("euler", "heun"):
        raise ValueError(f"ode_solve: unknown kind {kind!r}")
    if sigma_of is None:
        sigma_of = lambda t: continuous_sigma(t / T)  # noqa: E731

    z = np.asarray(z, dtype=np.float64).copy()
    for k in range(times.shape[0] - 1):
        i = k + 1
        t0, t1 = float(times[k]), float(times[k + 1])
        u0, u1 = t0 / T, t1 / T
        du = u1 - u0
        if pre_step is not None:
            z = pre_step(z, t0, i)
        f0 = ode_drift(z, u0, eps_fn(z, t0, i), sigma_of(t0))
        if kind == "euler":
            z = z + du * f0
        else:
            z_pred = z + du * f0
            f1 = ode_drift(z_pred, u1, eps_fn(z_pred, t1, i), sigma_of(t1))
            z = z + 0.5 * du * (f0 + f1)
    return z


# ---------------------------------------------------------------------------
# annealed Langevin dynamics


def annealed_langevin(score_fn, x_init: np.ndarray, sigmas,
                      rng: np.random.Generator, n_steps: int = 100,
                      delta_scale: float = 0.1) -> np.ndarray:
    """Langevin chains over a descending noise ladder.

    At each level sigma the chain runs ``n_steps`` updates
    x += delta * score_fn(x, sigma) + sqrt(2 delta) * xi with step size
    delta = delta_scale * sigma^2.  Vectorised over leading axes of
    ``x_init``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0):
        raise ValueError("annealed_langevin: noise levels must be positive")
    x = np.asarray(x_init, dtype=np.float64).copy()
    for sigma in sigmas:
        delta = delta_scale * float(sigma) ** 2
        step = math.sqrt(2.0 * delta)
        for _ in range(n_steps):
            x += delta * score_fn(x, float(sigma)) \
                + step * rng.standard_normal(x.shape)
    return x


# ---------------------------------------------------------------------------
# guided sampling driver


@dataclass
class SampleResult:
    """Final image plus per-iteration diagnostics of one sampling run."""
    image: np.ndarray            # (32, 32, 3) in [0, 1]
    latent: np.ndarray           # final denoised latent (x0 scale, [-1, 1]+)
    steps: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def _config_echo(gcfg: GuidanceConfig, scfg: SamplerConfig,
                 seed: int) -> dict:
    return {"guidance": dataclasses.asdict(gcfg),
            "sampler": dataclasses.asdict(scfg), "seed": seed}


def _require_finite(arr: np.ndarray, what: str, i: int, t: float,
                    config: dict) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(
            f"non-finite {what} at iteration {i} (t={t}); aborting. "
            f"config: {json.dumps(config, sort_keys=True)}")


def _injection_margin(pred, mask: np.ndarray) -> float | None:
    """Smallest boosted-minus-plain attention gap on masked entries.

    Boosting masked logits can only lower attention elsewhere in the row,
    so the monotonicity guarantee is over the masked entries alone.
    """
    if not pred.uninjected_maps or pred.maps is None:
        return None
    sel = np.asarray(mask) == 1.0
    if not sel.any():
        return None
    margins = []
    for injected, plain in zip(pred.maps, pred.uninjected_maps):
        margins.append(float((injected.data - plain)[sel].min()))
    return min(margins)


def sample(weights: dict[str, np.ndarray], schedule: NoiseSchedule,
           layout: LayoutSpec, gcfg: GuidanceConfig | None = None,
           scfg: SamplerConfig | None = None, *,
           trained_p_uncond: float = 0.1) -> SampleResult:
    """Draw one guided sample for a layout.

    The guidance seed takes precedence over the sampler seed when set.
    Classifier-free weighting is rejected for models trained without
    conditioning dropout (they never saw the null sequence).
    """
    gcfg = gcfg or GuidanceConfig()
    scfg = scfg or SamplerConfig()
    if trained_p_uncond == 0 and scfg.cfg_weight != 0:
        raise ValueError(
            "cfg_weight != 0 requires a model trained with conditioning "
            "dropout (trained_p_uncond > 0)")

    seed = gcfg.seed if gcfg.seed is not None else scfg.seed
    config = _config_echo(gcfg, scfg, seed)
    rng = np.random.default_rng([seed, 11])
    z = rng.standard_normal((32, 32, 3))

    method = gcfg.method
    n = scfg.n_steps
    cond = np.asarray(layout.tokens, dtype=np.int64)
    uncond = null_tokens(cond.shape[0])
    steps: list[dict] = []

    def pre_step(z, t, i):
        """Pre-step latent update for the schedule-based reference methods."""
        if not (uses_prestep_update(method)
                and loss_window_active(gcfg, i, n)):
            return z
        t_int = int(round(t))
        sigma_t = float(schedule.sigma(t_int))
        gres = loss_gradient(weights, z, t_int, cond, layout)
        alpha = boxdiff_alpha(t_int, schedule.T) \
            if method == "boxdiff-schedule" else chen_alpha(sigma_t)
        z2 = prestep_update(z, gres.grad, alpha)
        steps.append({"i": i, "t": t_int, "kind": "prestep",
                      "loss": gres.value, "alpha": alpha})
        _require_finite(z2, "latent", i, t, config)
        return z2

    def eps_fn(z, t, i):
        """Guided noise prediction at (z, t) during iteration i."""
        t_int = int(round(t))
        sigma_t = float(schedule.sigma(t_int))
        inject = uses_injection(method) and inject_window_active(gcfg, i, n)
        lossy = uses_loss_guidance(method) and loss_window_active(gcfg, i, n)

        gres = loss_gradient(weights, z, t_int, cond, layout) if lossy \
            else None
        diag = {"i": i, "t": t_int, "kind": "eval",
                "loss": gres.value if gres else None,
                "nu": None, "min_margin": None}
        if inject:
            directive = make_directive(layout, gcfg.nu_prime, sigma_t)
            pred = predict_eps(weights, z, t_int, cond,
                               record_attention=True, directive=directive)
            eps_c = pred.eps
            diag["nu"] = list(pred.nu_values)
            diag["min_margin"] = _injection_margin(pred, layout.mask)
        elif gres is not None:
            eps_c = gres.prediction.eps     # reuse the recorded pass
        else:
            eps_c = predict_eps(weights, z, t_int, cond).eps
        eps_u = predict_eps(weights, z, t_int, uncond).eps
        eps = cfg_eps(eps_c, eps_u, scfg.cfg_weight)
        if gres is not None and gcfg.eta != 0 and sigma_t != 0:
            eps = guided_eps(eps, gres.grad, gcfg.eta, sigma_t)
        steps.append(diag)
        _require_finite(eps, "noise prediction", i, t, config)
        return eps

    if method == "multidiffusion":
        x0 = _multidiffusion_run(weights, schedule, layout, scfg, z, rng,
                                 steps, config)
    elif scfg.sampler == "ddpm":
        ts = sub_schedule(schedule.T, scfg.n_steps)
        for k in range(ts.shape[0]):
            t = int(ts[k])
            s = int(ts[k + 1]) if k + 1 < ts.shape[0] else 0
            i = k + 1
            z = pre_step(z, float(t), i)
            eps = eps_fn(z, float(t), i)
            noise = rng.standard_normal(z.shape) if s > 0 else None
            z = ddpm_step(z, eps, t, s, schedule, noise)
            _require_finite(z, "latent", i, float(t), config)
        x0 = z
    else:
        kind = "euler" if scfg.sampler == "ode-euler" else "heun"
        times = np.linspace(schedule.T, 1.0, scfg.n_steps + 1)
        z = ode_solve(eps_fn, z, times, schedule.T, kind=kind,
                      sigma_of=lambda t: float(schedule.sigma(int(round(t)))),
                      pre_step=pre_step)
        eps_last = eps_fn(z, 1.0, scfg.n_steps + 1)
        x0 = tweedie_denoise(z, score_from_eps(eps_last, 1, schedule), 1,
                             schedule)
    _require_finite(x0, "denoised latent", scfg.n_steps, 0.0, config)
    image = np.clip((x0 + 1.0) / 2.0, 0.0, 1.0)
    return SampleResult(image=image, latent=x0, steps=steps, config=config)


def _multidiffusion_run(weights, schedule, layout, scfg: SamplerConfig,
                        z: np.ndarray, rng: np.random.Generator,
                        steps: list[dict], config: dict) -> np.ndarray:
    """Per-region candidate steps fused under pixel masks each iteration.

    Every target contributes a candidate conditioned on its single-object
    sequence; uncovered pixels follow a null-prompt background candidate.
    All candidates of one iteration share the ancestral noise draw so the
    fusion averages like with like.
    """
    token_sets = candidate_token_sets(layout)
    masks = np.concatenate([layout.pixel_masks,
                            background_mask(layout)[None]], axis=0)
    uncond = null_tokens(layout.tokens.shape[0])
    w = scfg.cfg_weight

    def candidate_eps(zc, t_int, tokens):
        eps_u = predict_eps(weights, zc, t_int, uncond).eps
        if tokens is None:
            return eps_u
        eps_c = predict_eps(weights, zc, t_int, tokens).eps
        return cfg_eps(eps_c, eps_u, w)

    conds = token_sets + [None]          # None = background (null prompt)

    if scfg.sampler == "ddpm":
        ts = sub_schedule(schedule.T, scfg.n_steps)
        for k in range(ts.shape[0]):
            t = int(ts[k])
            s = int(ts[k + 1]) if k + 1 < ts.shape[0] else 0
            noise = rng.standard_normal(z.shape) if s > 0 else None
            cands = [ddpm_step(z, candidate_eps(z, t, tok), t, s, schedule,
                               noise) for tok in conds]
            z = multidiffusion_fuse(np.stack(cands), masks)
            steps.append({"i": k + 1, "t": t, "kind": "fuse",
                          "candidates": len(cands)})
            _require_finite(z, "fused latent", k + 1, float(t), config)
        return z

    kind = "euler" if scfg.sampler == "ode-euler" else "heun"
    times = np.linspace(schedule.T, 1.0, scfg.n_steps + 1)
    sigma_of = lambda t: float(schedule.sigma(int(round(t))))  # noqa: E731
    for k in range(scfg.n_steps):
        t0, t1 = float(times[k]), float(times[k + 1])
        u0, u1 = t0 / schedule.T, t1 / schedule.T
        du = u1 - u0
        cands = []
        for tok in conds:
            f0 = ode_drift(z, u0, candidate_eps(z, int(round(t0)), tok),
                           sigma_of(t0))
            if kind == "euler":
                cands.append(z + du * f0)
            else:
                z_pred = z + du * f0
                f1 = ode_drift(z_pred, u1,
                               candidate_eps(z_pred, int(round(t1)), tok),
                               sigma_of(t1))
                cands.append(z + 0.5 * du * (f0 + f1))
        z = multidiffusion_fuse(np.stack(cands), masks)
        steps.append({"i": k + 1, "t": int(round(t0)), "kind": "fuse",
                      "candidates": len(cands)})
        _require_finite(z, "fused latent", k + 1, t0, config)
    eps_last = candidate_eps(z, 1, layout.tokens)
    return tweedie_denoise(z, score_from_eps(eps_last, 1, schedule), 1,
                           schedule)
