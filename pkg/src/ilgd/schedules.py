"""Variance-preserving diffusion noise schedules and the table identities.

Timesteps are integers t in 1..T.  Tables are stored with a leading sentinel
so they can be indexed by t directly: ``alpha_bars[0] == 1`` by convention
and ``betas[0] == 0`` is never used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _coef(c, like_ndim: int):
    """Reshape a per-sample coefficient for broadcasting against data."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (like_ndim - c.ndim))


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete VP diffusion tables.

    Attributes:
        betas: (T+1,) with betas[0] = 0 sentinel and 0 < betas[t] < 1.
        alphas: 1 - betas.
        alpha_bars: (T+1,) cumulative products, alpha_bars[0] = 1.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] < 2:
            raise ValueError("NoiseSchedule: betas must be (T+1,) with T >= 1")
        if betas[0] != 0.0:
            raise ValueError("NoiseSchedule: betas[0] must be the 0 sentinel")
        if np.any(betas[1:] <= 0.0) or np.any(betas[1:] >= 1.0):
            raise ValueError("NoiseSchedule: betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars[0] = 1.0
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("NoiseSchedule: alpha_bar must strictly decrease")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        """The default linear beta ramp."""
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        return cls(betas)

    @property
    def T(self) -> int:
        return self.betas.shape[0] - 1

    def sigma(self, t):
        """Marginal noise scale sqrt(1 - alpha_bar_t)."""
        return np.sqrt(1.0 - self.alpha_bars[t])

    def beta_tilde(self, t):
        """Posterior variance beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)."""
        t = np.asarray(t)
        return (self.betas[t] * (1.0 - self.alpha_bars[t - 1])
                / (1.0 - self.alpha_bars[t]))

    def params(self) -> dict:
        """Constructor arguments for serialization."""
        return {"betas": self.betas[1:].tolist()}


def forward_marginal(x0: np.ndarray, t, schedule: NoiseSchedule,
                     eps: np.ndarray) -> np.ndarray:
    """Diffuse clean data directly to step t:  x_t = sqrt(ab_t) x0 + sigma_t eps.

    ``t`` may be a scalar or a leading-axis batch of timesteps.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ab = _coef(schedule.alpha_bars[t], x0.ndim)
    sig = _coef(schedule.sigma(t), x0.ndim)
    return np.sqrt(ab) * x0 + sig * eps


def score_from_eps(eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Convert a noise prediction to a score estimate: -eps / sigma_t."""
    eps = np.asarray(eps, dtype=np.float64)
    return -eps / _coef(schedule.sigma(t), eps.ndim)


def tweedie_denoise(x_t: np.ndarray, score: np.ndarray, t,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Posterior-mean estimate of x0 from a score at step t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = _coef(schedule.alpha_bars[t], x_t.ndim)
    return (x_t + (1.0 - ab) * score) / np.sqrt(ab)


def posterior_mean(x0_hat: np.ndarray, x_t: np.ndarray, t: int,
                   schedule: NoiseSchedule, t_prev: int | None = None
                   ) -> np.ndarray:
    """Mean of the reverse conditional q(x_{t_prev} | x_t, x0_hat).

    With the default ``t_prev = t - 1`` this is the textbook posterior mean;
    a smaller ``t_prev`` gives the strided generalization used when sampling
    on a sub-schedule (it reduces to the adjacent form when t_prev = t - 1).
    """
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"posterior_mean: need 0 <= t_prev < t, got {t_prev}, {t}")
    ab_t = schedule.alpha_bars[t]
    ab_p = schedule.alpha_bars[t_prev]
    alpha_step = ab_t / ab_p
    beta_step = 1.0 - alpha_step
    denom = 1.0 - ab_t
    c0 = np.sqrt(ab_p) * beta_step / denom
    c1 = np.sqrt(alpha_step) * (1.0 - ab_p) / denom
    return c0 * np.asarray(x0_hat, dtype=np.float64) \
        + c1 * np.asarray(x_t, dtype=np.float64)


def posterior_variance(t: int, schedule: NoiseSchedule,
                       t_prev: int | None = None) -> float:
    """Variance of q(x_{t_prev} | x_t, x0), strided like posterior_mean."""
    if t_prev is None:
        t_prev = t - 1
    ab_t = schedule.alpha_bars[t]
    ab_p = schedule.alpha_bars[t_prev]
    beta_step = 1.0 - ab_t / ab_p
    return float(beta_step * (1.0 - ab_p) / (1.0 - ab_t))


def sub_schedule(T: int, n: int) -> np.ndarray:
    """n timesteps from T down to 1, uniformly strided, endpoints included."""
    if not 2 <= n <= T:
        raise ValueError(f"sub_schedule: need 2 <= n <= T, got n={n}, T={T}")
    ts = np.unique(np.round(np.linspace(T, 1, n)).astype(np.int64))[::-1]
    if ts.shape[0] != n:
        raise ValueError(
            f"sub_schedule: {n} steps collide after rounding for T={T}")
    return ts
