"""Analytic low-dimensional testbed for the samplers and guidance rules.

A diagonal Gaussian mixture in one or two dimensions has closed-form
density, score, forward-diffused marginals, and (for linear losses)
guidance-tilted targets.  Samplers run against these exact quantities, so
integrator and bias errors can be measured without any learned model in
the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of diagonal Gaussians in d <= 2 dimensions.

    weights:   (m,) positive, summing to one.
    means:     (m, d).
    variances: (m, d) per-coordinate variances, all positive.
    """
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or w.shape[0] != mu.shape[0]:
            raise ValueError("mixture pieces must agree in count and dim")
        if not 1 <= mu.shape[1] <= 2:
            raise ValueError("the testbed covers 1 or 2 dimensions")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, variance) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        variance = np.atleast_1d(np.asarray(variance, dtype=np.float64))
        return cls(np.array([1.0]), mean[None], variance[None])

    def _points(self, x) -> tuple[np.ndarray, bool]:
        """Coerce to (..., d); 1-D mixtures also accept bare (...) arrays."""
        x = np.asarray(x, dtype=np.float64)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            return x[..., None], True
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ValueError(f"points must have dim {self.dim}")
        return x, False

    def _component_logpdf(self, x: np.ndarray) -> np.ndarray:
        """(..., m) log densities of each component at x (..., d)."""
        diff = x[..., None, :] - self.means          # (..., m, d)
        quad = (diff ** 2 / self.variances).sum(axis=-1)
        norm = (np.log(2.0 * np.pi * self.variances)).sum(axis=-1)
        return -0.5 * (quad + norm)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        pts, _ = self._points(x)
        lp = self._component_logpdf(pts) + np.log(self.weights)
        peak = lp.max(axis=-1, keepdims=True)
        return (peak + np.log(np.exp(lp - peak).sum(axis=-1,
                                                    keepdims=True)))[..., 0]

    def density(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of log density, shape like x."""
        pts, squeezed = self._points(x)
        lp = self._component_logpdf(pts) + np.log(self.weights)
        peak = lp.max(axis=-1, keepdims=True)
        resp = np.exp(lp - peak)
        resp /= resp.sum(axis=-1, keepdims=True)     # (..., m)
        comp_score = -(pts[..., None, :] - self.means) / self.variances
        out = (resp[..., None] * comp_score).sum(axis=-2)
        return out[..., 0] if squeezed else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def diffuse(self, alpha_bar: float) -> "GaussianMixture":
        """Marginal after variance-preserving noising to level alpha_bar.

        x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps keeps each component
        Gaussian: means scale by sqrt(abar), variances become
        abar * v + (1 - abar).
        """
        ab = float(alpha_bar)
        if not 0.0 < ab <= 1.0:
            raise ValueError("alpha_bar must be in (0, 1]")
        return GaussianMixture(self.weights, np.sqrt(ab) * self.means,
                               ab * self.variances + (1.0 - ab))

    def mean(self) -> np.ndarray:
        return (self.weights[:, None] * self.means).sum(axis=0)

    def variance(self) -> np.ndarray:
        """Per-coordinate total variance (law of total variance)."""
        mu = self.mean()
        second = (self.weights[:, None]
                  * (self.variances + self.means ** 2)).sum(axis=0)
        return second - mu ** 2


def tilted_density(density_fn, xs: np.ndarray, eta: float,
                   loss_fn=None) -> np.ndarray:
    """Grid-normalised density proportional to p(x) * exp(-eta * loss(x)).

    One-dimensional: ``xs`` is an increasing grid, ``density_fn`` maps grid
    points to unnormalised densities, and the default loss is the identity
    (a constant rightward pull, the simplest guidance surrogate).  The
    result integrates to one over the grid by the trapezoid rule.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 1 or xs.shape[0] < 2 or np.any(np.diff(xs) <= 0):
        raise ValueError("xs must be a 1-D increasing grid")
    loss = loss_fn(xs) if loss_fn is not None else xs
    vals = np.asarray(density_fn(xs), dtype=np.float64) \
        * np.exp(-float(eta) * loss)
    mass = np.trapezoid(vals, xs)
    if mass <= 0:
        raise ValueError("tilted density has no mass on the grid")
    return vals / mass


def tv_distance(samples: np.ndarray, density_fn, lo: float, hi: float,
                bins: int = 50) -> float:
    """Total variation between a sample set and a density, on a binning.

    Both the empirical distribution and the density (evaluated at bin
    centres) are reduced to ``bins`` equal-width cells over [lo, hi] and
    renormalised there; the distance is half the L1 gap.  Samples outside
    the range land in the nearest edge bin so mass is never dropped.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("tv_distance: no samples")
    if not lo < hi or bins < 2:
        raise ValueError("tv_distance: need lo < hi and bins >= 2")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.digitize(samples, edges) - 1, 0, bins - 1)
    p = np.bincount(idx, minlength=bins).astype(np.float64) / samples.size
    centres = (edges[:-1] + edges[1:]) / 2.0
    q = np.asarray(density_fn(centres), dtype=np.float64)
    if np.any(q < 0) or q.sum() <= 0:
        raise ValueError("tv_distance: density must be non-negative")
    q = q / q.sum()
    return 0.5 * float(np.abs(p - q).sum())


def flow_affine_map(start: GaussianMixture, u_from: float, u_to: float,
                    schedule_sigma, schedule_scale) -> tuple:
    """Exact affine solution of the flow for a single-Gaussian start.

    For a one-component mixture the probability-flow field is linear in x,
    so its solution between noise levels is the affine map matching the
    Gaussian marginals N(m(u), s(u)^2):
    x(u_to) = (s(u_to)/s(u_from)) * (x(u_from) - m(u_from)) + m(u_to).
    ``schedule_scale(u)`` returns the mean scaling sqrt(alpha_bar) and
    ``schedule_sigma(u)`` the additive noise scale at u.

    Returns (slope, intercept) with x(u_to) = slope * x(u_from) + intercept,
    per coordinate.
    """
    if start.weights.shape[0] != 1:
        raise ValueError("exact flow solution needs a single component")
    mu = start.means[0]
    var = start.variances[0]

    def marg(u):
        a = schedule_scale(u)
        s2 = a * a * var + schedule_sigma(u) ** 2
        return a * mu, np.sqrt(s2)

    m_to, s_to = marg(float(u_to))
    m_from, s_from = marg(float(u_from))
    slope = s_to / s_from
    intercept = m_to - slope * m_from
    return slope, intercept
