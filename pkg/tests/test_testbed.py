"""Tests for the analytic Gaussian-mixture testbed."""

import numpy as np
import pytest

from ilgd.testbed import (GaussianMixture, flow_affine_map, tilted_density,
                          tv_distance)


def two_component():
    return GaussianMixture(weights=[0.3, 0.7], means=[[-1.0], [2.0]],
                           variances=[[0.5], [1.5]])


def gauss_pdf(x, mean, var):
    return np.exp(-((x - mean) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)


# ---------------------------------------------------------------------------
# mixture basics


def test_mixture_validation():
    with pytest.raises(ValueError, match="sum to one"):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError, match="positive"):
        GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [[1.0], [-1.0]])
    with pytest.raises(ValueError, match="1 or 2 dimensions"):
        GaussianMixture([1.0], [[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]])
    with pytest.raises(ValueError, match="count and dim"):
        GaussianMixture([1.0], [[0.0, 0.0]], [[1.0]])


def test_density_integrates_to_one():
    m = two_component()
    xs = np.linspace(-12.0, 14.0, 4001)
    assert abs(np.trapezoid(m.density(xs), xs) - 1.0) < 1e-9


def test_density_matches_hand_formula():
    m = two_component()
    xs = np.linspace(-4.0, 6.0, 11)
    by_hand = 0.3 * gauss_pdf(xs, -1.0, 0.5) + 0.7 * gauss_pdf(xs, 2.0, 1.5)
    assert np.allclose(m.density(xs), by_hand, atol=1e-14)


def test_mean_and_variance_hand_case():
    m = two_component()
    assert abs(m.mean()[0] - 1.1) < 1e-14
    # E[x^2] = 0.3 (0.5 + 1) + 0.7 (1.5 + 4) = 4.3 ; var = 4.3 - 1.21
    assert abs(m.variance()[0] - 3.09) < 1e-14


@pytest.mark.parametrize("mix", [
    two_component(),
    GaussianMixture([0.4, 0.6], [[0.0, 1.0], [2.0, -1.0]],
                    [[0.5, 1.0], [1.5, 0.3]]),
])
def test_score_matches_log_density_gradient(mix):
    rng = np.random.default_rng(0)
    pts = rng.normal(0.5, 1.5, (20, mix.dim))
    h = 1e-6
    analytic = mix.score(pts)
    for axis in range(mix.dim):
        shift = np.zeros(mix.dim)
        shift[axis] = h
        fd = (mix.log_density(pts + shift) - mix.log_density(pts - shift)) \
            / (2 * h)
        assert np.abs(analytic[:, axis] - fd).max() < 1e-7


def test_sample_moments_match_closed_form():
    m = two_component()
    x = m.sample(np.random.default_rng(1), 200_000)[:, 0]
    se = np.sqrt(m.variance()[0] / x.size)
    assert abs(x.mean() - m.mean()[0]) < 4 * se
    assert abs(x.var() - m.variance()[0]) < 0.05


# ---------------------------------------------------------------------------
# forward diffusion of the mixture


def test_diffuse_validation_and_identity():
    m = two_component()
    with pytest.raises(ValueError, match="alpha_bar"):
        m.diffuse(0.0)
    with pytest.raises(ValueError, match="alpha_bar"):
        m.diffuse(1.5)
    same = m.diffuse(1.0)
    assert np.array_equal(same.means, m.means)
    assert np.array_equal(same.variances, m.variances)


def test_diffuse_matches_forward_noised_samples():
    m = two_component()
    ab = 0.35
    rng = np.random.default_rng(2)
    x0 = m.sample(rng, 200_000)[:, 0]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * rng.standard_normal(x0.size)
    noised = m.diffuse(ab)
    assert abs(xt.mean() - noised.mean()[0]) < 0.02
    assert abs(xt.var() - noised.variance()[0]) < 0.03
    assert tv_distance(xt, noised.density, -5.0, 6.0) < 0.02


def test_diffuse_limits_toward_standard_normal():
    m = two_component()
    far = m.diffuse(1e-6)
    assert abs(far.mean()[0]) < 1e-2
    assert abs(far.variance()[0] - 1.0) < 1e-2


# ---------------------------------------------------------------------------
# tilted targets and distances


def test_tilted_density_closed_form_shift():
    # exp(-eta x) tilts N(0, v) into N(-eta v, v): eta = 2, v = 0.25 -> -0.5
    m = GaussianMixture.single([0.0], [0.25])
    xs = np.linspace(-4.0, 4.0, 4001)
    tilted = tilted_density(m.density, xs, eta=2.0)
    closed = gauss_pdf(xs, -0.5, 0.25)
    closed /= np.trapezoid(closed, xs)
    assert np.abs(tilted - closed).max() < 1e-8
    assert abs(np.trapezoid(xs * tilted, xs) + 0.5) < 1e-4
    assert abs(np.trapezoid(tilted, xs) - 1.0) < 1e-12


def test_tilted_density_custom_loss():
    # exp(-0.5 x^2) tilts N(0, 1) into N(0, 0.5)
    m = GaussianMixture.single([0.0], [1.0])
    xs = np.linspace(-6.0, 6.0, 4001)
    tilted = tilted_density(m.density, xs, eta=0.5, loss_fn=lambda x: x ** 2)
    closed = gauss_pdf(xs, 0.0, 0.5)
    closed /= np.trapezoid(closed, xs)
    assert np.abs(tilted - closed).max() < 1e-8


def test_tilted_density_validation():
    m = GaussianMixture.single([0.0], [1.0])
    with pytest.raises(ValueError, match="increasing"):
        tilted_density(m.density, np.array([1.0, 0.5, 0.0]), 1.0)
    with pytest.raises(ValueError, match="no mass"):
        tilted_density(lambda x: np.zeros_like(x), np.linspace(0, 1, 5), 1.0)


def test_tv_distance_behaviour():
    m = GaussianMixture.single([0.0], [1.0])
    x = m.sample(np.random.default_rng(3), 100_000)[:, 0]
    assert tv_distance(x, m.density, -4.0, 4.0) < 0.03
    shifted = GaussianMixture.single([50.0], [1.0])
    assert tv_distance(x, shifted.density, -4.0, 60.0) > 0.95


def test_tv_distance_validation():
    with pytest.raises(ValueError, match="no samples"):
        tv_distance(np.array([]), lambda x: x, 0.0, 1.0)
    with pytest.raises(ValueError, match="lo < hi"):
        tv_distance(np.zeros(3), lambda x: x, 1.0, 0.0)
    with pytest.raises(ValueError, match="non-negative"):
        tv_distance(np.zeros(3), lambda x: -np.ones_like(x), -1.0, 1.0)


# ---------------------------------------------------------------------------
# exact flow transition map


def test_flow_map_needs_single_component():
    with pytest.raises(ValueError, match="single component"):
        flow_affine_map(two_component(), 1.0, 0.5, lambda u: u, lambda u: 1.0)


def test_flow_map_is_identity_at_equal_levels():
    start = GaussianMixture.single([1.5], [0.25])
    sig = lambda u: np.sqrt(1 - np.exp(-10 * u))  # noqa: E731
    scale = lambda u: np.exp(-5 * u)  # noqa: E731
    slope, intercept = flow_affine_map(start, 0.7, 0.7, sig, scale)
    assert np.allclose(slope, 1.0, atol=1e-14)
    assert np.allclose(intercept, 0.0, atol=1e-14)


def test_flow_map_transports_the_marginals():
    # the affine map must carry the Gaussian marginal at u_from onto the
    # marginal at u_to; diffuse() provides both marginals independently
    start = GaussianMixture.single([1.5], [0.25])

    def alpha_bar(u):
        return float(np.exp(-(0.1 * u + 9.95 * u * u)))

    sig = lambda u: np.sqrt(1 - alpha_bar(u))  # noqa: E731
    scale = lambda u: np.sqrt(alpha_bar(u))  # noqa: E731
    u_from, u_to = 1.0, 0.001
    slope, intercept = flow_affine_map(start, u_from, u_to, sig, scale)
    m_from = start.diffuse(alpha_bar(u_from))
    m_to = start.diffuse(alpha_bar(u_to))
    assert np.allclose(slope * m_from.mean() + intercept, m_to.mean(),
                       atol=1e-12)
    assert np.allclose(slope ** 2 * m_from.variance(), m_to.variance(),
                       atol=1e-12)
