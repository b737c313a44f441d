"""Tests for the diffusion schedule tables and identities.

Expected values are derived independently: small products by hand, the
marginal statistics by Monte-Carlo simulation of the stepwise chain.
"""

import numpy as np
import pytest

from ilgd.schedules import (
    NoiseSchedule, forward_marginal, score_from_eps, tweedie_denoise,
    posterior_mean, posterior_variance, sub_schedule,
)


def test_small_table_by_hand():
    # T=2, beta = (0.1, 0.2): alpha_bar = (1, 0.9, 0.72)
    s = NoiseSchedule(np.array([0.0, 0.1, 0.2]))
    np.testing.assert_allclose(s.alpha_bars, [1.0, 0.9, 0.72], atol=1e-15)
    np.testing.assert_allclose(s.alphas[1:], [0.9, 0.8], atol=1e-15)
    assert s.T == 2


def test_default_schedule_properties():
    s = NoiseSchedule.linear()
    assert s.T == 1000
    assert s.betas[1] == 1e-4 and s.betas[-1] == 0.02
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 1e-4  # terminal marginal is near the prior
    assert abs(s.alpha_bars[0] - 1.0) == 0


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.0, 0.5, 1.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 0.5]))


def test_posterior_mean_coefficients_by_hand():
    # beta_t = 0.1, ab_{t-1} = 0.9, ab_t = 0.81:
    # c0 = sqrt(0.9)*0.1/0.19, c1 = sqrt(0.9)*(1-0.9)/0.19, both 0.4993069989739546
    s = NoiseSchedule(np.array([0.0, 0.1, 0.1]))
    np.testing.assert_allclose(s.alpha_bars, [1.0, 0.9, 0.81], atol=1e-15)
    got = posterior_mean(np.array(1.0), np.array(1.0), t=2, schedule=s)
    np.testing.assert_allclose(got, 2 * 0.4993069989739546, atol=1e-12)
    # asymmetric inputs exercise both coefficients separately
    got2 = posterior_mean(np.array(1.0), np.array(0.0), t=2, schedule=s)
    np.testing.assert_allclose(got2, 0.4993069989739546, atol=1e-12)


def test_posterior_mean_at_t1_is_x0_exactly():
    s = NoiseSchedule.linear(T=10)
    x0 = np.random.default_rng(0).normal(size=(4, 4))
    x1 = np.random.default_rng(1).normal(size=(4, 4))
    got = posterior_mean(x0, x1, t=1, schedule=s)
    np.testing.assert_allclose(got, x0, atol=1e-14)


def test_strided_posterior_reduces_to_adjacent():
    s = NoiseSchedule.linear(T=100)
    r = np.random.default_rng(2)
    x0, xt = r.normal(size=(3, 3)), r.normal(size=(3, 3))
    np.testing.assert_allclose(
        posterior_mean(x0, xt, t=50, schedule=s),
        posterior_mean(x0, xt, t=50, schedule=s, t_prev=49), atol=0)
    assert posterior_variance(50, s) == posterior_variance(50, s, t_prev=49)
    # strided variance matches the direct formula
    ab_t, ab_p = s.alpha_bars[50], s.alpha_bars[30]
    want = (1 - ab_t / ab_p) * (1 - ab_p) / (1 - ab_t)
    np.testing.assert_allclose(posterior_variance(50, s, t_prev=30), want,
                               atol=1e-15)


def test_tweedie_inverts_forward_marginal_exactly():
    # With the exact noise as score input, x0 is recovered algebraically.
    s = NoiseSchedule.linear(T=50)
    r = np.random.default_rng(3)
    x0 = r.random(size=(8, 8, 3))
    eps = r.normal(size=x0.shape)
    for t in (1, 17, 50):
        x_t = forward_marginal(x0, t, s, eps)
        score = score_from_eps(eps, t, s)
        np.testing.assert_allclose(tweedie_denoise(x_t, score, t, s), x0,
                                   atol=1e-10)


def test_score_from_eps_scaling():
    s = NoiseSchedule.linear(T=10)
    eps = np.ones((2, 2))
    got = score_from_eps(eps, 5, s)
    np.testing.assert_allclose(got, -1.0 / s.sigma(5) * eps, atol=0)


def test_forward_marginal_batch_timesteps():
    s = NoiseSchedule.linear(T=100)
    r = np.random.default_rng(4)
    x0 = r.random(size=(5, 4, 4, 3))
    eps = r.normal(size=x0.shape)
    t = np.array([1, 10, 50, 99, 100])
    batched = forward_marginal(x0, t, s, eps)
    for i, ti in enumerate(t):
        np.testing.assert_allclose(
            batched[i], forward_marginal(x0[i], int(ti), s, eps[i]), atol=0)


def test_marginal_matches_stepwise_chain_monte_carlo():
    # Simulate the stepwise chain x_t = sqrt(1-b_t) x_{t-1} + sqrt(b_t) xi
    # and compare moments with the closed form at t = T/2.
    s = NoiseSchedule.linear(T=200)
    rng = np.random.default_rng(5)
    n = 20000
    x0 = 1.0
    x = np.full(n, x0)
    t_stop = 100
    for t in range(1, t_stop + 1):
        x = np.sqrt(1 - s.betas[t]) * x + np.sqrt(s.betas[t]) * rng.normal(size=n)
    want_mean = np.sqrt(s.alpha_bars[t_stop]) * x0
    want_var = 1 - s.alpha_bars[t_stop]
    se_mean = np.sqrt(want_var / n)
    assert abs(x.mean() - want_mean) < 4 * se_mean
    assert abs(x.var() - want_var) < 4 * want_var * np.sqrt(2.0 / n)


def test_sub_schedule_endpoints_and_monotonicity():
    ts = sub_schedule(1000, 50)
    assert ts.shape == (50,)
    assert ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)
    ts2 = sub_schedule(10, 10)
    np.testing.assert_array_equal(ts2, np.arange(10, 0, -1))
    with pytest.raises(ValueError):
        sub_schedule(1000, 1)
