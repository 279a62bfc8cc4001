import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from diffuse.errors import DimensionError, ParameterError
from diffuse.schedule import linear_schedule, q_sample
from oracles import alpha_hats_loop


def test_beta_endpoints(sched):
    assert sched.betas[0] == pytest.approx(1e-4, rel=1e-12)
    assert sched.betas[999] == pytest.approx(0.02, rel=1e-12)
    assert sched.T == 1000


@given(st.integers(2, 400), st.floats(1e-5, 0.05), st.floats(0, 0.4))
def test_first_alpha_hat_is_one_minus_beta_first(T, b0, spread):
    s = linear_schedule(T, b0, b0 + spread * (0.99 - b0))
    assert s.alpha_hats[0] == 1.0 - b0


def test_final_alpha_hat_small(sched):
    # log alpha_hat_T = sum log(1 - beta) ~ -sum beta = -10.05, plus -sum beta^2 / 2 at second order
    betas = np.linspace(1e-4, 0.02, 1000)
    log_final = math.fsum(math.log1p(-b) for b in betas)
    assert math.fsum(betas) == pytest.approx(10.05, rel=1e-12)
    assert log_final == pytest.approx(-10.05 - math.fsum(betas**2) / 2, abs=1e-3)
    assert sched.alpha_hats[-1] < 1e-4
    assert sched.alpha_hats[-1] == pytest.approx(math.exp(log_final), rel=1e-9)


def test_tables_match_loop_oracle(sched):
    np.testing.assert_allclose(sched.alpha_hats, alpha_hats_loop(1000, 1e-4, 0.02), rtol=1e-12)
    np.testing.assert_allclose(sched.alphas, 1.0 - sched.betas, rtol=0, atol=0)


def test_schedule_invariants(sched):
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert np.all(np.diff(sched.betas) >= 0)
    assert np.all(np.diff(sched.alpha_hats) < 0)
    assert np.all((sched.alpha_hats > 0) & (sched.alpha_hats < 1))


def test_ddpm_sigma_formula(sched):
    ah = sched.alpha_hats
    prev = np.concatenate([[1.0], ah[:-1]])
    expected = np.sqrt((1 - prev) / (1 - ah)) * np.sqrt(1 - ah / prev)
    np.testing.assert_allclose(sched.ddpm_sigmas, expected, rtol=1e-12)
    assert sched.ddpm_sigmas[0] == 0.0


def test_posterior_variance_identity(sched):
    # sigma_t^2 equals the DDPM posterior variance (1 - a_{t-1}) / (1 - a_t) * beta_t
    ah = sched.alpha_hats
    t = np.arange(1, sched.T)
    beta_tilde = (1 - ah[t - 1]) / (1 - ah[t]) * sched.betas[t]
    np.testing.assert_allclose(sched.ddpm_sigmas[t] ** 2, beta_tilde, rtol=1e-10)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedules_rejected(args):
    with pytest.raises(ParameterError):
        linear_schedule(*args)


def test_q_sample_noise_free_branch(sched, rng):
    x0 = rng.normal(size=(4, 4, 2))
    for t in (0, 17, 999):
        out = q_sample(x0, t, np.zeros_like(x0), sched)
        assert np.array_equal(out, np.sqrt(sched.alpha_hats[t]) * x0)


def test_q_sample_signal_free_branch(sched, rng):
    e = rng.normal(size=(3, 5, 1))
    out = q_sample(np.zeros_like(e), 250, e, sched)
    assert np.array_equal(out, np.sqrt(1 - sched.alpha_hats[250]) * e)


@pytest.mark.parametrize("t", [0, 300, 999])
def test_q_sample_preserves_unit_variance(sched, t):
    g = np.random.default_rng(t)
    n = 100_000
    x0 = g.standard_normal((n, 1, 1))
    out = q_sample(x0, t, g.standard_normal((n, 1, 1)), sched)
    # var of the sample variance for a normal population is 2 / (n - 1)
    assert abs(out.var(ddof=1) - 1.0) < 3 * math.sqrt(2 / (n - 1))


def test_q_sample_final_step_is_standard_normal(sched):
    g = np.random.default_rng(7)
    x0 = g.uniform(0, 1, (10_000, 1, 1))
    out = q_sample(x0, sched.T - 1, g.standard_normal(x0.shape), sched)
    assert stats.kstest(out.ravel(), "norm").pvalue > 0.01


def test_q_sample_errors(sched):
    with pytest.raises(DimensionError):
        q_sample(np.zeros((2, 2, 1)), 3, np.zeros((2, 3, 1)), sched)
    with pytest.raises(ParameterError):
        q_sample(np.zeros((2, 2, 1)), 1000, np.zeros((2, 2, 1)), sched)


def test_latent_index_boundaries(sched):
    assert sched.latent_index(0) == 0
    assert sched.latent_index(500) == 500
    assert sched.latent_index(1000) == 999
    with pytest.raises(ParameterError):
        sched.latent_index(1001)
    with pytest.raises(ParameterError):
        sched.latent_index(-1)
