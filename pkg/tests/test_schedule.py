import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmdiff.measures import permutation_test
from fmdiff.rng import stream
from fmdiff.schedule import VarianceSchedule, ddpm_posterior_step, make_linear_schedule, q_sample, renoise

# product of (1 - beta) over the 1000-step linear schedule, 60-digit decimal arithmetic
ALPHA_BAR_1000 = 4.03582976537568331481763516155414e-05
# same for the default 64-step schedule (1e-4 .. 0.15)
ALPHA_BAR_64 = 6.31134030194689552013064785230306e-03


def test_single_step():
    s = VarianceSchedule.from_betas([0.5])
    np.testing.assert_array_equal(s.alpha_bar, [1, 0.5])
    np.testing.assert_allclose(s.C, [1, np.sqrt(0.5)], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(s.beta_hat, [0, 0.5])


def test_long_schedule_against_decimal_product():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar[1000] - ALPHA_BAR_1000) < 1e-10


def test_default_schedule_ends_nearly_pure_noise():
    s = make_linear_schedule(64)
    assert abs(s.alpha_bar[64] - ALPHA_BAR_64) < 1e-12
    assert s.alpha_bar[64] < 1e-2


def test_invariants():
    s = make_linear_schedule(64)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    np.testing.assert_allclose(s.C**2 + s.beta_hat, 1.0, atol=1e-12)
    assert s.beta_hat[0] == 0 and s.C[0] == 1


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_linear_schedule(0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.2, 0.1)
    s = make_linear_schedule(8)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(2), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 9, np.zeros(2), s)
    with pytest.raises(ValueError):
        renoise(np.zeros(2), 8, np.zeros(2), s)


def test_q_sample_zero_noise_limit():
    s = VarianceSchedule.from_betas([1e-15])
    x0 = np.array([0.3, -1.2])
    np.testing.assert_allclose(q_sample(x0, 1, np.ones(2), s).data, x0, atol=1e-7)


def test_q_sample_pure_noise_branch():
    s = make_linear_schedule(16)
    n = np.array([1.0, -2.0])
    np.testing.assert_allclose(q_sample(np.zeros(2), 7, n, s).data, np.sqrt(1 - s.alpha_bar[7]) * n, rtol=1e-15)


def test_q_sample_variance_monte_carlo():
    s = make_linear_schedule(64)
    t = 20
    out = q_sample(np.zeros(100_000), t, stream(1).standard_normal(100_000), s).data
    assert abs(out.var() / (1 - s.alpha_bar[t]) - 1) < 0.02


def test_renoise_final_step_is_exact():
    s = make_linear_schedule(64)
    O = np.array([0.1, 0.7, -3.0])
    assert np.array_equal(renoise(O, 0, stream(0).standard_normal(3), s).data, O)


def test_renoise_zero_estimate():
    s = make_linear_schedule(64)
    n = np.array([0.5, -1.0])
    np.testing.assert_allclose(renoise(np.zeros(2), 11, n, s).data, np.sqrt(s.beta_hat[11]) * n, rtol=1e-15)


@pytest.mark.parametrize("t", [1, 32, 63])
def test_renoise_matches_forward_marginal(t):
    s = make_linear_schedule(64)
    x0 = np.full(10_000, 0.8)
    a = renoise(x0, t, stream(2, "renoise", t).standard_normal(10_000), s).data
    b = q_sample(x0, t, stream(2, "q", t).standard_normal(10_000), s).data
    assert not permutation_test(a, b, "energy", n_perm=200, alpha=0.01, seed=t).reject


def _reverse_with_exact_denoiser(sd, variance, n=100_000, m=0.5):
    """Ancestral sampling of N(m, sd^2) using the closed-form E[x0 | x_t]."""
    sched = make_linear_schedule(64)
    rng = stream(0, "reverse", sd, variance)
    x = rng.standard_normal(n)
    for t in range(64, 0, -1):
        ab = sched.alpha_bar[t]
        x0 = m + sd**2 * np.sqrt(ab) / (ab * sd**2 + 1 - ab) * (x - np.sqrt(ab) * m)
        x = ddpm_posterior_step(x0, x, t, rng.standard_normal(n), sched, variance).data
    return x


@pytest.mark.parametrize("sd", [0.3, 0.6, 0.95])
def test_beta_variance_keeps_gaussian_spread(sd):
    x = _reverse_with_exact_denoiser(sd, "beta")
    assert abs(x.mean() - 0.5) < 0.01
    # beta_t is an upper bound: exact for unit variance, a few percent wide for narrow targets
    assert abs(x.std() / sd - 1) < 0.05


def test_posterior_variance_shrinks_wide_gaussians():
    # with T=64 the smaller variance loses ~5% of the spread even with a perfect denoiser
    assert _reverse_with_exact_denoiser(0.95, "posterior").std() < 0.93


def test_unknown_variance_rejected():
    with pytest.raises(ValueError):
        ddpm_posterior_step(0.0, 0.0, 3, 0.0, make_linear_schedule(8), "huge")


def test_ddpm_step_last_is_estimate():
    s = make_linear_schedule(64)
    O = np.array([0.4])
    assert np.array_equal(ddpm_posterior_step(O, np.array([3.0]), 1, np.array([1.0]), s).data, O)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 4, elements=st.floats(-5, 5)),
    arrays(np.float64, 4, elements=st.floats(-5, 5)),
    arrays(np.float64, 4, elements=st.floats(-5, 5)),
    st.integers(1, 64),
    st.floats(-2, 2),
)
def test_q_sample_is_affine(x, y, n, t, a):
    s = make_linear_schedule(64)
    lhs = q_sample(x * a + y, t, n * a + n, s).data
    rhs = a * q_sample(x, t, n, s).data + q_sample(y, t, n, s).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(1e-5, 0.01), st.floats(0.01, 0.5))
def test_noise_matching_identity_any_schedule(T, lo, hi):
    s = make_linear_schedule(T, lo, hi)
    np.testing.assert_allclose(s.C**2 + s.beta_hat, 1.0, atol=1e-12)
