import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmdiff.measures import (
    DensityFn,
    EmpiricalMeasure,
    change_of_variables_density,
    chi_square_test,
    cube_density,
    integrate_density,
    measure_suite,
    permutation_test,
    pushforward,
    slice_identity_check,
    two_sample_distance,
    verify_left_inverse,
)
from fmdiff.rng import stream


def normal_pdf(x, var=1.0):
    return np.exp(-0.5 * x**2 / var) / np.sqrt(2 * np.pi * var)


embed = lambda x: np.concatenate([x, np.zeros_like(x)], axis=1)  # noqa: E731


# --- pushforward -----------------------------------------------------------


def test_identity_pushforward():
    mu = EmpiricalMeasure(stream(0).standard_normal((100, 2)))
    assert np.array_equal(pushforward(mu, lambda x: x).samples, mu.samples)


def test_embedding_is_concentrated_on_a_line():
    mu = EmpiricalMeasure(stream(1).standard_normal(10_000))
    assert np.all(pushforward(mu, embed).samples[:, 1] == 0.0)


def test_cube_histogram_matches_change_of_variables_density():
    samples = pushforward(EmpiricalMeasure(stream(2).uniform(-1, 1, 100_000)), lambda x: x**3).samples
    edges = np.linspace(-1, 1, 21)
    q = cube_density()
    probs = [integrate_density(q, a, b, n=4001, singular_at=0.0 if a <= 0 <= b else None) for a, b in zip(edges[:-1], edges[1:])]
    # closed form of the bin mass: (cbrt(b) - cbrt(a)) / 2
    np.testing.assert_allclose(probs, (np.cbrt(edges[1:]) - np.cbrt(edges[:-1])) / 2, atol=5e-6)
    assert not chi_square_test(samples, edges, probs, exclude=[9, 10]).reject


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 2), elements=st.floats(-5, 5)))
def test_pushforward_is_functorial(x):
    f = lambda v: np.stack([v[:, 0] + v[:, 1], v[:, 0] * 2], axis=1)  # noqa: E731
    g = lambda v: np.sin(v)  # noqa: E731
    mu = EmpiricalMeasure(x)
    assert np.array_equal(pushforward(pushforward(mu, f), g).samples, pushforward(mu, lambda v: g(f(v))).samples)


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((3, 1)), [0.5, 0.5, 0.5])
    mu = EmpiricalMeasure(np.arange(3.0), [0.2, 0.3, 0.5])
    assert np.array_equal(pushforward(mu, lambda x: x + 1).weights, mu.weights)


# --- densities -------------------------------------------------------------


def test_scaled_normal_density():
    q = change_of_variables_density(DensityFn(normal_pdf), lambda y: y / 2, lambda y: np.full_like(y, 0.5))
    y = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(q(y), normal_pdf(y, 4.0), rtol=0, atol=1e-12)


def test_identity_change_of_variables():
    q = change_of_variables_density(DensityFn(normal_pdf), lambda y: y, lambda y: np.ones_like(y))
    y = np.linspace(-3, 3, 13)
    assert np.array_equal(q(y), normal_pdf(y))


def test_cube_density_blows_up_near_zero():
    q = cube_density()
    assert q(np.array([0.001]))[0] > 10 * q(np.array([0.5]))[0]
    ev = q.evaluate(np.array([-0.5, 0.0, 0.5]))
    assert ev.bad_points.tolist() == [1]


def test_densities_integrate_to_one():
    q = change_of_variables_density(DensityFn(normal_pdf), lambda y: y / 2, lambda y: np.full_like(y, 0.5))
    assert abs(integrate_density(q, -20, 20) - 1) < 1e-3
    assert abs(integrate_density(cube_density(), -1, 1, singular_at=0.0) - 1) < 1e-3


# --- left inverses ---------------------------------------------------------


def test_left_inverse_embedding_exact():
    mu = EmpiricalMeasure(stream(3).standard_normal(1000))
    rep = verify_left_inverse(mu, embed, lambda y: y[:, :1])
    assert rep.exact and rep.max_roundtrip_error == 0.0 and rep.distance == 0.0


def test_left_inverse_identity():
    mu = EmpiricalMeasure(stream(4).standard_normal((50, 3)))
    assert verify_left_inverse(mu, lambda x: x, lambda x: x).exact


def test_left_inverse_cube_within_rounding():
    mu = EmpiricalMeasure(stream(5).uniform(-1, 1, 10_000))
    rep = verify_left_inverse(mu, lambda x: x**3, np.cbrt, tol=1e-12)
    assert rep.exact and rep.max_roundtrip_error <= 1e-12


def test_left_inverse_failure_names_worst_point():
    mu = EmpiricalMeasure(np.array([-2.0, 1.0, 3.0]))
    rep = verify_left_inverse(mu, lambda x: x**2, np.sqrt)
    assert not rep.exact
    assert rep.worst_index == 0 and list(rep.worst_point) == [-2.0]


# --- slice identity --------------------------------------------------------


def totals(seed=0, N=64, H=4, W=4, P=6):
    rng = stream(seed)
    truth = rng.uniform(size=(N, H, W, P))
    den = truth + 0.3 * rng.standard_normal(truth.shape)
    return np.stack([den, truth], axis=-1)


def sq_err(x, y, phi, tot):
    r = np.arange(len(x))
    return (tot[r, x, y, phi, 0] - tot[r, x, y, phi, 1]) ** 2


def test_constant_function_is_exact():
    res = slice_identity_check(lambda x, y, p, t: np.full(len(x), 2.5), totals(), 1000)
    assert res.lhs == res.rhs == 2.5


def test_squared_error_slices_agree():
    res = slice_identity_check(sq_err, totals(), 100_000, seed=1)
    assert res.gap < 3 * res.stderr


def test_pose_only_function_with_enumerated_rhs():
    w = np.array([0.1, 0.5, 2.0, 3.0, 0.0, 1.0])
    res = slice_identity_check(lambda x, y, p, t: w[p], totals(), 100_000, seed=2, enumerate_rhs=True)
    assert res.rhs == pytest.approx(w.mean(), abs=1e-14)
    assert res.gap < 3 * res.stderr


def test_flattened_measure_needs_grid_shape():
    tot = totals()
    mu = EmpiricalMeasure(tot.reshape(len(tot), -1))
    with pytest.raises(ValueError):
        slice_identity_check(sq_err, mu, 100)
    res = slice_identity_check(sq_err, mu, 20_000, grid_shape=tot.shape[1:])
    assert res.agrees(3.0)


def test_zero_draws_rejected():
    with pytest.raises(ValueError):
        slice_identity_check(sq_err, totals(), 0)


def test_stderr_shrinks_like_inverse_sqrt():
    a = slice_identity_check(sq_err, totals(), 10_000, seed=3).stderr
    b = slice_identity_check(sq_err, totals(), 40_000, seed=3).stderr
    assert abs(a / b - 2.0) < 0.6


# --- two-sample statistics -------------------------------------------------


@pytest.mark.parametrize("kind", ["energy", "ks_per_coordinate", "wasserstein1_1d"])
def test_identical_measures_have_zero_distance(kind):
    a = stream(6).standard_normal(500)
    assert two_sample_distance(a, a, kind) == pytest.approx(0.0, abs=1e-12)


def test_two_unit_normals_pass_permutation_test():
    a, b = stream(7, "a").standard_normal(10_000), stream(7, "b").standard_normal(10_000)
    assert not permutation_test(a, b, "energy", n_perm=200, alpha=0.01).reject


def test_multivariate_energy_detects_shift():
    a = stream(8, "a").standard_normal((400, 2))
    b = stream(8, "b").standard_normal((400, 2)) + [0.5, 0.0]
    assert permutation_test(a, b, "energy", n_perm=100).reject


def test_shifted_gaussians_wasserstein():
    a, b = stream(9, "a").standard_normal(10_000), stream(9, "b").standard_normal(10_000) + 1
    assert abs(two_sample_distance(a, b, "wasserstein1_1d") - 1.0) < 0.05


def test_empty_and_mismatched_rejected():
    with pytest.raises(ValueError):
        two_sample_distance(np.zeros((0, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        two_sample_distance(np.zeros((3, 1)), np.zeros((3, 2)))


def test_full_suite_passes_quickly():
    res = measure_suite(seed=0)
    assert all(v["passed"] for v in res.values()), {k: v for k, v in res.items() if not v["passed"]}
    assert res["runtime_s"]["statistic"] < 120
