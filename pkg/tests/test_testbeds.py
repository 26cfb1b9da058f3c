import numpy as np
import pytest
from scipy import stats

from fmdiff.rng import stream
from fmdiff.testbeds import (
    DiscreteWorld,
    LatentWorld,
    LinearGaussianWorld,
    MotionWorld,
    SceneWorld,
    analytic_posterior,
    generate_tuples,
    sample_gaussian,
    true_discrete_posterior,
)

ALL_WORLDS = {
    "linear": (LinearGaussianWorld, "distinct"),
    "discrete": (DiscreteWorld, "context"),
    "scene": (SceneWorld, "distinct"),
    "motion": (MotionWorld, None),
    "latent": (LatentWorld, "distinct"),
}


def test_independent_coordinates_posterior():
    w = LinearGaussianWorld(cov=np.eye(2))
    m, c = analytic_posterior(w, [0.7], [0])
    np.testing.assert_allclose(m, [0.7, 0.0], atol=1e-15)
    np.testing.assert_allclose(c, np.diag([0.0, 1.0]), atol=1e-15)


def test_correlated_posterior():
    m, c = analytic_posterior(LinearGaussianWorld(), [1.0], [0])
    np.testing.assert_allclose(m, [1.0, 0.8], atol=1e-14)
    assert abs(c[1, 1] - 0.36) < 1e-14


def test_observed_coordinate_reproduced_exactly():
    w = LinearGaussianWorld(mean=(0.5, -1.0))
    m, _ = analytic_posterior(w, [0.5], [0])
    assert m[0] == 0.5


def rejection_posterior(world, O, pose, n_accept, band=1e-3, seed=0):
    rng = stream(seed, "rejection")
    A = world.fm.operators[pose][0]
    out = []
    total = 0
    while total < n_accept:
        S = world.sample_signals(rng, 2_000_000)
        keep = S[np.abs(S @ A - O) < band]
        out.append(keep)
        total += len(keep)
    return np.concatenate(out)[:n_accept]


@pytest.mark.parametrize("O,pose", [(1.0, 0), (-0.5, 2)])
def test_posterior_matches_rejection_sampling(O, pose):
    w = LinearGaussianWorld()
    ref = rejection_posterior(w, O, pose, 10_000)
    m, c = analytic_posterior(w, [O], [pose])
    draws = sample_gaussian(stream(1), m, c, 10_000)
    for k in range(2):
        assert stats.wasserstein_distance(ref[:, k], draws[:, k]) < 0.05


def test_rank_deficient_operator_rejected():
    w = LinearGaussianWorld(operators=np.array([[[1.0, 0.0]], [[0.0, 0.0]]]))
    with pytest.raises(ValueError):
        analytic_posterior(w, [0.0], [1])


def test_prior_must_be_positive_definite():
    with pytest.raises(ValueError):
        LinearGaussianWorld(cov=[[1.0, 1.0], [1.0, 1.0]])


def test_discrete_posteriors():
    w = DiscreteWorld()
    negative_first = w.table[3, 0]  # first coordinate -1: signals 1 and 3
    assert np.allclose(true_discrete_posterior(w, w.table[0, 0], [0]), [0.4 / 0.6, 0, 0.2 / 0.6, 0])
    np.testing.assert_allclose(true_discrete_posterior(w, negative_first, [0]), [0, 0.75, 0, 0.25])
    even = DiscreteWorld(prior=(0.25, 0.25, 0.25, 0.25))
    np.testing.assert_allclose(true_discrete_posterior(even, even.table[0, 1], [1]), [0.5, 0.5, 0, 0])


def test_point_mass_when_observation_unique():
    w = DiscreteWorld(signals=[[1.0, 1.0], [-1.0, -1.0]], prior=(0.3, 0.7))
    np.testing.assert_array_equal(true_discrete_posterior(w, w.table[1, 0], [0]), [0, 1])


def test_unknown_observation_rejected():
    with pytest.raises(ValueError):
        true_discrete_posterior(DiscreteWorld(), [0.3, 0.3], [0])


def test_total_observation_must_identify_signal():
    with pytest.raises(ValueError):
        DiscreteWorld(signals=[[1.0, 1.0], [1.0, 1.0]], prior=(0.5, 0.5))


@pytest.mark.parametrize("name", sorted(ALL_WORLDS))
def test_tuples_are_exact_observations(name):
    cls, novel = ALL_WORLDS[name]
    world = cls()
    ds = generate_tuples(world, 50, seed=3, novel=novel)
    roles = ds.meta["roles"]
    assert np.array_equal(world.observe(ds.signals, roles[:, 0]), ds.O_ctxt)
    assert np.array_equal(world.observe(ds.signals, roles[:, 1]), ds.O_trgt)
    assert np.all(roles[:, 0] != roles[:, 1])
    if novel == "distinct":
        assert np.array_equal(world.observe(ds.signals, roles[:, 2]), ds.O_novel)
        assert np.all((roles[:, 2] != roles[:, 0]) & (roles[:, 2] != roles[:, 1]))


def test_empty_dataset():
    assert len(generate_tuples(LinearGaussianWorld(), 0, seed=0)) == 0


def test_pose_marginals_uniform():
    world = LinearGaussianWorld()
    roles = generate_tuples(world, 10_000, seed=4).meta["roles"]
    n, p = 10_000, 1 / 3
    sd = np.sqrt(n * p * (1 - p))
    for r in range(3):
        counts = np.bincount(roles[:, r], minlength=3)
        assert np.all(np.abs(counts - n * p) < 3 * sd)


def test_too_few_poses_rejected():
    with pytest.raises(ValueError):
        generate_tuples(DiscreteWorld(), 5, seed=0, novel="distinct")


def test_generation_is_seeded():
    a = generate_tuples(SceneWorld(), 10, seed=7)
    b = generate_tuples(SceneWorld(), 10, seed=7)
    assert np.array_equal(a.O_trgt, b.O_trgt) and np.array_equal(a.signals, b.signals)


def test_scene_modes_hidden_from_context():
    world = SceneWorld()
    front = stream(0).uniform(0.1, 0.9, (1, 4, 3))
    red, blue = world.build(front, np.array([0])), world.build(front, np.array([1]))
    ctx = lambda S: world.observe(S, [0])  # noqa: E731
    assert np.abs(ctx(red) - ctx(blue)).max() < 1e-3
    back = lambda S: world.fm.apply(S, world.occluded_pose()[None]).data  # noqa: E731
    assert np.abs(back(red) - back(blue)).max() > 0.5


def test_motion_frames_keep_edges_dark():
    world = MotionWorld()
    S, modes = world.sample_signals(stream(0), 20, return_modes=True)
    assert np.all(S[:, [0, -1], :3] == 0)
    assert set(np.unique(S[..., 3])) <= {1.0, -1.0}
    assert np.array_equal(S[:, 0, 3], world.modes[modes])
