import numpy as np
import pytest

import fmdiff.diffusion as diffusion
from fmdiff.denoiser import DenoiserNet, DeterministicEstimator, det_extra_dim
from fmdiff.diffusion import (
    SamplerConfig,
    TrainConfig,
    TrainingDiverged,
    loss_novel,
    loss_trgt,
    sample,
    sample_autoregressive,
    train,
    train_deterministic,
)
from fmdiff.rng import stream
from fmdiff.tensor import Tape
from fmdiff.testbeds import LinearGaussianWorld, MotionWorld, SceneWorld, generate_tuples

T = 16
SMALL = dict(T=T, batch_size=32, lr=3e-3)


@pytest.fixture(scope="module")
def lg():
    world = LinearGaussianWorld()
    return world, generate_tuples(world, 2000, seed=0)


def small_net(world, seed=0):
    return DenoiserNet(world.fm, T, hidden=(32, 32), seed=seed)


def batch_noise(ds, seed=0):
    rng = stream(seed)
    return rng.integers(1, T + 1, len(ds)), rng.standard_normal(ds.O_trgt.shape)


def test_oracle_denoiser_has_zero_loss(lg, monkeypatch):
    world, ds = lg
    batch = ds.subset(np.arange(50))
    monkeypatch.setattr(diffusion, "denoise", lambda *a, **k: batch.signals)
    t, noise = batch_noise(batch)
    assert loss_trgt(small_net(world), world.fm, batch, t, noise).item() == 0.0
    assert loss_novel(small_net(world), world.fm, batch, t, noise).item() == 0.0


def test_losses_are_nonnegative_and_reach_parameters(lg):
    world, ds = lg
    net = small_net(world)
    batch = ds.subset(np.arange(64))
    t, noise = batch_noise(batch, 3)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in net.params.items()}
    L = loss_trgt(net, world.fm, batch, t, noise, params=leaves)
    assert L.item() >= 0
    grads = tape.backward(L)
    vals = [g.data for g in grads.values()]
    assert all(np.all(np.isfinite(v)) for v in vals)
    assert any(np.any(v != 0) for v in vals)


def test_novel_loss_collapses_to_target_loss(lg):
    world, ds = lg
    batch = ds.subset(np.arange(40))
    same = diffusion.TupleDataset(batch.O_ctxt, batch.phi_ctxt, batch.O_trgt, batch.phi_trgt, batch.O_trgt, batch.phi_trgt)
    t, noise = batch_noise(batch, 1)
    net = small_net(world)
    assert loss_novel(net, world.fm, same, t, noise).item() == loss_trgt(net, world.fm, same, t, noise).item()


def test_novel_loss_needs_novel_view(lg):
    world, ds = lg
    batch = ds.subset(np.arange(4)).without_novel()
    t, noise = batch_noise(batch)
    with pytest.raises(ValueError):
        loss_novel(small_net(world), world.fm, batch, t, noise)


def test_training_reduces_loss(lg):
    world, ds = lg
    res = train(small_net(world), None, world.fm, ds, TrainConfig(steps=1500, **SMALL))
    k = len(res.losses) // 10
    assert res.losses[-k:].mean() < res.losses[:k].mean()


def test_zero_novel_weight_equals_target_only_training(lg):
    world, ds = lg
    a = train(small_net(world), None, world.fm, ds, TrainConfig(steps=50, novel_weight=0.0, **SMALL))
    b = train(small_net(world), None, world.fm, ds.without_novel(), TrainConfig(steps=50, **SMALL))
    assert np.array_equal(a.losses, b.losses)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_zero_steps_returns_initial_parameters(lg):
    world, ds = lg
    net = small_net(world)
    res = train(net, None, world.fm, ds, TrainConfig(steps=0, **SMALL))
    assert len(res.losses) == 0
    for k in net.params:
        assert np.array_equal(res.params[k], net.params[k])


def test_training_is_deterministic(lg):
    world, ds = lg
    a = train(small_net(world), None, world.fm, ds, TrainConfig(steps=30, seed=4, **SMALL))
    b = train(small_net(world), None, world.fm, ds, TrainConfig(steps=30, seed=4, **SMALL))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_nan_aborts_with_step_index(lg):
    world, ds = lg
    bad = ds.subset(np.arange(100))
    bad.O_trgt[:] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(small_net(world), None, world.fm, bad, TrainConfig(steps=10, **SMALL))
    assert exc.value.step == 0


def test_sampler_rejects_unknown_variant():
    with pytest.raises(ValueError):
        SamplerConfig(step="ddim")


@pytest.mark.parametrize("variant", ["renoise", "ddpm-posterior"])
def test_last_observation_is_forward_of_signal(lg, variant):
    world, _ = lg
    net = small_net(world)
    res = sample(net, None, world.fm, np.array([0.3]), np.array([0.0]), np.array([1.0]), SamplerConfig(T=T, step=variant), seed=1, n=20)
    again = world.fm.apply(res.signal, np.ones((20, 1))).data
    assert np.array_equal(again, res.observation)
    assert np.array_equal(res.trajectory[-1], res.observation)
    assert res.trajectory.shape == (T + 1, 20, 1)


def test_sampling_is_reproducible(lg):
    world, _ = lg
    net = small_net(world)
    args = (net, None, world.fm, np.array([0.3]), np.array([0.0]), np.array([1.0]), SamplerConfig(T=T))
    a, b = sample(*args, seed=5, n=8), sample(*args, seed=5, n=8)
    c = sample(*args, seed=6, n=8)
    assert np.array_equal(a.signal, b.signal)
    assert not np.array_equal(a.signal, c.signal)


def test_autoregressive_base_case_matches_sample(lg):
    world, _ = lg
    net = small_net(world)
    cfg = SamplerConfig(T=T, step="ddpm-posterior")
    one = sample(net, None, world.fm, np.array([0.3]), np.array([0.0]), np.array([1.0]), cfg, seed=2, n=6)
    ar = sample_autoregressive(net, None, world.fm, np.array([0.3]), np.array([0.0]), [np.array([1.0])], cfg, seed=2, n=6)
    assert len(ar) == 1
    assert np.array_equal(ar[0].signal, one.signal)
    assert sample_autoregressive(net, None, world.fm, np.array([0.3]), np.array([0.0]), [], cfg, seed=2) == []


def test_autoregressive_steps_are_self_consistent():
    world = SceneWorld()
    fm = world.fm
    est = DeterministicEstimator(fm, hidden=(16,), feature_channels=2, seed=1)
    net = DenoiserNet(fm, T, hidden=(32,), extra_dim=det_extra_dim(fm, 2))
    O_c = world.observe(world.sample_signals(stream(0), 1), [0])[0]
    poses = [world.occluded_pose(), np.array([0.5 * np.pi, 0.0]), np.array([1.5 * np.pi, 0.0])]
    out = sample_autoregressive(net, est, fm, O_c, world.poses[0], poses, SamplerConfig(T=T), seed=0, n=3)
    for res, phi in zip(out, poses):
        again = fm.apply(res.signal, np.repeat(phi[None], 3, 0)).data
        assert np.abs(again - res.observation).max() == 0.0


def test_deterministic_baseline_trains_with_smoothness():
    world = MotionWorld(width=16)
    ds = generate_tuples(world, 200, 0, novel=None)
    est = DeterministicEstimator(world.fm, hidden=(16,), seed=0)
    cfg = TrainConfig(steps=40, smoothness_weight=0.3, smoothness_warmup=0.5, **SMALL)
    res = train_deterministic(est, world.fm, ds, cfg)
    assert res.losses.shape == (40,) and np.all(np.isfinite(res.losses))
    assert diffusion.smoothness_at(cfg, 0) == 0.0 and diffusion.smoothness_at(cfg, 39) == 0.3
