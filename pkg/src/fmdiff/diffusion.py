"""Training and sampling of diffusion models with a forward model in the loop.

The denoiser never sees a signal directly. It predicts one, the forward model
maps it into observation space, and both the losses and the reverse process
live on observations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .denoiser import (
    DenoiserNet,
    DeterministicEstimator,
    denoise,
    denoise_from_estimate,
    det_estimate,
)
from .forward_models import ForwardModel, RenderModel
from .rng import stream
from .schedule import VarianceSchedule, ddpm_posterior_step, make_linear_schedule, q_sample, renoise
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingTuple",
    "TupleDataset",
    "TrainConfig",
    "SamplerConfig",
    "TrainResult",
    "TrainingDiverged",
    "SampleResult",
    "loss_trgt",
    "loss_novel",
    "train",
    "train_deterministic",
    "sample",
    "sample_autoregressive",
]

STEP_VARIANTS = ("renoise", "ddpm-posterior")


@dataclass
class TrainingTuple:
    """Observations of one signal under different forward-model parameters."""

    O_ctxt: np.ndarray
    phi_ctxt: np.ndarray
    O_trgt: np.ndarray
    phi_trgt: np.ndarray
    O_novel: np.ndarray | None = None
    phi_novel: np.ndarray | None = None


@dataclass
class TupleDataset:
    """Column-stacked :class:`TrainingTuple` rows."""

    O_ctxt: np.ndarray
    phi_ctxt: np.ndarray
    O_trgt: np.ndarray
    phi_trgt: np.ndarray
    O_novel: np.ndarray | None = None
    phi_novel: np.ndarray | None = None
    signals: np.ndarray | None = None  # kept only for evaluation, never used in training
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.O_ctxt)

    def __getitem__(self, i) -> TrainingTuple:
        nov = self.O_novel is not None
        return TrainingTuple(
            self.O_ctxt[i],
            self.phi_ctxt[i],
            self.O_trgt[i],
            self.phi_trgt[i],
            self.O_novel[i] if nov else None,
            self.phi_novel[i] if nov else None,
        )

    @property
    def has_novel(self) -> bool:
        return self.O_novel is not None

    def subset(self, idx) -> "TupleDataset":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TupleDataset(
            self.O_ctxt[idx],
            self.phi_ctxt[idx],
            self.O_trgt[idx],
            self.phi_trgt[idx],
            pick(self.O_novel),
            pick(self.phi_novel),
            pick(self.signals),
            dict(self.meta),
        )

    def without_novel(self) -> "TupleDataset":
        return TupleDataset(
            self.O_ctxt, self.phi_ctxt, self.O_trgt, self.phi_trgt, None, None, self.signals, dict(self.meta)
        )

    def arrays(self) -> dict[str, np.ndarray]:
        names = ["O_ctxt", "phi_ctxt", "O_trgt", "phi_trgt", "O_novel", "phi_novel", "signals"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: str = "cosine"  # or "constant"
    novel_weight: float = 1.0
    det_weight: float = 1.0
    smoothness_weight: float = 0.0
    smoothness_warmup: float = 0.0  # fraction of the budget over which the smoothness weight ramps up from 0
    T: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.15
    seed: int = 0

    @property
    def schedule(self) -> VarianceSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class SamplerConfig:
    T: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.15
    step: str = "renoise"
    seed: int = 0
    depth: int = 1
    variance: str = "posterior"  # ddpm-posterior only: "posterior" or "beta"

    def __post_init__(self):
        if self.step not in STEP_VARIANTS:
            raise ValueError(f"unknown step variant {self.step!r}; choose from {STEP_VARIANTS}")
        if self.variance not in ("posterior", "beta"):
            raise ValueError(f"unknown variance {self.variance!r}")

    @property
    def schedule(self) -> VarianceSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    est_params: dict[str, np.ndarray] | None
    losses: np.ndarray


@dataclass
class SampleResult:
    signal: np.ndarray  # (n, *signal_shape)
    observation: np.ndarray  # (n, *obs_shape) at t = 0
    trajectory: np.ndarray | None = None  # (T + 1, n, *obs_shape), from t = T down to 0


# ---------------------------------------------------------------------------
# losses


def _sq_err(pred: Tensor, target) -> Tensor:
    """Per-row squared error summed over observation axes, averaged over rows."""
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    return (diff * diff).reshape(pred.shape[0], -1).sum(axis=1).mean()


def _batched(tup):
    """View a single :class:`TrainingTuple` as a batch of one."""
    if isinstance(tup, TupleDataset):
        return tup
    ex = lambda a: None if a is None else np.asarray(a, dtype=np.float64)[None]  # noqa: E731
    return TupleDataset(
        ex(tup.O_ctxt), ex(tup.phi_ctxt), ex(tup.O_trgt), ex(tup.phi_trgt), ex(tup.O_novel), ex(tup.phi_novel)
    )


def _predict(net, est, fm, batch: TupleDataset, O_t, t, params=None, est_params=None):
    """Denoised signal, plus the deterministic scene when an estimator is attached."""
    if est is None:
        return denoise(net, batch.O_ctxt, O_t, t, batch.phi_ctxt, batch.phi_trgt, params), None
    scene, O_det, feats = det_estimate(est, fm, batch.O_ctxt, batch.phi_ctxt, batch.phi_trgt, est_params)
    S = denoise_from_estimate(net, fm, batch.O_ctxt, O_t, t, batch.phi_ctxt, batch.phi_trgt, O_det, feats, params)
    return S, (scene, O_det)


def loss_trgt(net, fm, tup, t, noise, sched: VarianceSchedule | None = None, est=None, params=None, est_params=None):
    """Squared error between the clean target and the forward model applied to the denoised signal."""
    batch = _batched(tup)
    sched = sched or make_linear_schedule(net.T)
    noise = np.asarray(noise, dtype=np.float64).reshape(batch.O_trgt.shape)
    O_t = q_sample(batch.O_trgt, t, noise, sched).data
    S, _ = _predict(net, est, fm, batch, O_t, t, params, est_params)
    return _sq_err(fm.apply(S, batch.phi_trgt), batch.O_trgt)


def loss_novel(net, fm, tup, t, noise, sched: VarianceSchedule | None = None, est=None, params=None, est_params=None):
    """Same denoised signal as :func:`loss_trgt`, scored against the novel observation."""
    batch = _batched(tup)
    if batch.O_novel is None:
        raise ValueError("loss_novel needs a tuple with a novel observation")
    sched = sched or make_linear_schedule(net.T)
    noise = np.asarray(noise, dtype=np.float64).reshape(batch.O_trgt.shape)
    O_t = q_sample(batch.O_trgt, t, noise, sched).data
    S, _ = _predict(net, est, fm, batch, O_t, t, params, est_params)
    return _sq_err(fm.apply(S, batch.phi_novel), batch.O_novel)


def _smoothness(S: Tensor) -> Tensor:
    motion = S[:, :, 3]
    d = motion[:, 1:] - motion[:, :-1]
    return (d * d).sum(axis=1).mean()


# ---------------------------------------------------------------------------
# training


def smoothness_at(config: TrainConfig, step: int) -> float:
    ramp = config.smoothness_warmup * config.steps
    if ramp <= 0:
        return config.smoothness_weight
    return config.smoothness_weight * min(1.0, step / ramp)


def lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_decay == "constant" or config.steps <= 1:
        return config.lr
    if config.lr_decay == "cosine":
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * step / config.steps))
    raise ValueError(f"unknown lr_decay {config.lr_decay!r}")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1: float, b2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.k += 1
        c1 = 1 - self.b1**self.k
        c2 = 1 - self.b2**self.k
        for name, g in grads.items():
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _copy(params):
    return None if params is None else {k: v.copy() for k, v in params.items()}


def train(
    net: DenoiserNet,
    est: DeterministicEstimator | None,
    fm: ForwardModel,
    dataset: TupleDataset,
    config: TrainConfig,
    log_every: int = 0,
) -> TrainResult:
    """Adam on ``loss_trgt + lambda * loss_novel`` (+ estimator and smoothness terms).

    Works on copies: ``net.params`` / ``est.params`` are left untouched.
    Raises :class:`TrainingDiverged` if the loss turns non-finite.
    """
    sched = config.schedule
    if sched.T != net.T:
        raise ValueError(f"network built for T={net.T}, config has T={sched.T}")
    params = _copy(net.params)
    est_params = _copy(est.params) if est is not None else None
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    est_opt = Adam(est_params, config.lr, config.beta1, config.beta2, config.adam_eps) if est else None
    rng = stream(config.seed, "train")
    use_novel = config.novel_weight > 0 and dataset.has_novel
    losses = np.zeros(config.steps)
    n = len(dataset)
    for step in range(config.steps):
        idx = rng.integers(0, n, config.batch_size)
        t = rng.integers(1, sched.T + 1, config.batch_size)
        batch = dataset.subset(idx)
        noise = rng.standard_normal(batch.O_trgt.shape)
        O_t = q_sample(batch.O_trgt, t, noise, sched).data

        tape = Tape()
        P = {k: tape.leaf(v) for k, v in params.items()}
        EP = {k: tape.leaf(v) for k, v in est_params.items()} if est is not None else None
        S, det = _predict(net, est, fm, batch, O_t, t, P, EP)
        loss = _sq_err(fm.apply(S, batch.phi_trgt), batch.O_trgt)
        if use_novel:
            loss = loss + config.novel_weight * _sq_err(fm.apply(S, batch.phi_novel), batch.O_novel)
        if det is not None and config.det_weight > 0:
            scene, O_det = det
            det_loss = _sq_err(O_det, batch.O_trgt)
            if use_novel:
                det_loss = det_loss + config.novel_weight * _sq_err(fm.apply(scene, batch.phi_novel), batch.O_novel)
            loss = loss + config.det_weight * det_loss
        if config.smoothness_weight > 0:
            loss = loss + smoothness_at(config, step) * _smoothness(S)

        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step)
        losses[step] = value
        grads = tape.backward(loss)
        lr = lr_at(config, step)
        opt.step(params, {k: grads[P[k]].data for k in params}, lr)
        if est is not None:
            est_opt.step(est_params, {k: grads[EP[k]].data for k in est_params}, lr)
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.6f", step, value)
    return TrainResult(params, est_params, losses)


def train_deterministic(
    est: DeterministicEstimator,
    fm: ForwardModel,
    dataset: TupleDataset,
    config: TrainConfig,
) -> TrainResult:
    """Baseline: fit the estimator alone with the same re-rendering losses."""
    params = _copy(est.params)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = stream(config.seed, "train-det")
    use_novel = config.novel_weight > 0 and dataset.has_novel
    losses = np.zeros(config.steps)
    for step in range(config.steps):
        batch = dataset.subset(rng.integers(0, len(dataset), config.batch_size))
        tape = Tape()
        P = {k: tape.leaf(v) for k, v in params.items()}
        S = est(batch.O_ctxt, batch.phi_ctxt, batch.phi_trgt, P)
        loss = _sq_err(fm.apply(S, batch.phi_trgt), batch.O_trgt)
        if use_novel:
            loss = loss + config.novel_weight * _sq_err(fm.apply(S, batch.phi_novel), batch.O_novel)
        if config.smoothness_weight > 0:
            loss = loss + smoothness_at(config, step) * _smoothness(S)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step)
        losses[step] = value
        grads = tape.backward(loss)
        opt.step(params, {k: grads[P[k]].data for k in params}, lr_at(config, step))
    return TrainResult(params, None, losses)


# ---------------------------------------------------------------------------
# sampling


def _rows(x, n: int) -> np.ndarray:
    return np.repeat(np.asarray(x, dtype=np.float64)[None], n, axis=0)


def _as_context_lists(fm, O_ctxt, phi_ctxt, n):
    """Normalize one or several contexts to lists of ``(n, ...)`` batches."""
    multi = isinstance(O_ctxt, (list, tuple))
    obs = list(O_ctxt) if multi else [O_ctxt]
    phis = list(phi_ctxt) if multi else [phi_ctxt]
    obs_b, phi_b = [], []
    for o, p in zip(obs, phis):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:  # already batched
            obs_b.append(np.asarray(o, dtype=np.float64))
            phi_b.append(p)
        else:
            obs_b.append(_rows(o, n))
            phi_b.append(_rows(p.reshape(fm.param_dim), n))
    return obs_b, phi_b


def _reverse(net, est, fm, obs_b, phi_b, phi_t, config: SamplerConfig, rng, keep_trajectory, params, est_params):
    sched = config.schedule
    if sched.T != net.T:
        raise ValueError(f"network built for T={net.T}, sampler has T={sched.T}")
    n = len(phi_t)
    obs_shape = fm.observation_shape(phi_t[:1])
    O = rng.standard_normal((n,) + tuple(obs_shape))
    traj = [O.copy()] if keep_trajectory else None
    det = None
    if est is not None:
        _, O_det, feats = det_estimate(est, fm, obs_b, phi_b, phi_t, est_params)
        det = (O_det, feats)
    S = None
    for t in range(sched.T, 0, -1):
        if det is None:
            S = denoise(net, obs_b, O, t, phi_b, phi_t, params)
        else:
            S = denoise_from_estimate(net, fm, obs_b, O, t, phi_b, phi_t, det[0], det[1], params)
        O_hat = fm.apply(S, phi_t).data
        if t == 1:
            O = O_hat  # beta_hat[0] == 0: the last step is noiseless
        else:
            noise = rng.standard_normal(O_hat.shape)
            if config.step == "renoise":
                O = renoise(O_hat, t - 1, noise, sched).data
            else:
                O = ddpm_posterior_step(O_hat, O, t, noise, sched, config.variance).data
        if keep_trajectory:
            traj.append(O.copy())
    return S.data.copy(), O, (np.stack(traj) if keep_trajectory else None)


def sample(
    net: DenoiserNet,
    est: DeterministicEstimator | None,
    fm: ForwardModel,
    O_ctxt,
    phi_ctxt,
    phi_trgt,
    config: SamplerConfig,
    seed: int | None = None,
    n: int = 1,
    keep_trajectory: bool = True,
    params=None,
    est_params=None,
) -> SampleResult:
    """Draw ``n`` signals given a context by running the reverse process on the target view.

    ``O_ctxt``/``phi_ctxt`` may be a single observation or a list of them
    (pooled). ``params`` overrides the network's own parameters.
    """
    rng = stream(config.seed if seed is None else seed, "sample")
    return _sample_rng(net, est, fm, O_ctxt, phi_ctxt, phi_trgt, config, rng, n, keep_trajectory, params, est_params)


def _sample_rng(net, est, fm, O_ctxt, phi_ctxt, phi_trgt, config, rng, n, keep_trajectory, params, est_params):
    obs_b, phi_b = _as_context_lists(fm, O_ctxt, phi_ctxt, n)
    phi_trgt = np.asarray(phi_trgt, dtype=np.float64)
    phi_t = phi_trgt if phi_trgt.ndim == 2 else _rows(phi_trgt.reshape(fm.param_dim), n)
    S, O, traj = _reverse(net, est, fm, obs_b, phi_b, phi_t, config, rng, keep_trajectory, params, est_params)
    return SampleResult(S, O, traj)


def sample_autoregressive(
    net: DenoiserNet,
    est: DeterministicEstimator | None,
    fm: ForwardModel,
    O_ctxt,
    phi_ctxt,
    phi_list: Sequence,
    config: SamplerConfig,
    seed: int | None = None,
    n: int = 1,
    params=None,
    est_params=None,
) -> list[SampleResult]:
    """Sample each target in ``phi_list`` in turn, adding every finished view to the context set."""
    rng = stream(config.seed if seed is None else seed, "sample")
    obs_b, phi_b = _as_context_lists(fm, O_ctxt, phi_ctxt, n)
    out = []
    for phi in phi_list:
        res = _sample_rng(net, est, fm, list(obs_b), list(phi_b), phi, config, rng, n, False, params, est_params)
        out.append(res)
        obs_b.append(res.observation)
        phi_b.append(_rows(np.asarray(phi, dtype=np.float64).reshape(fm.param_dim), n))
    return out
