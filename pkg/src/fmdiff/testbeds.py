"""Synthetic worlds with known ground truth, and tuple generation from them.

Every world owns a forward model, a finite pose list and a prior over
signals. Observations are noiseless: ``O = fm(S, phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import TupleDataset
from .forward_models import (
    ForwardModel,
    LinearModel,
    PatchCoords,
    RenderModel,
    SynthesizeModel,
    ToyGenerator,
    encode_scene,
    WarpModel,
)
from .rng import stream

__all__ = [
    "World",
    "LinearGaussianWorld",
    "DiscreteWorld",
    "SceneWorld",
    "MotionWorld",
    "LatentWorld",
    "analytic_posterior",
    "true_discrete_posterior",
    "generate_tuples",
    "sample_gaussian",
]


@dataclass
class World:
    """Base: forward model, pose list ``(P, param_dim)`` and optional role pools.

    A role pool restricts which pose indices may serve as context, target or
    novel view; ``None`` means any pose.
    """

    fm: ForwardModel
    poses: np.ndarray
    context_pool: list | None = None
    target_pool: list | None = None
    novel_pool: list | None = None

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    def sample_signals(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, S, pose_idx) -> np.ndarray:
        S = np.asarray(S, dtype=np.float64)
        return self.fm.apply(S, self.poses[np.asarray(pose_idx)]).data.copy()


def sample_gaussian(rng: np.random.Generator, mean, cov, n: int) -> np.ndarray:
    """Draws from ``N(mean, cov)`` for a possibly singular PSD ``cov``."""
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return np.asarray(mean, dtype=np.float64) + rng.standard_normal((n, len(vals))) @ root.T


# ---------------------------------------------------------------------------
# linear-Gaussian


DEFAULT_OPERATORS = np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[1.0, -1.0]]]) / np.array([1.0, 1.0, np.sqrt(2.0)])[
    :, None, None
]


class LinearGaussianWorld(World):
    """Gaussian prior ``N(m, Sigma)`` observed through per-pose matrices."""

    def __init__(self, mean=(0.0, 0.0), cov=((1.0, 0.8), (0.8, 1.0)), operators=DEFAULT_OPERATORS, offsets=None, **pools):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("prior covariance must be symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("prior covariance must be positive definite") from exc
        fm = LinearModel(operators, offsets)
        if fm.signal_shape != self.mean.shape:
            raise ValueError(f"operators act on {fm.signal_shape}, prior mean is {self.mean.shape}")
        super().__init__(fm, np.arange(fm.n_poses, dtype=np.float64)[:, None], **pools)

    def sample_signals(self, rng, n):
        return self.mean + rng.standard_normal((n, len(self.mean))) @ self.chol.T


def analytic_posterior(world: LinearGaussianWorld, O_ctxt, phi_ctxt) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the prior conditioned on ``A S + b = O``."""
    pose = int(np.asarray(phi_ctxt).reshape(-1)[0])
    A = world.fm.operators[pose]
    b = world.fm.offsets[pose]
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise ValueError(f"observation operator for pose {pose} is rank deficient")
    O = np.asarray(O_ctxt, dtype=np.float64).reshape(-1)
    S = world.cov
    G = A @ S @ A.T
    K = np.linalg.solve(G, A @ S).T  # Sigma A^T G^{-1}
    mean = world.mean + K @ (O - A @ world.mean - b)
    cov = S - K @ A @ S
    return mean, 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# discrete


def _embedding_operators(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Pose ``p`` reports coordinate ``p`` of a +-1 signal as ``((1+s)/2, (1-s)/2)``."""
    ops = np.zeros((d, 2, d))
    for p in range(d):
        ops[p, 0, p] = 0.5
        ops[p, 1, p] = -0.5
    return ops, np.full((d, 2), 0.5)


class DiscreteWorld(World):
    """Finitely many signals with a prior; the observation table is enumerable."""

    def __init__(self, signals=None, prior=(0.4, 0.3, 0.2, 0.1), fm: LinearModel | None = None, **pools):
        if signals is None:
            signals = [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]
        self.signals = np.asarray(signals, dtype=np.float64)
        self.prior = np.asarray(prior, dtype=np.float64)
        if len(self.prior) != len(self.signals) or np.any(self.prior < 0) or abs(self.prior.sum() - 1) > 1e-12:
            raise ValueError("prior must be a probability vector with one entry per signal")
        if fm is None:
            fm = LinearModel(*_embedding_operators(self.signals.shape[1]))
        super().__init__(fm, np.arange(fm.n_poses, dtype=np.float64)[:, None], **pools)
        K, P = len(self.signals), self.n_poses
        self.table = np.stack([self.observe(self.signals, np.full(K, p)) for p in range(P)], axis=1)  # (K, P, m)
        rows = self.table.reshape(K, -1)
        for i in range(K):
            for j in range(i + 1, K):
                if np.array_equal(rows[i], rows[j]):
                    raise ValueError(f"signals {i} and {j} have identical total observations")

    def sample_signals(self, rng, n):
        return self.signals[rng.choice(len(self.signals), size=n, p=self.prior)]

    def classify(self, S) -> np.ndarray:
        """Index of the nearest table signal for each row of ``S``."""
        S = np.asarray(S, dtype=np.float64).reshape(-1, self.signals.shape[1])
        return np.argmin(((S[:, None, :] - self.signals[None]) ** 2).sum(-1), axis=1)

    def classify_views(self, O_ctxt, phi_ctxt, O_trgt, phi_trgt) -> np.ndarray:
        """Nearest signal by the pair of observations it would produce at the two poses."""
        pc, pt = int(np.asarray(phi_ctxt).reshape(-1)[0]), int(np.asarray(phi_trgt).reshape(-1)[0])
        O_trgt = np.asarray(O_trgt, dtype=np.float64).reshape(len(O_trgt), -1)
        dc = ((self.table[:, pc] - np.asarray(O_ctxt).reshape(-1)) ** 2).sum(-1)
        dt = ((O_trgt[:, None, :] - self.table[None, :, pt]) ** 2).sum(-1)
        return np.argmin(dc[None] + dt, axis=1)


def true_discrete_posterior(world: DiscreteWorld, O_ctxt, phi_ctxt) -> np.ndarray:
    """Prior mass of the signals whose observation at ``phi_ctxt`` equals ``O_ctxt``, renormalized."""
    pose = int(np.asarray(phi_ctxt).reshape(-1)[0])
    O = np.asarray(O_ctxt, dtype=np.float64).reshape(-1)
    match = np.all(np.abs(world.table[:, pose] - O) <= 1e-9, axis=1)
    if not match.any():
        raise ValueError(f"observation {O} does not occur at pose {pose}")
    w = world.prior * match
    if w.sum() == 0:
        raise ValueError(f"observation {O} has zero prior probability at pose {pose}")
    return w / w.sum()


# ---------------------------------------------------------------------------
# toy scenes with an occluded, two-colored back half


RED = np.array([0.85, 0.15, 0.15])
BLUE = np.array([0.15, 0.15, 0.85])


class SceneWorld(World):
    """Opaque ``H x W`` scenes seen by a 1D camera.

    The half facing the context camera (``x < 0``) has a random color per
    row; the far half is uniformly red or blue with equal probability and is
    hidden from the context view.
    """

    def __init__(self, fm: RenderModel | None = None, density: float = 8.0, target_angles=(0.5 * np.pi, np.pi, 1.5 * np.pi)):
        fm = fm or RenderModel()
        self.density = density
        poses = np.array([[0.0, 0.0]] + [[a, 0.0] for a in target_angles])
        rest = list(range(1, len(poses)))
        super().__init__(fm, poses, context_pool=[0], target_pool=rest, novel_pool=rest)
        self.modes = np.stack([RED, BLUE])

    def build(self, front: np.ndarray, back_mode: np.ndarray) -> np.ndarray:
        """Raw grids from per-row front colors ``(n, H, 3)`` and mode indices ``(n,)``."""
        H, W = self.fm.H, self.fm.W
        n = len(back_mode)
        color = np.empty((n, H, W, 3))
        color[:, :, : W // 2] = front[:, :, None, :]
        color[:, :, W // 2:] = self.modes[back_mode][:, None, None, :]
        density = np.full((n, H, W), self.density)
        return encode_scene(density, color)

    def sample_signals(self, rng, n, return_modes: bool = False):
        front = rng.uniform(0.1, 0.9, (n, self.fm.H, 3))
        mode = rng.integers(0, 2, n)
        grids = self.build(front, mode)
        return (grids, mode) if return_modes else grids

    def occluded_pose(self) -> np.ndarray:
        """The pose looking straight at the hidden half."""
        return np.array([np.pi, 0.0])


# ---------------------------------------------------------------------------
# 1D frames moving left or right


class MotionWorld(World):
    """Piecewise-linear random frames with a global motion of ``+m0`` or ``-m0`` pixels.

    Each color channel is linear between knots spaced ``knot_spacing`` pixels
    apart and is pinned to zero on the outermost ``ceil(m0)`` pixels, so
    nothing bright enters or leaves the frame. Pose 0 (``phi = 0``) shows the
    frame itself, pose 1 (``phi = 1``) shows it after the motion.
    """

    def __init__(self, width: int = 32, m0: float = 1.0, knot_spacing: int = 10):
        fm = WarpModel(width)
        self.m0, self.knot_spacing = m0, knot_spacing
        super().__init__(fm, np.array([[0.0], [1.0]]), context_pool=[0], target_pool=[1], novel_pool=[])
        self.modes = np.array([m0, -m0])

    def frames(self, rng, n) -> np.ndarray:
        W, k = self.fm.width, int(np.ceil(self.m0))
        lo, hi = k - 1, W - k
        knots = np.linspace(lo, hi, max(2, int(round((hi - lo) / self.knot_spacing)) + 1))
        vals = rng.uniform(0.05, 0.95, (n, 3, len(knots)))
        vals[..., 0] = vals[..., -1] = 0.0
        u = np.arange(W, dtype=np.float64)
        out = np.empty((n, W, 3))
        for i in range(n):
            for c in range(3):
                out[i, :, c] = np.interp(u, knots, vals[i, c], left=0.0, right=0.0)
        return out

    def sample_signals(self, rng, n, return_modes: bool = False):
        color = self.frames(rng, n)
        mode = rng.integers(0, 2, n)
        motion = np.broadcast_to(self.modes[mode][:, None, None], (n, self.fm.width, 1))
        S = np.concatenate([color, motion], axis=2)
        return (S, mode) if return_modes else S


# ---------------------------------------------------------------------------
# latent codes seen through generator patches


class LatentWorld(World):
    """Standard-normal latents seen through four corner patches of a frozen generator."""

    def __init__(self, generator: ToyGenerator | None = None, patch: int = 4):
        fm = SynthesizeModel(generator)
        n = fm.generator.size
        corners = [(0, 0), (0, n - patch), (n - patch, 0), (n - patch, n - patch)]
        poses = np.array([PatchCoords(r, c, patch, patch).as_array() for r, c in corners])
        super().__init__(fm, poses)

    def sample_signals(self, rng, n):
        return rng.standard_normal((n, self.fm.generator.latent_dim))


# ---------------------------------------------------------------------------


def _draw_roles(world: World, rng, n: int, want_novel: bool) -> np.ndarray:
    """``(n, 3)`` pose indices (context, target, novel), pairwise distinct per row."""
    P = world.n_poses
    pools = [
        world.context_pool if world.context_pool is not None else list(range(P)),
        world.target_pool if world.target_pool is not None else list(range(P)),
        world.novel_pool if world.novel_pool is not None else list(range(P)),
    ]
    if not want_novel:
        pools[2] = []
    out = np.full((n, 3), -1, dtype=np.int64)
    for i in range(n):
        taken: list[int] = []
        for role, pool in enumerate(pools):
            if role == 2 and not want_novel:
                break
            free = [p for p in pool if p not in taken]
            if not free:
                raise ValueError(f"no pose left for role {('context', 'target', 'novel')[role]}")
            out[i, role] = free[rng.integers(len(free))]
            taken.append(int(out[i, role]))
    return out


def generate_tuples(world: World, n: int, seed: int, novel: str | None = "distinct") -> TupleDataset:
    """``n`` training tuples, one fresh prior signal each.

    ``novel`` selects the extra supervision view: ``"distinct"`` draws a third
    pose different from context and target, ``"context"`` reuses the context
    view (useful when only two poses exist), ``None`` omits it.
    """
    if novel not in ("distinct", "context", None):
        raise ValueError(f"unknown novel mode {novel!r}")
    if world.n_poses < 2:
        raise ValueError("a world needs at least two poses")
    if novel == "distinct" and world.n_poses < 3:
        raise ValueError("a distinct novel view needs at least three poses")
    rng = stream(seed, "tuples")
    S = world.sample_signals(rng, n)
    roles = _draw_roles(world, rng, n, novel == "distinct")
    if novel == "context":
        roles[:, 2] = roles[:, 0]
    obs_shape = world.fm.observation_shape(world.poses[:1])

    def view(role):
        if n == 0:
            return np.zeros((0,) + tuple(obs_shape)), np.zeros((0, world.fm.param_dim))
        return world.observe(S, roles[:, role]), world.poses[roles[:, role]]

    O_c, p_c = view(0)
    O_t, p_t = view(1)
    O_n, p_n = view(2) if novel else (None, None)
    return TupleDataset(
        O_c, p_c, O_t, p_t, O_n, p_n, np.asarray(S, dtype=np.float64), {"seed": seed, "novel": novel, "roles": roles}
    )
