"""Differentiable forward models mapping a signal and parameters to an observation.

All models work on batches: ``apply(S, phi)`` takes signals of shape
``(B, *signal_shape)`` and a parameter array of shape ``(B, param_dim)``
and returns observations of shape ``(B, *observation_shape)``. Calling the
model directly also accepts a single unbatched signal.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "ForwardModel",
    "CameraPose",
    "ToyScene",
    "MotionSignal",
    "LatentSignal",
    "PatchCoords",
    "RenderModel",
    "WarpModel",
    "ToyGenerator",
    "SynthesizeModel",
    "LinearModel",
    "encode_scene",
    "render",
    "render_with_features",
    "warp",
    "splat_taps",
    "synthesize",
    "linear_map",
]


class ForwardModel(ABC):
    """A known deterministic map ``(signal, phi) -> observation``."""

    signal_shape: tuple
    param_dim: int

    @abstractmethod
    def apply(self, S, phi) -> Tensor:
        """Batched forward pass."""

    @abstractmethod
    def observation_shape(self, phi) -> tuple:
        """Shape of one observation produced with parameters ``phi``."""

    @abstractmethod
    def encode_param(self, phi) -> np.ndarray:
        """Real feature vector per parameter row, shape ``(B, e)``."""

    @property
    def net_output_shape(self) -> tuple:
        """Shape a denoiser must emit; :meth:`assemble` turns it into a signal."""
        return self.signal_shape

    def assemble(self, raw: Tensor, O_ctxt) -> Tensor:
        return raw

    def __call__(self, S, phi) -> Tensor:
        S = as_tensor(S)
        phi = np.asarray(phi, dtype=np.float64)
        if S.shape == tuple(self.signal_shape):
            out = self.apply(S.reshape((1,) + S.shape), phi.reshape(1, self.param_dim))
            return out.reshape(out.shape[1:])
        return self.apply(S, np.atleast_2d(phi))

    def _check_batch(self, S: Tensor, phi: np.ndarray) -> int:
        if S.shape[1:] != tuple(self.signal_shape):
            raise ShapeError(f"{type(self).__name__}: signal shape {S.shape[1:]} != {self.signal_shape}")
        if phi.shape != (S.shape[0], self.param_dim):
            raise ShapeError(
                f"{type(self).__name__}: parameters shape {phi.shape} != {(S.shape[0], self.param_dim)}"
            )
        return S.shape[0]


def _params(phi, dim: int) -> np.ndarray:
    return np.asarray(phi, dtype=np.float64).reshape(-1, dim)


# ---------------------------------------------------------------------------
# volume rendering of a 2D scene into a 1D image


@dataclass(frozen=True)
class CameraPose:
    """Orthographic 1D camera looking along ``(cos angle, sin angle)``."""

    angle: float
    offset: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.angle, self.offset])


@dataclass
class ToyScene:
    """A grid of raw cell values: channel 0 density, channels 1-3 color.

    Density is stored through softplus and color through a sigmoid, so any
    real grid decodes to a valid scene.
    """

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[-1] != 4:
            raise ShapeError(f"ToyScene grid must be H x W x 4, got {self.grid.shape}")

    @classmethod
    def from_decoded(cls, density, color) -> "ToyScene":
        return cls(encode_scene(density, color))

    def decoded(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        return np.logaddexp(0.0, g[..., 0]), 1.0 / (1.0 + np.exp(-g[..., 1:]))


def encode_scene(density, color) -> np.ndarray:
    """Raw grid(s) ``(..., 4)`` that decode to the given density ``(...)`` and color ``(..., 3)``."""
    density = np.asarray(density, dtype=np.float64)
    color = np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1 - 1e-6)
    raw_d = np.where(density > 30, density, np.log(np.expm1(np.maximum(density, 1e-12))))
    raw_c = np.log(color) - np.log1p(-color)
    return np.concatenate([raw_d[..., None], raw_c], axis=-1)


class _RayTable:
    """Constant sampling geometry for a batch of poses."""

    def __init__(self, poses: np.ndarray, H: int, W: int, width: int, n_samples: int):
        B = len(poses)
        radius = np.sqrt(2.0)
        delta = 2 * radius / n_samples
        ang, off = poses[:, 0], poses[:, 1]
        d = np.stack([np.cos(ang), np.sin(ang)], axis=-1)  # (B, 2)
        e = np.stack([-np.sin(ang), np.cos(ang)], axis=-1)
        u = -1 + (np.arange(width) + 0.5) * 2 / width  # (width,)
        s = (np.arange(n_samples) + 0.5) * delta - radius  # along-ray distance from the center plane
        pu = u[None, :, None] + off[:, None, None]
        pts = (
            pu[..., None] * e[:, None, None, :]
            + s[None, None, :, None] * d[:, None, None, :]
        )  # (B, width, n, 2) as (x, y)
        x, y = pts[..., 0], pts[..., 1]
        inside = (np.abs(x) <= 1) & (np.abs(y) <= 1)
        gx = np.clip((x + 1) / 2 * W - 0.5, 0, W - 1)
        gy = np.clip((y + 1) / 2 * H - 0.5, 0, H - 1)
        j0 = np.minimum(np.floor(gx).astype(np.int64), W - 2)
        i0 = np.minimum(np.floor(gy).astype(np.int64), H - 2)
        fx, fy = gx - j0, gy - i0
        base = (np.arange(B) * H * W)[:, None, None] + i0 * W + j0
        self.index = np.stack([base, base + 1, base + W, base + W + 1]).reshape(4, -1)
        self.weight = np.stack(
            [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
        ).reshape(4, -1)
        self.inside = inside.reshape(-1).astype(np.float64)
        self.delta = delta
        self.rays = B * width
        self.n = n_samples
        self.exclusive = np.triu(np.ones((n_samples, n_samples)), k=1)  # [j, i] = 1 if j < i


def _interp(table: Tensor, rays: _RayTable) -> Tensor:
    """Bilinear lookup of a channel-major ``(C, cells)`` table -> ``(C, R*n)``."""
    corners = tn.gather(table, rays.index, axis=1)  # (C, 4, R*n)
    return (corners * rays.weight).sum(axis=1)


def _composite_weights(sigma: Tensor, rays: _RayTable) -> Tensor:
    tau = (sigma * rays.inside).reshape(rays.rays, rays.n) * rays.delta
    trans = tn.exp(-(tau @ rays.exclusive))
    return trans * (1.0 - tn.exp(-tau))  # (R, n)


def _composite(values: Tensor, w: Tensor) -> Tensor:
    """``(C, R*n)`` sample values composited with ``(R, n)`` weights -> ``(R, C)``."""
    C = values.shape[0]
    return (values.reshape(C, w.shape[0], w.shape[1]) * w).sum(axis=2).T


def _decode_scene(grid: Tensor) -> Tensor:
    B, H, W, C = grid.shape
    cm = grid.reshape(B * H * W, C).T  # (C, cells)
    return tn.concat([tn.softplus(cm[0:1]), tn.sigmoid(cm[1:4])], axis=0)


def _poses_array(pose, B: int) -> np.ndarray:
    if isinstance(pose, CameraPose):
        pose = pose.as_array()
    elif isinstance(pose, (list, tuple)) and pose and isinstance(pose[0], CameraPose):
        pose = np.stack([p.as_array() for p in pose])
    arr = np.asarray(pose, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 1 and B > 1:
        arr = np.repeat(arr, B, axis=0)
    if len(arr) != B:
        raise ShapeError(f"render: {len(arr)} poses for {B} scenes")
    return arr


def _scene_batch(scene) -> tuple[Tensor, bool]:
    if isinstance(scene, ToyScene):
        scene = scene.grid
    scene = as_tensor(scene)
    if scene.ndim == 3:
        return scene.reshape((1,) + scene.shape), False
    if scene.ndim != 4:
        raise ShapeError(f"render: scene must be (H, W, C) or (B, H, W, C), got {scene.shape}")
    return scene, True


def render(scene, pose, n_samples: int = 16, width: int = 8) -> Tensor:
    """Volume-render a raw scene grid into a ``width x 3`` image per pose.

    Pixel color is ``sum_i T_i (1 - exp(-sigma_i delta)) c_i`` with
    ``T_i = exp(-sum_{j<i} sigma_j delta)`` over ``n_samples`` equally spaced
    points per ray; the background is black.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grid, batched = _scene_batch(scene)
    B, H, W, _ = grid.shape
    rays = _RayTable(_poses_array(pose, B), H, W, width, n_samples)
    dec = _decode_scene(grid[..., 0:4])
    vals = _interp(dec, rays)
    w = _composite_weights(vals[0], rays)
    img = _composite(vals[1:4], w).reshape(B, width, 3)
    return img if batched else img.reshape(width, 3)


def render_with_features(scene, pose, n_samples: int = 16, width: int = 8) -> tuple[Tensor, Tensor]:
    """Render colors plus the extra channels ``4:`` composited with the same weights.

    The color image is computed by exactly the same operations as :func:`render`.
    """
    grid, batched = _scene_batch(scene)
    B, H, W, C = grid.shape
    rays = _RayTable(_poses_array(pose, B), H, W, width, n_samples)
    dec = _decode_scene(grid[..., 0:4])
    vals = _interp(dec, rays)
    w = _composite_weights(vals[0], rays)
    img = _composite(vals[1:4], w).reshape(B, width, 3)
    K = C - 4
    feat_table = grid[..., 4:].reshape(B * H * W, K).T
    feats = _composite(_interp(feat_table, rays), w).reshape(B, width, K)
    if not batched:
        return img.reshape(width, 3), feats.reshape(width, K)
    return img, feats


class RenderModel(ForwardModel):
    """Toy inverse-graphics forward model over ``H x W`` scene grids."""

    param_dim = 2

    def __init__(self, H: int = 4, W: int = 4, width: int = 8, n_samples: int = 16):
        if H < 2 or W < 2:
            raise ValueError("scene grid needs at least 2 x 2 cells")
        self.H, self.W, self.width, self.n_samples = H, W, width, n_samples
        self.signal_shape = (H, W, 4)

    def observation_shape(self, phi=None) -> tuple:
        return (self.width, 3)

    def apply(self, S, phi) -> Tensor:
        S = as_tensor(S)
        phi = _params(phi, 2)
        self._check_batch(S, phi)
        return render(S, phi, self.n_samples, self.width)

    def apply_with_features(self, S, phi) -> tuple[Tensor, Tensor]:
        return render_with_features(as_tensor(S), _params(phi, 2), self.n_samples, self.width)

    def encode_param(self, phi) -> np.ndarray:
        phi = _params(phi, 2)
        return np.stack([np.sin(phi[:, 0]), np.cos(phi[:, 0]), phi[:, 1]], axis=1)


# ---------------------------------------------------------------------------
# forward splatting


@dataclass
class MotionSignal:
    """Per-pixel color (``W x 3``) and horizontal motion (``W x 1``)."""

    color: np.ndarray
    motion: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.color, float), np.asarray(self.motion, float).reshape(-1, 1)], axis=1
        )


def _repeat_cols(x: Tensor, k: int) -> Tensor:
    col = x.reshape(x.shape[0], 1)
    return tn.concat([col] * k, axis=1)


def splat_taps(pos, W: int) -> list[tuple[np.ndarray, Tensor]]:
    """Two-tap linear kernel at fractional positions ``pos``.

    Returns ``[(dest, weight), (dest + 1, weight)]``; destinations are clipped
    into ``[0, W)`` and taps that fall outside the image get weight zero.
    """
    pos = as_tensor(pos)
    left = np.floor(pos.data)
    frac = pos - left
    taps = []
    for dest, w in ((left, 1.0 - frac), (left + 1, frac)):
        valid = (dest >= 0) & (dest <= W - 1)
        taps.append((np.clip(dest, 0, W - 1).astype(np.int64), w * valid.astype(np.float64)))
    return taps


def warp(sig, phi, eps: float = 1e-8) -> Tensor:
    """Forward-splat each pixel ``u`` to ``u + phi * motion(u)``.

    Two-tap linear kernel; each destination is normalized by its total
    received weight (floored at ``eps``). Destinations outside the image are
    dropped and destinations nobody hits stay zero.
    """
    if isinstance(sig, MotionSignal):
        sig = sig.as_array()
    S = as_tensor(sig)
    batched = S.ndim == 3
    if not batched:
        S = S.reshape((1,) + S.shape)
    B, W, C = S.shape
    if C != 4:
        raise ShapeError(f"warp: signal must be W x 4 (color + motion), got {S.shape[1:]}")
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if len(phi) == 1 and B > 1:
        phi = np.repeat(phi, B)
    color = S[:, :, 0:3].reshape(B * W, 3)
    motion = S[:, :, 3].reshape(B * W)
    u = np.tile(np.arange(W, dtype=np.float64), B)
    pos = motion * np.repeat(phi, W) + u
    rows = np.repeat(np.arange(B) * W, W)
    num = tn.Tensor(np.zeros((B * W, 3)))
    den = tn.Tensor(np.zeros(B * W))
    for dest, w in splat_taps(pos, W):
        idx = rows + dest
        num = tn.scatter_add(num, idx, color * _repeat_cols(w, 3))
        den = tn.scatter_add(den, idx, w)
    floor = np.where(den.data < eps, eps - den.data, 0.0)
    out = num / _repeat_cols(den + floor, 3)
    out = out.reshape(B, W, 3)
    return out if batched else out.reshape(W, 3)


class WarpModel(ForwardModel):
    """Single-image motion forward model; ``phi`` scales the motion."""

    param_dim = 1

    def __init__(self, width: int = 16):
        self.width = width
        self.signal_shape = (width, 4)

    def observation_shape(self, phi=None) -> tuple:
        return (self.width, 3)

    def apply(self, S, phi) -> Tensor:
        S = as_tensor(S)
        phi = _params(phi, 1)
        self._check_batch(S, phi)
        return warp(S, phi[:, 0])

    def encode_param(self, phi) -> np.ndarray:
        return _params(phi, 1).copy()

    @property
    def net_output_shape(self) -> tuple:
        return (self.width, 1)

    def assemble(self, raw: Tensor, O_ctxt) -> Tensor:
        """Signal = (context frame as color, predicted motion)."""
        return tn.concat([as_tensor(O_ctxt), raw], axis=-1)


# ---------------------------------------------------------------------------
# generator slices


@dataclass
class LatentSignal:
    w: np.ndarray


@dataclass(frozen=True)
class PatchCoords:
    row: int
    col: int
    height: int
    width: int

    def as_array(self) -> np.ndarray:
        return np.array([self.row, self.col, self.height, self.width], dtype=np.float64)


class ToyGenerator:
    """Frozen two-layer network mapping a latent vector to an image."""

    def __init__(self, latent_dim: int = 16, hidden: int = 64, size: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.latent_dim, self.size = latent_dim, size
        self.W1 = rng.normal(0, 1 / np.sqrt(latent_dim), (latent_dim, hidden))
        self.b1 = rng.normal(0, 0.1, hidden)
        self.W2 = rng.normal(0, 1.5 / np.sqrt(hidden), (hidden, size * size * 3))
        self.b2 = rng.normal(0, 0.1, size * size * 3)
        for a in (self.W1, self.b1, self.W2, self.b2):
            a.setflags(write=False)

    def __call__(self, w) -> Tensor:
        w = as_tensor(w)
        single = w.ndim == 1
        if single:
            w = w.reshape(1, -1)
        h = tn.tanh(w @ self.W1 + self.b1)
        img = tn.sigmoid(h @ self.W2 + self.b2).reshape(w.shape[0], self.size, self.size, 3)
        return img.reshape(self.size, self.size, 3) if single else img


def synthesize(gen: ToyGenerator, w, patch) -> Tensor:
    """Generate the full image for latent(s) ``w`` and cut out ``patch``."""
    if isinstance(w, LatentSignal):
        w = w.w
    w = as_tensor(w)
    single = w.ndim == 1
    W = w.reshape(1, -1) if single else w
    B = W.shape[0]
    if isinstance(patch, PatchCoords):
        patch = patch.as_array()
    p = np.asarray(patch, dtype=np.float64).reshape(-1, 4)
    if len(p) == 1 and B > 1:
        p = np.repeat(p, B, axis=0)
    if len(p) != B:
        raise ShapeError(f"synthesize: {len(p)} patches for {B} latents")
    p = p.astype(np.int64)
    h, wd = p[0, 2], p[0, 3]
    if np.any(p[:, 2] != h) or np.any(p[:, 3] != wd):
        raise ValueError("synthesize: all patches in a batch must share one size")
    n = gen.size
    if np.any(p[:, :2] < 0) or np.any(p[:, 0] + h > n) or np.any(p[:, 1] + wd > n) or h < 1 or wd < 1:
        raise ValueError(f"synthesize: patch out of bounds for a {n} x {n} image")
    img = gen(W).reshape(B * n * n, 3)
    r = p[:, 0, None, None] + np.arange(h)[None, :, None]
    c = p[:, 1, None, None] + np.arange(wd)[None, None, :]
    idx = (np.arange(B)[:, None, None] * n * n + r * n + c).reshape(-1)
    out = tn.gather(img, idx).reshape(B, h, wd, 3)
    return out.reshape(h, wd, 3) if single else out


class SynthesizeModel(ForwardModel):
    """Patch of a frozen generator's output; ``phi = (row, col, height, width)``."""

    param_dim = 4

    def __init__(self, generator: ToyGenerator | None = None):
        self.generator = generator or ToyGenerator()
        self.signal_shape = (self.generator.latent_dim,)

    def observation_shape(self, phi) -> tuple:
        p = _params(phi, 4)[0].astype(int)
        return (int(p[2]), int(p[3]), 3)

    def apply(self, S, phi) -> Tensor:
        S = as_tensor(S)
        phi = _params(phi, 4)
        self._check_batch(S, phi)
        return synthesize(self.generator, S, phi)

    def encode_param(self, phi) -> np.ndarray:
        p = _params(phi, 4)
        n = self.generator.size
        return np.stack([p[:, 0], p[:, 1], p[:, 0] + p[:, 2], p[:, 1] + p[:, 3]], axis=1) / n


# ---------------------------------------------------------------------------
# linear maps


def linear_map(S, A, b=None) -> Tensor:
    """``A @ S + b`` for a single signal, or row-wise for a ``(B, d)`` batch."""
    S = as_tensor(S)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if S.shape[-1] != A.shape[1]:
        raise ShapeError(f"linear_map: matrix {A.shape} does not act on signal {S.shape}")
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64).reshape(-1)
    if b.shape != (A.shape[0],):
        raise ShapeError(f"linear_map: offset {b.shape} does not match matrix {A.shape}")
    return S @ A.T + b


class LinearModel(ForwardModel):
    """Pose ``p`` observes ``A[p] @ S + b[p]``; ``phi`` is the pose index."""

    param_dim = 1

    def __init__(self, operators, offsets=None):
        ops = np.asarray(operators, dtype=np.float64)
        if ops.ndim == 2:
            ops = ops[:, None, :]
        self.operators = ops  # (P, m, d)
        P, m, d = ops.shape
        self.offsets = np.zeros((P, m)) if offsets is None else np.asarray(offsets, float).reshape(P, m)
        self.signal_shape = (d,)
        self._stacked = ops.reshape(P * m, d).T.copy()  # (d, P*m)
        self._stacked_b = self.offsets.reshape(-1)

    @property
    def n_poses(self) -> int:
        return self.operators.shape[0]

    def observation_shape(self, phi=None) -> tuple:
        return (self.operators.shape[1],)

    def apply(self, S, phi) -> Tensor:
        S = as_tensor(S)
        phi = _params(phi, 1)
        B = self._check_batch(S, phi)
        P, m, _ = self.operators.shape
        pose = phi[:, 0].astype(np.int64)
        if np.any(pose < 0) or np.any(pose >= P) or np.any(pose != phi[:, 0]):
            raise ValueError(f"LinearModel: pose indices must be integers in [0, {P})")
        every = (S @ self._stacked + self._stacked_b).reshape(B * P, m)
        return tn.gather(every, np.arange(B) * P + pose)

    def encode_param(self, phi) -> np.ndarray:
        pose = _params(phi, 1)[:, 0].astype(np.int64)
        return np.concatenate([self.operators[pose].reshape(len(pose), -1), self.offsets[pose]], axis=1)
