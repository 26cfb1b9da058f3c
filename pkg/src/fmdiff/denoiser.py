"""Conditional denoising networks that predict a signal from observations.

Networks are plain MLPs whose parameters live in an ordered ``dict`` of numpy
arrays. Every forward pass takes an optional mapping of parameter Tensors so
the same code runs tapeless at inference time and taped during training.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .forward_models import ForwardModel, RenderModel
from .tensor import Tensor, as_tensor

__all__ = [
    "MLP",
    "DenoiserNet",
    "DeterministicEstimator",
    "time_features",
    "denoise",
    "denoise_with_det_estimate",
    "denoise_from_estimate",
    "det_estimate",
    "det_extra_dim",
    "save_params",
    "load_params",
]


def time_features(t, T: int, n: int = 16) -> np.ndarray:
    """Sinusoidal features ``sin(pi k t / T), cos(pi k t / T)`` for k = 1..n/2."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(1, n // 2 + 1)
    ang = np.pi * t[:, None] * k[None, :] / T
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MLP:
    """Affine + ReLU blocks followed by a linear read-out."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0):
        self.sizes = list(sizes)
        self.params: dict[str, np.ndarray] = {}
        n_layers = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == n_layers - 1
            scale = out_scale / np.sqrt(a) if last else np.sqrt(2.0 / a)
            self.params[f"W{i}"] = rng.normal(0.0, scale, (a, b))
            self.params[f"b{i}"] = np.zeros(b)

    def forward(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        P = params if params is not None else self.params
        h = as_tensor(x)
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            h = h @ P[f"W{i}"] + P[f"b{i}"]
            if i < n_layers - 1:
                h = tn.relu(h)
        return h

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _flat(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def _pool_contexts(fm: ForwardModel, O_ctxt, phi_ctxt) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pool flattened context observations and their parameter encodings.

    ``O_ctxt`` is a batch ``(B, ...)`` or a list of such batches (one per
    context); ``phi_ctxt`` mirrors it.
    """
    if isinstance(O_ctxt, (list, tuple)):
        if len(O_ctxt) != len(phi_ctxt):
            raise ValueError("need one parameter batch per context batch")
        obs = [_flat(o) for o in O_ctxt]
        enc = [fm.encode_param(p) for p in phi_ctxt]
        if len(obs) == 1:
            return obs[0], enc[0]
        return np.mean(obs, axis=0), np.mean(enc, axis=0)
    return _flat(O_ctxt), fm.encode_param(phi_ctxt)


def _first_context(O_ctxt):
    return O_ctxt[0] if isinstance(O_ctxt, (list, tuple)) else O_ctxt


class DenoiserNet:
    """MLP over ``ctx ⊕ noisy target (⊕ extras) ⊕ enc(phi_ctxt) ⊕ enc(phi_trgt) ⊕ t-features``."""

    def __init__(
        self,
        fm: ForwardModel,
        T: int,
        hidden: Sequence[int] = (128, 128, 128),
        t_features: int = 16,
        ctxt_shape: tuple | None = None,
        trgt_shape: tuple | None = None,
        extra_dim: int = 0,
        seed: int = 0,
    ):
        self.fm = fm
        self.T = T
        self.t_features = t_features
        ctxt_shape = ctxt_shape or fm.observation_shape(None)
        trgt_shape = trgt_shape or fm.observation_shape(None)
        enc_dim = fm.encode_param(np.zeros((1, fm.param_dim))).shape[1]
        self.in_dim = (
            int(np.prod(ctxt_shape)) + int(np.prod(trgt_shape)) + extra_dim + 2 * enc_dim + t_features
        )
        self.out_shape = tuple(fm.net_output_shape)
        self.mlp = MLP([self.in_dim, *hidden, int(np.prod(self.out_shape))], np.random.default_rng(seed))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.mlp.params

    @params.setter
    def params(self, value: dict[str, np.ndarray]):
        self.mlp.params = value

    def __call__(self, ctx_block, trgt_block, enc_ctxt, enc_trgt, t, params=None) -> Tensor:
        B = trgt_block.shape[0]
        t = np.asarray(t)
        if t.dtype.kind not in "iu":
            raise TypeError("t must be an integer step")
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"step {t} outside [1, {self.T}]")
        tf = time_features(np.broadcast_to(t, (B,)), self.T, self.t_features)
        trgt = trgt_block if isinstance(trgt_block, Tensor) else Tensor(_flat(trgt_block))
        x = tn.concat([Tensor(ctx_block), trgt, Tensor(enc_ctxt), Tensor(enc_trgt), Tensor(tf)], axis=1)
        return self.mlp.forward(x, params).reshape((B,) + self.out_shape)


class DeterministicEstimator:
    """Signal estimate from the context alone (no noisy target, no step).

    For the rendering model the output grid carries ``feature_channels``
    extra per-cell channels that are composited like colors.
    """

    def __init__(
        self,
        fm: ForwardModel,
        hidden: Sequence[int] = (128, 128),
        feature_channels: int = 0,
        ctxt_shape: tuple | None = None,
        seed: int = 1,
    ):
        self.fm = fm
        self.feature_channels = feature_channels
        ctxt_shape = ctxt_shape or fm.observation_shape(None)
        enc_dim = fm.encode_param(np.zeros((1, fm.param_dim))).shape[1]
        out = tuple(fm.net_output_shape)
        if feature_channels:
            out = out[:-1] + (out[-1] + feature_channels,)
        self.out_shape = out
        self.in_dim = int(np.prod(ctxt_shape)) + 2 * enc_dim
        self.mlp = MLP([self.in_dim, *hidden, int(np.prod(out))], np.random.default_rng(seed))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.mlp.params

    @params.setter
    def params(self, value: dict[str, np.ndarray]):
        self.mlp.params = value

    def raw(self, O_ctxt, phi_ctxt, phi_trgt, params=None) -> Tensor:
        ctx, enc_c = _pool_contexts(self.fm, O_ctxt, phi_ctxt)
        x = np.concatenate([ctx, enc_c, self.fm.encode_param(phi_trgt)], axis=1)
        return self.mlp.forward(x, params).reshape((len(x),) + self.out_shape)

    def __call__(self, O_ctxt, phi_ctxt, phi_trgt, params=None) -> Tensor:
        """Assembled signal estimate (feature channels dropped)."""
        raw = self.raw(O_ctxt, phi_ctxt, phi_trgt, params)
        if self.feature_channels:
            raw = raw[..., : raw.shape[-1] - self.feature_channels]
        return self.fm.assemble(raw, _first_context(O_ctxt))


def denoise(net: DenoiserNet, O_ctxt, O_trgt_t, t, phi_ctxt, phi_trgt, params=None) -> Tensor:
    """Signal estimate from a context and a noisy target at step ``t``."""
    ctx, enc_c = _pool_contexts(net.fm, O_ctxt, phi_ctxt)
    raw = net(ctx, O_trgt_t, enc_c, net.fm.encode_param(phi_trgt), t, params)
    return net.fm.assemble(raw, _first_context(O_ctxt))


def det_estimate(est: DeterministicEstimator, fm: RenderModel, O_ctxt, phi_ctxt, phi_trgt, est_params=None):
    """``(scene, rendered target estimate, rendered feature image)`` from the context."""
    raw = est.raw(O_ctxt, phi_ctxt, phi_trgt, est_params)
    scene = raw[..., 0:4]
    if est.feature_channels:
        img, feats = fm.apply_with_features(raw, phi_trgt)
    else:
        img, feats = fm.apply(scene, phi_trgt), None
    return scene, img, feats


def denoise_from_estimate(net, fm, O_ctxt, O_trgt_t, t, phi_ctxt, phi_trgt, O_det, feats, params=None):
    B = O_det.shape[0]
    parts = [O_det.reshape(B, -1)]
    if feats is not None:
        parts.append(feats.reshape(B, -1))
    parts.append(Tensor(_flat(O_trgt_t)))
    trgt_block = tn.concat(parts, axis=1)
    ctx, enc_c = _pool_contexts(fm, O_ctxt, phi_ctxt)
    raw = net(ctx, trgt_block, enc_c, fm.encode_param(phi_trgt), t, params)
    return fm.assemble(raw, _first_context(O_ctxt))


def denoise_with_det_estimate(
    net: DenoiserNet,
    est: DeterministicEstimator,
    fm: RenderModel,
    O_ctxt,
    O_trgt_t,
    t,
    phi_ctxt,
    phi_trgt,
    params=None,
    est_params=None,
    zero_features: bool = False,
) -> Tensor:
    """Denoise with the rendered deterministic estimate (and features) as extra input.

    ``zero_features`` replaces the rendered feature image with zeros, for
    ablations.
    """
    _, O_det, feats = det_estimate(est, fm, O_ctxt, phi_ctxt, phi_trgt, est_params)
    if zero_features and feats is not None:
        feats = Tensor(np.zeros(feats.shape))
    return denoise_from_estimate(net, fm, O_ctxt, O_trgt_t, t, phi_ctxt, phi_trgt, O_det, feats, params)


def det_extra_dim(fm: ForwardModel, feature_channels: int) -> int:
    """Width of the extra target-side inputs produced by the deterministic estimate."""
    return int(np.prod(fm.observation_shape(None))) + fm.observation_shape(None)[0] * feature_channels


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` (manifest)."""
    path = Path(path)
    manifest, offset, chunks = [], 0, []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    path.with_suffix(".bin").write_bytes(np.concatenate(chunks).tobytes() if chunks else b"")
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f8", "count": offset, "arrays": manifest}, indent=1))


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["count"]:
        raise ValueError(f"checkpoint payload has {flat.size} values, manifest says {manifest['count']}")
    out = {}
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"]))
        out[entry["name"]] = flat[entry["offset"]: entry["offset"] + n].reshape(entry["shape"]).copy()
    return out
