"""Reverse-mode gradients checked against central finite differences.

Each case builds a scalar ``sum(out * R)`` with a fixed random projection
``R`` so the whole Jacobian is exercised, then compares the taped gradient
with a per-coordinate central difference.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .forward_models import LinearModel, RenderModel, SynthesizeModel, WarpModel, linear_map
from .rng import stream
from .tensor import Tape

__all__ = ["finite_difference", "check_gradient", "GradCheckResult", "OP_CASES", "MODEL_CASES", "run_suite"]

OP_TOL = 1e-5
MODEL_TOL = 1e-4
ABS_TOL = 1e-8


def finite_difference(f: Callable[[list[np.ndarray]], float], inputs: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f`` with respect to every coordinate of every input."""
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for x in xs:
        g = np.zeros_like(x)
        flat, gf = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f(xs)
            flat[i] = keep - h
            down = f(xs)
            flat[i] = keep
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def reverse_mode(build: Callable, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    grads = tape.backward(build(leaves))
    return [grads[x].data for x in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """``(relative, absolute)`` error of ``a`` against ``b``, norm-wise."""
    diff = float(np.linalg.norm(a - b))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return (diff / scale if scale > 0 else 0.0), diff


@dataclass
class GradCheckResult:
    name: str
    points: int
    max_rel_error: float
    max_abs_error: float
    tol: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def check_gradient(name: str, build: Callable, sample_inputs: Callable, points: int = 10, tol: float = OP_TOL, seed: int = 0, h: float = 1e-5) -> GradCheckResult:
    """``build(list of Tensors) -> Tensor``; ``sample_inputs(rng) -> list of arrays``."""
    rng = stream(seed, "gradcheck", name)
    worst_rel = worst_abs = 0.0
    ok = True
    for _ in range(points):
        xs = sample_inputs(rng)
        out_shape = build([tn.Tensor(x) for x in xs]).shape
        R = rng.standard_normal(out_shape)

        def scalar(ts):
            return (build(ts) * R).sum()

        ad = reverse_mode(scalar, xs)
        fd = finite_difference(lambda arrs: scalar([tn.Tensor(a) for a in arrs]).item(), xs, h)
        for a, b in zip(ad, fd):
            rel, ab = relative_error(a, b)
            worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
            ok &= rel < tol or ab < ABS_TOL
    return GradCheckResult(name, points, worst_rel, worst_abs, tol, bool(ok))


# ---------------------------------------------------------------------------
# cases


def _normal(*shape):
    return lambda rng: [rng.standard_normal(s) for s in shape]


def _away_from_zero(shape, lo=0.2):
    def draw(rng):
        x = rng.uniform(lo, 2.0, shape)
        return x * rng.choice([-1.0, 1.0], shape)

    return draw


OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda t: t[0] + t[1], _normal((3, 4), (3, 4))),
    "add_broadcast": (lambda t: t[0] + t[1], _normal((3, 4), (1, 4))),
    "sub": (lambda t: t[0] - t[1], _normal((3, 4), (3, 4))),
    "mul": (lambda t: t[0] * t[1], _normal((3, 4), (3, 4))),
    "div": (lambda t: t[0] / t[1], lambda rng: [rng.standard_normal((3, 4)), _away_from_zero((3, 4), 0.5)(rng)]),
    "neg": (lambda t: -t[0], _normal((5,))),
    "matmul": (lambda t: t[0] @ t[1], _normal((3, 4), (4, 2))),
    "matmul_vec": (lambda t: t[0] @ t[1], _normal((3, 4), (4,))),
    "concat": (lambda t: tn.concat([t[0], t[1]], axis=1), _normal((3, 2), (3, 4))),
    "slice": (lambda t: t[0][1:3, ::2], _normal((4, 5))),
    "reshape": (lambda t: t[0].reshape(6, 2), _normal((3, 4))),
    "transpose": (lambda t: tn.transpose(t[0], (2, 0, 1)), _normal((2, 3, 4))),
    "sum": (lambda t: t[0].sum(axis=1), _normal((3, 4))),
    "mean": (lambda t: t[0].mean(axis=0), _normal((3, 4))),
    "exp": (lambda t: tn.exp(t[0]), _normal((6,))),
    "log": (lambda t: tn.log(t[0]), lambda rng: [rng.uniform(0.2, 3.0, 6)]),
    "sqrt": (lambda t: tn.sqrt(t[0]), lambda rng: [rng.uniform(0.2, 3.0, 6)]),
    "relu": (lambda t: tn.relu(t[0]), lambda rng: [_away_from_zero((6,), 0.05)(rng)]),
    "sigmoid": (lambda t: tn.sigmoid(t[0]), _normal((6,))),
    "softplus": (lambda t: tn.softplus(t[0]), _normal((6,))),
    "tanh": (lambda t: tn.tanh(t[0]), _normal((6,))),
    "gather": (lambda t: tn.gather(t[0], np.array([2, 0, 2, 1])), _normal((3, 2))),
    "gather_axis1": (lambda t: tn.gather(t[0], np.array([[0, 3], [1, 1]]), axis=1), _normal((2, 4))),
    "scatter_add": (lambda t: tn.scatter_add(t[0], np.array([1, 1, 3]), t[1]), _normal((4, 2), (3, 2))),
}


def _model_cases(seed: int = 0) -> dict[str, tuple[Callable, Callable]]:
    rng0 = stream(seed, "model-cases")
    render_fm = RenderModel(H=4, W=4, width=8, n_samples=16)
    pose = np.array([[rng0.uniform(0, 2 * np.pi), rng0.uniform(-0.2, 0.2)]])
    warp_fm = WarpModel(8)
    synth_fm = SynthesizeModel()
    lin_fm = LinearModel(rng0.standard_normal((3, 2, 3)), rng0.standard_normal((3, 2)))

    def warp_draw(rng):
        color = rng.uniform(0.1, 0.9, (1, 8, 3))
        motion = rng.uniform(-1.5, 1.5, (1, 8, 1))
        # keep every splat position at least 1e-3 away from an integer (kinks of the two-tap kernel)
        pos = motion[0, :, 0] * 0.7 + np.arange(8)
        frac = pos - np.floor(pos)
        motion[0, :, 0] += np.where(frac < 1e-3, 2e-3, 0.0) - np.where(frac > 1 - 1e-3, 2e-3, 0.0)
        return [np.concatenate([color, motion], axis=2)]

    return {
        "render": (lambda t: render_fm.apply(t[0], pose), lambda rng: [rng.normal(0.0, 1.0, (1, 4, 4, 4))]),
        "warp": (lambda t: warp_fm.apply(t[0], np.array([[0.7]])), warp_draw),
        "synthesize": (lambda t: synth_fm.apply(t[0], np.array([[2, 3, 4, 4]])), lambda rng: [rng.standard_normal((1, 16))]),
        "linear_map": (lambda t: linear_map(t[0], np.arange(6.0).reshape(2, 3), np.ones(2)), _normal((4, 3))),
        "linear_model": (lambda t: lin_fm.apply(t[0], np.array([[2.0], [0.0]])), _normal((2, 3))),
    }


MODEL_CASES = _model_cases()


def run_suite(points: int = 10, seed: int = 0) -> dict:
    """Every op at ``OP_TOL`` and every forward model at ``MODEL_TOL``."""
    t0 = time.perf_counter()
    results = []
    for name, (build, draw) in OP_CASES.items():
        results.append(check_gradient(name, build, draw, points, OP_TOL, seed))
    for name, (build, draw) in MODEL_CASES.items():
        results.append(check_gradient("model:" + name, build, draw, points, MODEL_TOL, seed))
    return {
        "results": [r.to_dict() for r in results],
        "passed": all(r.passed for r in results),
        "runtime_s": time.perf_counter() - t0,
    }
