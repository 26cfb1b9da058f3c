"""Sample-based probability measures: pushforwards, densities, and two-sample tests.

A measure is represented by a finite weighted sample set. Degenerate
pushforwards (for example onto a line in the plane) stay exact as samples; no
density is ever attached to them.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .rng import stream

__all__ = [
    "EmpiricalMeasure",
    "DensityFn",
    "DensityEvaluation",
    "pushforward",
    "change_of_variables_density",
    "integrate_density",
    "verify_left_inverse",
    "LeftInverseReport",
    "slice_identity_check",
    "SliceIdentityResult",
    "two_sample_distance",
    "permutation_test",
    "PermutationResult",
    "chi_square_test",
    "cube_density",
    "measure_suite",
]

KINDS = ("energy", "ks_per_coordinate", "wasserstein1_1d")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """``N`` points in ``R^d`` with optional weights (uniform when ``None``)."""

    samples: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise ValueError(f"samples must be (N, d), got shape {s.shape}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(s):
                raise ValueError(f"{len(w)} weights for {len(s)} samples")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def probabilities(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n) if self.weights is None else self.weights

    def mean(self) -> np.ndarray:
        return self.probabilities() @ self.samples

    def resample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.samples[rng.choice(self.n, size=n, p=self.probabilities())]


def _as_measure(x) -> EmpiricalMeasure:
    return x if isinstance(x, EmpiricalMeasure) else EmpiricalMeasure(x)


def pushforward(mu: EmpiricalMeasure, f: Callable[[np.ndarray], np.ndarray]) -> EmpiricalMeasure:
    """Map every sample through ``f`` (vectorized over rows); weights carry over."""
    mu = _as_measure(mu)
    out = np.asarray(f(mu.samples), dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if len(out) != mu.n:
        raise ValueError(f"map returned {len(out)} points for {mu.n} samples")
    return EmpiricalMeasure(out, mu.weights)


# ---------------------------------------------------------------------------
# densities


@dataclass
class DensityEvaluation:
    values: np.ndarray
    bad_points: np.ndarray  # indices where the Jacobian factor was not finite


class DensityFn:
    """Pointwise density on ``R^d``; ``Z`` is the normalizing constant when known."""

    def __init__(self, evaluator: Callable[[np.ndarray], np.ndarray], Z: float | None = None):
        self.evaluator = evaluator
        self.Z = Z

    def evaluate(self, y) -> DensityEvaluation:
        vals = np.asarray(self.evaluator(np.asarray(y, dtype=np.float64)), dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(vals))
        return DensityEvaluation(vals, bad)

    def __call__(self, y) -> np.ndarray:
        return self.evaluate(y).values


def change_of_variables_density(p: DensityFn, f_inv: Callable, jac_det_f_inv: Callable) -> DensityFn:
    """Density of the pushforward through a diffeomorphism ``f``: ``p(f^-1(y)) |det d f^-1 (y)|``.

    Points where the Jacobian determinant is not finite evaluate to NaN and
    are listed in :attr:`DensityEvaluation.bad_points`.
    """

    def q(y):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            jac = np.abs(np.asarray(jac_det_f_inv(y), dtype=np.float64))
            val = np.asarray(p(f_inv(y)), dtype=np.float64) * jac
        return np.where(np.isfinite(jac), val, np.nan)

    return DensityFn(q, p.Z)


def integrate_density(q: Callable, lo: float, hi: float, n: int = 20001, singular_at: float | None = None, grade: int = 6) -> float:
    """Trapezoidal integral of a 1D density on ``[lo, hi]``.

    With ``singular_at`` the mesh is graded towards that point (spacing
    ``~ s^grade``) and the point itself is left out.
    """
    if singular_at is None:
        x = np.linspace(lo, hi, n)
        return float(np.trapezoid(q(x), x))
    total = 0.0
    s = np.linspace(0.0, 1.0, n)[1:]
    for end in (lo, hi):
        span = end - singular_at
        if span == 0:
            continue
        x = singular_at + span * s**grade
        vals = q(x)
        order = np.argsort(x)
        total += float(np.trapezoid(vals[order], x[order]))
    return total


# ---------------------------------------------------------------------------
# left inverses


@dataclass
class LeftInverseReport:
    exact: bool
    max_roundtrip_error: float
    worst_index: int
    worst_point: list
    distance: float  # largest per-coordinate W1 between the original and recovered measures

    def to_dict(self):
        return asdict(self)


def verify_left_inverse(mu: EmpiricalMeasure, f: Callable, f_left_inv: Callable, tol: float = 0.0) -> LeftInverseReport:
    """Push ``mu`` forward through ``f`` then back through ``f_left_inv`` and compare."""
    mu = _as_measure(mu)
    back = pushforward(pushforward(mu, f), f_left_inv)
    if back.samples.shape != mu.samples.shape:
        raise ValueError(f"left inverse returned shape {back.samples.shape}, expected {mu.samples.shape}")
    err = np.abs(back.samples - mu.samples).max(axis=1)
    worst = int(np.argmax(err)) if len(err) else 0
    dist = max(
        (stats.wasserstein_distance(mu.samples[:, k], back.samples[:, k], mu.weights, back.weights) for k in range(mu.dim)),
        default=0.0,
    )
    return LeftInverseReport(
        exact=bool(np.all(err <= tol)),
        max_roundtrip_error=float(err.max()) if len(err) else 0.0,
        worst_index=worst,
        worst_point=mu.samples[worst].tolist() if len(err) else [],
        distance=float(dist),
    )


# ---------------------------------------------------------------------------
# slice identity


@dataclass
class SliceIdentityResult:
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float

    @property
    def stderr(self) -> float:
        return float(np.hypot(self.lhs_stderr, self.rhs_stderr))

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    def agrees(self, k: float = 3.0) -> bool:
        return self.gap <= k * self.stderr

    def to_dict(self):
        d = asdict(self)
        d["stderr"] = self.stderr
        return d


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def slice_identity_check(g: Callable, mu_T: EmpiricalMeasure | np.ndarray, n_mc: int, seed: int = 0, grid_shape=None, enumerate_rhs: bool = False) -> SliceIdentityResult:
    """Compare joint averaging of ``g`` over (pixel, pose, total observation) with slice averaging.

    ``mu_T`` holds total observations of shape ``(N, H, W, P, ...)``; either an
    array or an :class:`EmpiricalMeasure` over flattened rows together with
    ``grid_shape = (H, W, P, ...)``. ``g(x, y, phi, tot)`` is vectorized: three
    integer index arrays and the matching stack of total observations, and
    returns one real per row.

    LHS draws ``n_mc`` independent (x, y, phi, total observation) tuples. RHS
    draws ``n_mc // (H W)`` (phi, total observation) pairs and averages each
    full ``H x W`` slice, so both sides evaluate ``g`` about ``n_mc`` times.
    ``enumerate_rhs`` computes RHS exactly over every sample and pose instead.
    """
    if n_mc <= 0:
        raise ValueError("n_mc must be positive")
    if isinstance(mu_T, EmpiricalMeasure):
        if grid_shape is None:
            raise ValueError("grid_shape is required with a flattened EmpiricalMeasure")
        tot = mu_T.samples.reshape((mu_T.n,) + tuple(grid_shape))
        probs = mu_T.probabilities()
    else:
        tot = np.asarray(mu_T, dtype=np.float64)
        probs = np.full(len(tot), 1.0 / len(tot))
    N, H, W, P = tot.shape[:4]
    rng = stream(seed, "slice-identity")

    k = rng.choice(N, size=n_mc, p=probs)
    x = rng.integers(0, H, n_mc)
    y = rng.integers(0, W, n_mc)
    phi = rng.integers(0, P, n_mc)
    lhs, lhs_se = _mean_se(np.asarray(g(x, y, phi, tot[k]), dtype=np.float64))

    xs, ys = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    if enumerate_rhs:
        per_sample = np.zeros(N)
        for p in range(P):
            for i in range(N):
                rows = np.full(H * W, i)
                per_sample[i] += np.mean(g(xs, ys, np.full(H * W, p), tot[rows])) / P
        return SliceIdentityResult(lhs, float(probs @ per_sample), lhs_se, 0.0)

    m = max(1, n_mc // (H * W))
    ks = rng.choice(N, size=m, p=probs)
    ps = rng.integers(0, P, m)
    X = np.tile(xs, m)
    Y = np.tile(ys, m)
    PHI = np.repeat(ps, H * W)
    vals = np.asarray(g(X, Y, PHI, tot[np.repeat(ks, H * W)]), dtype=np.float64).reshape(m, H * W)
    rhs, rhs_se = _mean_se(vals.mean(axis=1))
    return SliceIdentityResult(lhs, rhs, lhs_se, rhs_se)


# ---------------------------------------------------------------------------
# two-sample statistics


def _weighted_cdf_gap(a: np.ndarray, wa: np.ndarray, b: np.ndarray, wb: np.ndarray) -> float:
    grid = np.sort(np.concatenate([a, b]))
    oa, ob = np.argsort(a), np.argsort(b)
    ca = np.concatenate([[0.0], np.cumsum(wa[oa])])
    cb = np.concatenate([[0.0], np.cumsum(wb[ob])])
    Fa = ca[np.searchsorted(a[oa], grid, side="right")]
    Fb = cb[np.searchsorted(b[ob], grid, side="right")]
    return float(np.max(np.abs(Fa - Fb)))


def _pairwise_mean(x, wx, y, wy, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        d = np.sqrt(((x[i: i + chunk, None, :] - y[None, :, :]) ** 2).sum(-1))
        total += wx[i: i + chunk] @ d @ wy
    return float(total)


def _energy(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    if a.dim == 1:
        return float(stats.energy_distance(a.samples[:, 0], b.samples[:, 0], a.weights, b.weights))
    pa, pb = a.probabilities(), b.probabilities()
    xy = _pairwise_mean(a.samples, pa, b.samples, pb)
    xx = _pairwise_mean(a.samples, pa, a.samples, pa)
    yy = _pairwise_mean(b.samples, pb, b.samples, pb)
    return float(np.sqrt(max(0.0, 2 * xy - xx - yy)))


def two_sample_distance(a, b, kind: str = "energy") -> float:
    """Distance between two empirical measures.

    ``energy``: energy distance ``sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|)``.
    ``ks_per_coordinate``: largest Kolmogorov-Smirnov gap over coordinates.
    ``wasserstein1_1d``: W1 between one-dimensional measures.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.n == 0 or b.n == 0:
        raise ValueError("empty measure")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if kind == "energy":
        return _energy(a, b)
    if kind == "ks_per_coordinate":
        pa, pb = a.probabilities(), b.probabilities()
        return max(_weighted_cdf_gap(a.samples[:, k], pa, b.samples[:, k], pb) for k in range(a.dim))
    if kind == "wasserstein1_1d":
        if a.dim != 1:
            raise ValueError(f"wasserstein1_1d needs one-dimensional samples, got d={a.dim}")
        return float(stats.wasserstein_distance(a.samples[:, 0], b.samples[:, 0], a.weights, b.weights))
    raise ValueError(f"unknown distance kind {kind!r}; choose from {KINDS}")


@dataclass
class PermutationResult:
    statistic: float
    threshold: float  # (1 - alpha) quantile of the permutation distribution
    p_value: float
    reject: bool
    n_perm: int
    alpha: float

    def to_dict(self):
        return asdict(self)


def permutation_test(a, b, kind: str = "energy", n_perm: int = 200, alpha: float = 0.01, seed: int = 0) -> PermutationResult:
    """Two-sample permutation test on unweighted samples."""
    a, b = _as_measure(a), _as_measure(b)
    if a.weights is not None or b.weights is not None:
        raise ValueError("permutation tests need unweighted samples")
    stat = two_sample_distance(a, b, kind)
    pooled = np.concatenate([a.samples, b.samples])
    rng = stream(seed, "permutation")
    perm = np.empty(n_perm)
    for i in range(n_perm):
        idx = rng.permutation(len(pooled))
        perm[i] = two_sample_distance(pooled[idx[: a.n]], pooled[idx[a.n:]], kind)
    p = (1 + np.sum(perm >= stat)) / (1 + n_perm)
    return PermutationResult(float(stat), float(np.quantile(perm, 1 - alpha)), float(p), bool(p < alpha), n_perm, alpha)


@dataclass
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    reject: bool
    used_bins: int

    def to_dict(self):
        return asdict(self)


def chi_square_test(samples, edges, bin_probs, exclude=(), alpha: float = 0.01) -> ChiSquareResult:
    """Pearson chi-square of binned 1D samples against given bin probabilities.

    Bins listed in ``exclude`` are dropped and the remaining probabilities
    renormalized (the test is then conditional on landing in a kept bin).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    counts, _ = np.histogram(samples, bins=edges)
    keep = np.ones(len(counts), dtype=bool)
    keep[list(exclude)] = False
    obs = counts[keep]
    probs = np.asarray(bin_probs, dtype=np.float64)[keep]
    expected = probs / probs.sum() * obs.sum()
    stat, p = stats.chisquare(obs, expected)
    return ChiSquareResult(float(stat), int(keep.sum() - 1), float(p), bool(p < alpha), int(keep.sum()))


# ---------------------------------------------------------------------------
# the full suite


def _normal_pdf(x, var=1.0):
    return np.exp(-0.5 * np.asarray(x) ** 2 / var) / np.sqrt(2 * np.pi * var)


def cube_density() -> DensityFn:
    """Density of ``x^3`` for ``x ~ U[-1, 1]`` via change of variables (singular at 0)."""
    uniform = DensityFn(lambda x: np.where(np.abs(x) <= 1, 0.5, 0.0), Z=1.0)
    return change_of_variables_density(uniform, np.cbrt, lambda y: (1.0 / 3.0) * np.abs(y) ** (-2.0 / 3.0))


def measure_suite(seed: int = 0, n: int = 100_000, n_bins: int = 20) -> dict:
    """Run every measure check; returns ``{name: {statistic, threshold, passed, ...}}`` plus runtime."""
    t0 = time.perf_counter()
    out: dict[str, dict] = {}
    rng = stream(seed, "measure-suite")

    # delta-supported embedding x -> (x, 0)
    mu = EmpiricalMeasure(rng.standard_normal(n))
    emb = pushforward(mu, lambda x: np.concatenate([x, np.zeros_like(x)], axis=1))
    off_line = float(np.abs(emb.samples[:, 1]).max())
    out["embedding_concentration"] = {"statistic": off_line, "threshold": 0.0, "passed": off_line == 0.0}

    # x^3 pushforward of U[-1, 1] against the change-of-variables density
    u = EmpiricalMeasure(rng.uniform(-1, 1, n))
    cube = pushforward(u, lambda x: x**3)
    q = cube_density()
    edges = np.linspace(-1, 1, n_bins + 1)
    probs = np.array([integrate_density(q, lo, hi, n=4001, singular_at=0.0 if lo < 0 < hi or 0 in (lo, hi) else None) for lo, hi in zip(edges[:-1], edges[1:])])
    centre = [i for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])) if lo <= 0 <= hi]
    chi = chi_square_test(cube.samples, edges, probs, exclude=centre)
    out["cube_chi_square"] = {"statistic": chi.statistic, "p_value": chi.p_value, "threshold": 0.01, "passed": not chi.reject, "excluded_bins": centre}

    # left inverses
    li = verify_left_inverse(mu, lambda x: np.concatenate([x, np.zeros_like(x)], axis=1), lambda y: y[:, :1])
    out["left_inverse_embedding"] = {"statistic": li.max_roundtrip_error, "threshold": 0.0, "passed": li.exact}
    lc = verify_left_inverse(u, lambda x: x**3, np.cbrt, tol=1e-12)
    out["left_inverse_cube"] = {"statistic": lc.max_roundtrip_error, "threshold": 1e-12, "passed": lc.exact}

    # slice identity on the squared error between a denoised and a true total observation
    H, W, P = 4, 4, 6
    truth = rng.uniform(0, 1, (64, H, W, P))
    denoised = truth + 0.3 * rng.standard_normal(truth.shape) * rng.uniform(0.2, 1.0, (64, 1, 1, P))
    tot = np.stack([denoised, truth], axis=-1)

    def sq_err(x, y, phi, T):
        r = np.arange(len(x))
        return (T[r, x, y, phi, 0] - T[r, x, y, phi, 1]) ** 2

    sl = slice_identity_check(sq_err, tot, n, seed=seed)
    out["slice_identity"] = {"statistic": sl.gap, "threshold": 3 * sl.stderr, "passed": sl.agrees(3.0), **sl.to_dict()}

    # change-of-variables densities integrate to one
    scaled = change_of_variables_density(DensityFn(_normal_pdf, 1.0), lambda y: y / 2, lambda y: np.full_like(y, 0.5))
    i_scaled = integrate_density(scaled, -20, 20, n=20001)
    i_cube = integrate_density(q, -1, 1, n=20001, singular_at=0.0)
    for name, val in (("integral_scaled_normal", i_scaled), ("integral_cube", i_cube)):
        out[name] = {"statistic": abs(val - 1), "value": val, "threshold": 1e-3, "passed": abs(val - 1) < 1e-3}

    out["runtime_s"] = {"statistic": time.perf_counter() - t0, "threshold": 120.0}
    out["runtime_s"]["passed"] = out["runtime_s"]["statistic"] < 120.0
    return out
