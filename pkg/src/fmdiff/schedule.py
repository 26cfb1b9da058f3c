"""Variance schedules and the noising / re-noising steps built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor

__all__ = ["VarianceSchedule", "make_linear_schedule", "q_sample", "renoise", "ddpm_posterior_step"]


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise levels for a T-step forward process.

    ``beta[s-1]`` is the variance added at step ``s`` (1-based). The derived
    arrays are indexed by step, with index 0 meaning "no noise":
    ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``, ``C[t] = sqrt(alpha_bar[t])`` and
    ``beta_hat[t] = 1 - alpha_bar[t]``.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    C: np.ndarray
    beta_hat: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "VarianceSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        for arr in (beta, alpha_bar):
            arr.setflags(write=False)
        C = np.sqrt(alpha_bar)
        beta_hat = 1.0 - alpha_bar
        C.setflags(write=False)
        beta_hat.setflags(write=False)
        return cls(beta, alpha_bar, C, beta_hat)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.15) -> VarianceSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return VarianceSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _coef(values: np.ndarray, t, shape: tuple) -> np.ndarray:
    """Per-row coefficients broadcast explicitly to ``shape``."""
    c = values[np.asarray(t)]
    if c.ndim == 0:
        return np.full(shape, c)
    return np.broadcast_to(c.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def _check_steps(t, lo: int, hi: int, name: str):
    arr = np.asarray(t)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"{name}: step index must be an integer")
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(f"{name}: step {t} outside [{lo}, {hi}]")


def q_sample(x0, t, noise, sched: VarianceSchedule) -> Tensor:
    """Draw from the closed-form forward marginal q(x_t | x_0).

    ``t`` is either a scalar step or one step per leading row of ``x0``.
    """
    x0, noise = as_tensor(x0), as_tensor(noise)
    _check_steps(t, 1, sched.T, "q_sample")
    if noise.shape != x0.shape:
        raise ValueError(f"q_sample: noise shape {noise.shape} != x0 shape {x0.shape}")
    a = _coef(sched.C, t, x0.shape)
    s = _coef(np.sqrt(sched.beta_hat), t, x0.shape)
    return x0 * a + noise * s


def renoise(O_hat, t, noise, sched: VarianceSchedule) -> Tensor:
    """Re-noise a clean estimate to level ``t`` (``t`` in 0..T-1).

    At ``t == 0`` the result is ``O_hat`` itself.
    """
    O_hat, noise = as_tensor(O_hat), as_tensor(noise)
    _check_steps(t, 0, sched.T - 1, "renoise")
    if noise.shape != O_hat.shape:
        raise ValueError(f"renoise: noise shape {noise.shape} != estimate shape {O_hat.shape}")
    return O_hat * _coef(sched.C, t, O_hat.shape) + noise * _coef(np.sqrt(sched.beta_hat), t, O_hat.shape)


def ddpm_posterior_step(O_hat, x_t, t: int, noise, sched: VarianceSchedule, variance: str = "posterior") -> Tensor:
    """One draw from q(x_{t-1} | x_t, x_0 = O_hat); exact ``O_hat`` at ``t == 1``.

    ``variance="posterior"`` uses the variance of that Gaussian, which is right
    when x_0 is (nearly) determined by x_t. ``"beta"`` uses beta_t instead, the
    larger choice that does not shrink wide continuous posteriors.
    """
    if variance not in ("posterior", "beta"):
        raise ValueError(f"unknown variance {variance!r}; choose 'posterior' or 'beta'")
    O_hat, x_t, noise = as_tensor(O_hat), as_tensor(x_t), as_tensor(noise)
    _check_steps(t, 1, sched.T, "ddpm_posterior_step")
    if t == 1:
        return O_hat
    beta_t = sched.beta[t - 1]
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    std = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_t if variance == "posterior" else beta_t)
    return O_hat * c0 + x_t * ct + noise * std
