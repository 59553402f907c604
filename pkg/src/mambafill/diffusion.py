"""Denoising-diffusion machinery: noise schedule, forward corruption,
conditional reverse step, and the target-masked training loss.

Convention: alpha_t = 1 - beta_t and alpha_bar_t is the running product of
alpha. Steps are 1-indexed (t in [1, T]); arrays store step t at index t-1.
The reverse variance is fixed to beta_t.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ScheduleError(ValueError):
    pass


class EmptyTargetError(ValueError):
    """The target mask selects nothing; the caller must resample the batch."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable beta/alpha tables for a T-step chain."""

    steps: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def sigma(self, t: int) -> float:
        """Fixed reverse standard deviation at step t."""
        return float(np.sqrt(self.beta[t - 1]))


def quadratic_schedule(steps: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    """Variance schedule linear in sqrt(beta) between the two endpoints."""
    if steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {steps}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ScheduleError(
            f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    sqrt_beta = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), steps)
    beta = sqrt_beta ** 2
    # linspace guarantees exact endpoints; squaring preserves them up to the
    # round trip, which we pin exactly.
    beta[0] = beta_min
    beta[-1] = beta_max
    alpha = 1.0 - beta
    return DiffusionSchedule(steps=steps, beta=beta, alpha=alpha,
                             alpha_bar=np.cumprod(alpha))


def _check_step(t: int, schedule: DiffusionSchedule) -> None:
    if not 1 <= t <= schedule.steps:
        raise ScheduleError(f"step {t} outside [1, {schedule.steps}]")


def forward_noise(x0: np.ndarray, t, eps: np.ndarray,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar step or an integer array of per-sample steps whose
    shape broadcasts against the leading axis of ``x0``.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.steps):
        raise ScheduleError(f"step(s) outside [1, {schedule.steps}]")
    abar = schedule.alpha_bar[t_arr - 1]
    if t_arr.ndim:
        abar = abar.reshape(abar.shape + (1,) * (x0.ndim - abar.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                 schedule: DiffusionSchedule, z: np.ndarray | None = None) -> np.ndarray:
    """One conditional reverse transition.

    mean = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t), and
    x_{t-1} = mean + sqrt(beta_t) z. ``z`` must be None (treated as zero) at
    t = 1; the chain emits the mean at the final step.
    """
    _check_step(t, schedule)
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if z is None:
        return mean
    return mean + np.sqrt(beta) * z


def masked_loss(eps: np.ndarray, eps_hat: Tensor | np.ndarray, target_mask: np.ndarray):
    """Mean squared error restricted to target entries only.

    Values outside the target mask never influence the result. Raises
    EmptyTargetError when the mask selects nothing (the trainer must
    resample such degenerate batches rather than silently skip them).
    """
    mask = np.asarray(target_mask, dtype=bool)
    if not mask.any():
        raise EmptyTargetError("target mask selects no entries")
    eps_hat = ad.constant(eps_hat)
    diff = ad.sub(eps_hat, ad.constant(np.asarray(eps, dtype=np.float64)))
    selected = ad.masked_select(ad.mul(diff, diff), mask)
    return ad.mean(selected)
