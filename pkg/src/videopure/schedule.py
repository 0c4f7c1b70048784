"""Noise schedules and closed-form diffusion algebra.

Timesteps are 1-based: index 0 is a sentinel where alpha_bar = 1 (no noise).
All schedule tables are float64; tensor operations take their coefficients as
python floats so float32 trajectories stay float32 while float64 inputs keep
full precision.  The linear combinations themselves are evaluated in float64
and cast back, which keeps round-trip identities tight without changing the
caller-visible dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log, sqrt

import numpy as np
import torch

from .errors import ScheduleError, ShapeError, require


@dataclass(frozen=True)
class NoiseSchedule:
    """Training-resolution schedule: beta[t], alpha[t] = 1 - beta[t], and the
    running product alpha_bar[t], all for t = 0..t_train with t = 0 a sentinel."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def t_train(self) -> int:
        return len(self.beta) - 1


def make_linear_schedule(t_train: int = 1000, beta_min: float = 1e-4,
                         beta_max: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced betas from beta_min at t=1 to beta_max at t=t_train."""
    require(t_train >= 1, ScheduleError, f"t_train must be >= 1, got {t_train}")
    require(0.0 < beta_min <= beta_max < 1.0, ScheduleError,
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.zeros(t_train + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_min, beta_max, t_train, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] = 1 makes alpha_bar[0] = 1
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class RespacedSchedule:
    """Evenly thinned timestep ladder for DDIM: steps[0] = 0 up to steps[-1] =
    t_train, with alpha_bar looked up from the base schedule at those steps."""

    steps: np.ndarray
    alpha_bar: np.ndarray
    base: NoiseSchedule

    @property
    def t_ddim(self) -> int:
        return len(self.steps) - 1

    def index_of(self, t: int) -> int:
        """Ladder index k with steps[k] == t; error if t is not on the ladder."""
        k = int(np.searchsorted(self.steps, t))
        require(k < len(self.steps) and self.steps[k] == t, ScheduleError,
                f"t={t} is not a respaced step; ladder has stride {self.steps[1] if len(self.steps) > 1 else '?'}")
        return k

    def contains(self, t: int) -> bool:
        k = int(np.searchsorted(self.steps, t))
        return k < len(self.steps) and int(self.steps[k]) == t


def respace(sched: NoiseSchedule, t_ddim: int) -> RespacedSchedule:
    """Thin the training schedule to t_ddim evenly spaced steps ending at t_train."""
    require(1 <= t_ddim <= sched.t_train, ScheduleError,
            f"t_ddim must be in [1, {sched.t_train}], got {t_ddim}")
    steps = np.round(np.linspace(0, sched.t_train, t_ddim + 1)).astype(np.int64)
    require(np.all(np.diff(steps) > 0), ScheduleError,
            f"respacing to {t_ddim} steps is not strictly increasing for t_train={sched.t_train}")
    return RespacedSchedule(steps=steps, alpha_bar=sched.alpha_bar[steps], base=sched)


Schedule = NoiseSchedule | RespacedSchedule


def alpha_bar_at(sched: Schedule, t: int) -> float:
    """alpha_bar at timestep t; for a respaced schedule t must be on the ladder."""
    if isinstance(sched, RespacedSchedule):
        return float(sched.alpha_bar[sched.index_of(t)])
    require(0 <= t <= sched.t_train, ScheduleError,
            f"t={t} outside schedule range [0, {sched.t_train}]")
    return float(sched.alpha_bar[t])


def _check_like(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    require(a.shape == b.shape, ShapeError,
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _lincomb(ca: float, a: torch.Tensor, cb: float, b: torch.Tensor) -> torch.Tensor:
    # evaluate in float64, return in the dtype of `a`
    return (ca * a.double() + cb * b.double()).to(a.dtype)


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor,
                    sched: Schedule) -> torch.Tensor:
    """Closed-form jump to noise level t: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    _check_like(z0, eps, "forward_diffuse")
    require(t >= 1, ScheduleError, f"forward_diffuse needs t >= 1, got {t}")
    ab = alpha_bar_at(sched, t)
    return _lincomb(sqrt(ab), z0, sqrt(1.0 - ab), eps)


def forward_diffuse_markov(z0: torch.Tensor, t: int, noise_seq: list[torch.Tensor],
                           sched: NoiseSchedule) -> torch.Tensor:
    """Step-by-step diffusion z_s = sqrt(1-beta_s) z_{s-1} + sqrt(beta_s) eps_s.

    Distributionally equivalent to forward_diffuse given i.i.d. standard-normal
    noises; kept as the reference chain for testing the closed form.
    """
    require(1 <= t <= sched.t_train, ScheduleError, f"t={t} outside [1, {sched.t_train}]")
    require(len(noise_seq) == t, ShapeError,
            f"need {t} noise tensors for a length-{t} chain, got {len(noise_seq)}")
    z = z0
    for s in range(1, t + 1):
        eps_s = noise_seq[s - 1]
        _check_like(z, eps_s, f"forward_diffuse_markov step {s}")
        b = float(sched.beta[s])
        z = _lincomb(sqrt(1.0 - b), z, sqrt(b), eps_s)
    return z


def predict_z0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
               sched: Schedule) -> torch.Tensor:
    """Posterior-mean estimate of the clean signal: (z_t - sqrt(1-ab)*eps)/sqrt(ab).

    Differentiable in both tensor arguments.
    """
    _check_like(z_t, eps_hat, "predict_z0")
    require(t >= 1, ScheduleError, f"predict_z0 needs t >= 1, got {t}")
    ab = alpha_bar_at(sched, t)
    out = (z_t.double() - sqrt(1.0 - ab) * eps_hat.double()) / sqrt(ab)
    return out.to(z_t.dtype)


def effective_beta(rsched: RespacedSchedule, t: int) -> float:
    """beta of the thinned chain at ladder point t: 1 - ab[t]/ab[prev]."""
    k = rsched.index_of(t)
    require(k >= 1, ScheduleError, "effective_beta undefined at the t=0 sentinel")
    return float(1.0 - rsched.alpha_bar[k] / rsched.alpha_bar[k - 1])


def ddim_sigma_sq(t: int, rsched: RespacedSchedule,
                  first_step: str = "substitute") -> float:
    """Guidance scale log((1-ab_prev)/(1-ab_t)) * beta_t on the thinned ladder.

    The ratio shrinks as t falls, so the value is negative everywhere it is
    defined.  At the first ladder point ab_prev = 1 makes the log diverge;
    ``first_step='substitute'`` reuses the value from the second ladder point
    there, which keeps the scale finite and of the same sign.
    """
    require(first_step in ("substitute", "raw"), ScheduleError,
            f"unknown first_step policy {first_step!r}")
    k = rsched.index_of(t)
    require(k >= 1, ScheduleError, "ddim_sigma_sq undefined at the t=0 sentinel")
    if k == 1:
        require(first_step == "substitute", ScheduleError,
                "sigma^2 diverges at the first ladder step (alpha_bar_prev = 1)")
        require(rsched.t_ddim >= 2, ScheduleError,
                "substitute policy needs at least two ladder steps")
        return ddim_sigma_sq(int(rsched.steps[2]), rsched, first_step="raw")
    ab_t = float(rsched.alpha_bar[k])
    ab_prev = float(rsched.alpha_bar[k - 1])
    return log((1.0 - ab_prev) / (1.0 - ab_t)) * effective_beta(rsched, t)
