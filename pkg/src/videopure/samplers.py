"""Reverse-process sampling and deterministic inversion.

The DDIM step and its inversion share one coefficient-swap helper, so the two
directions are exact mirrors: with a noise predictor whose output does not
depend on its input, inversion followed by denoising reproduces the input up
to float rounding.  The temporal inversion variant broadcasts frame 0's
predicted noise to every frame, which keeps the added noise identical across
frames and preserves inter-frame structure in the noised latent.

``run_denoise`` exposes a per-step hook that sees (t, z_t, eps_hat, z0_t) and
may return a replacement for z_t; the step then continues from the
replacement while reusing eps_hat.  Guided purification builds on this seam.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt
from typing import Callable, Optional

import torch

from .errors import ConfigError, NumericError, ScheduleError, ShapeError, require
from .schedule import (NoiseSchedule, RespacedSchedule, alpha_bar_at, predict_z0)

StepHook = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], Optional[torch.Tensor]]


@dataclass(frozen=True)
class SamplerConfig:
    """mode 'ddim' walks the respaced ladder up to ladder index t_star;
    mode 'ddpm' walks every training timestep up to training step t_star."""

    mode: str
    t_star: int
    sched: NoiseSchedule | RespacedSchedule

    def __post_init__(self):
        require(self.mode in ("ddim", "ddpm"), ConfigError,
                f"unknown sampler mode {self.mode!r}")
        if self.mode == "ddim":
            require(isinstance(self.sched, RespacedSchedule), ConfigError,
                    "ddim mode needs a RespacedSchedule")
            require(1 <= self.t_star <= self.sched.t_ddim, ConfigError,
                    f"t_star must be in [1, {self.sched.t_ddim}], got {self.t_star}")
        else:
            require(isinstance(self.sched, NoiseSchedule), ConfigError,
                    "ddpm mode needs a NoiseSchedule")
            require(1 <= self.t_star <= self.sched.t_train, ConfigError,
                    f"t_star must be in [1, {self.sched.t_train}], got {self.t_star}")


def _finite(z: torch.Tensor, what: str) -> torch.Tensor:
    require(bool(torch.isfinite(z).all()), NumericError, f"{what} produced non-finite values")
    return z


def _rescale(z: torch.Tensor, eps: torch.Tensor, ab_from: float, ab_to: float) -> torch.Tensor:
    """Move a latent between noise levels keeping the same eps estimate."""
    z64, e64 = z.double(), eps.double()
    z0 = (z64 - sqrt(1.0 - ab_from) * e64) / sqrt(ab_from)
    out = sqrt(ab_to) * z0 + sqrt(1.0 - ab_to) * e64
    return out.to(z.dtype)


def ddpm_step(z_t: torch.Tensor, t: int, eps_model, sched: NoiseSchedule,
              noise: torch.Tensor | None) -> torch.Tensor:
    """One ancestral step t -> t-1 with posterior variance; no noise at t=1."""
    require(1 <= t <= sched.t_train, ScheduleError, f"t={t} outside [1, {sched.t_train}]")
    eps = eps_model(z_t, t)
    a_t = float(sched.alpha[t])
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t - 1])
    mean = (z_t.double() - ((1.0 - a_t) / sqrt(1.0 - ab_t)) * eps.double()) / sqrt(a_t)
    if t == 1:
        return _finite(mean.to(z_t.dtype), "ddpm_step")
    require(noise is not None, ConfigError, "ddpm_step needs noise for t > 1")
    require(noise.shape == z_t.shape, ShapeError,
            f"noise shape {tuple(noise.shape)} != latent shape {tuple(z_t.shape)}")
    var = float(sched.beta[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    out = mean + sqrt(var) * noise.double()
    return _finite(out.to(z_t.dtype), "ddpm_step")


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, eps_model,
              rsched: RespacedSchedule) -> torch.Tensor:
    """Deterministic step t -> t_prev along the respaced ladder."""
    require(t_prev < t, ScheduleError, f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    ab_t = alpha_bar_at(rsched, t)
    ab_prev = alpha_bar_at(rsched, t_prev)
    eps = eps_model(z_t, t)
    return _finite(_rescale(z_t, eps, ab_t, ab_prev), "ddim_step")


def ddim_invert_step(z_prev: torch.Tensor, t_prev: int, t: int, eps_model,
                     rsched: RespacedSchedule, temporal: bool = False) -> torch.Tensor:
    """Deterministic inversion t_prev -> t.

    The noise estimate is taken at the previous (less noisy) latent with the
    target timestep.  With ``temporal`` set, frame 0's estimate is broadcast
    to every frame before the latent is moved up the ladder.
    """
    require(t_prev < t, ScheduleError, f"inversion needs t_prev < t, got {t_prev} >= {t}")
    ab_t = alpha_bar_at(rsched, t)
    ab_prev = alpha_bar_at(rsched, t_prev)
    eps = eps_model(z_prev, t)
    if temporal:
        require(eps.dim() >= 1, ShapeError, "temporal inversion needs a frame axis")
        eps = eps[0:1].expand_as(eps)
    return _finite(_rescale(z_prev, eps, ab_prev, ab_t), "ddim_invert_step")


def run_inversion(z0: torch.Tensor, cfg: SamplerConfig, eps_model,
                  temporal: bool = False) -> torch.Tensor:
    """Invert a clean latent up to ladder index cfg.t_star (DDIM only)."""
    require(cfg.mode == "ddim", ConfigError, "inversion is defined for ddim mode only")
    rs: RespacedSchedule = cfg.sched  # type: ignore[assignment]
    z = z0
    for k in range(1, cfg.t_star + 1):
        z = ddim_invert_step(z, int(rs.steps[k - 1]), int(rs.steps[k]),
                             eps_model, rs, temporal=temporal)
    return z


def run_denoise(z_start: torch.Tensor, cfg: SamplerConfig, eps_model,
                step_hook: StepHook | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Denoise from cfg.t_star down to 0.

    The hook fires once per step, before the transition.  If it returns a
    tensor, that tensor replaces z_t and the transition proceeds from it with
    the already-computed eps estimate.  DDPM mode draws its ancestral noise
    from ``generator``.
    """
    z = z_start
    if cfg.mode == "ddim":
        rs: RespacedSchedule = cfg.sched  # type: ignore[assignment]
        for k in range(cfg.t_star, 0, -1):
            t, t_prev = int(rs.steps[k]), int(rs.steps[k - 1])
            ab_t = alpha_bar_at(rs, t)
            ab_prev = alpha_bar_at(rs, t_prev)
            eps = eps_model(z, t)
            z0_t = predict_z0(z, eps, t, rs)
            if step_hook is not None:
                repl = step_hook(t, z, eps, z0_t)
                if repl is not None:
                    require(repl.shape == z.shape, ShapeError,
                            "step_hook replacement has the wrong shape")
                    z = repl
            z = _finite(_rescale(z, eps, ab_t, ab_prev), f"ddim denoise t={t}")
        return z

    ns: NoiseSchedule = cfg.sched  # type: ignore[assignment]
    require(generator is not None or cfg.t_star == 1, ConfigError,
            "ddpm mode needs a generator for its ancestral noise")
    for t in range(cfg.t_star, 0, -1):
        eps = eps_model(z, t)
        if step_hook is not None:
            z0_t = predict_z0(z, eps, t, ns)
            repl = step_hook(t, z, eps, z0_t)
            if repl is not None:
                require(repl.shape == z.shape, ShapeError,
                        "step_hook replacement has the wrong shape")
                z = repl
        noise = None
        if t > 1:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        # inline ancestral step reusing the eps estimate computed above
        a_t = float(ns.alpha[t])
        ab_t = float(ns.alpha_bar[t])
        mean = (z.double() - ((1.0 - a_t) / sqrt(1.0 - ab_t)) * eps.double()) / sqrt(a_t)
        if t == 1:
            z = mean.to(z.dtype)
        else:
            ab_prev = float(ns.alpha_bar[t - 1])
            var = float(ns.beta[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
            z = (mean + sqrt(var) * noise.double()).to(z.dtype)
        z = _finite(z, f"ddpm denoise t={t}")
    return z
