"""Spatial and temporal guidance for purification.

The spatial term rewards candidates that stay close to the original latent:
it is the negative Euclidean distance, so it is always <= 0 and larger is
closer.  The temporal term penalizes motion inconsistency: each latent frame
is compared against the next frame warped backward along the clip's optical
flow, summed as absolute differences.  The guided update nudges a latent
against the loss gradient scaled by alpha_s and the (negative) log-ratio
variance of the thinned ladder, matching the sign convention used throughout:
alpha_s < 0 and sigma^2 < 0, so the applied scale is positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter

from .data import FlowField, VideoTensor
from .errors import ConfigError, NumericError, ShapeError, require
from .schedule import RespacedSchedule, predict_z0


@dataclass(frozen=True)
class GuidanceConfig:
    alpha_s: float = -4.0
    lambda_temp: float = 5.0       # temporal consistency weight
    lambda_spa: float = 800.0      # spatial similarity weight
    flow_source: str = "ground-truth"   # or "estimator"
    backprop_through_model: bool = True  # False: treat eps_hat as a constant
    first_step: str = "substitute"       # sigma^2 policy at the first ladder step

    def __post_init__(self):
        require(self.lambda_temp >= 0 and self.lambda_spa >= 0, ConfigError,
                "guidance weights must be non-negative")
        require(self.flow_source in ("ground-truth", "estimator"), ConfigError,
                f"unknown flow_source {self.flow_source!r}")

    @property
    def enabled(self) -> bool:
        return self.lambda_temp > 0 or self.lambda_spa > 0


def _flow_tensor(flow: FlowField | torch.Tensor) -> torch.Tensor:
    v = flow.vectors if isinstance(flow, FlowField) else flow
    require(isinstance(v, torch.Tensor) and v.dim() == 4 and v.shape[-1] == 2, ShapeError,
            f"flow must be (N-1,H,W,2), got {tuple(getattr(v, 'shape', ()))}")
    require(bool(torch.isfinite(v).all()), NumericError, "flow contains non-finite values")
    return v


def backward_warp(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``frame`` (H, W, C) at positions displaced by ``flow`` (H, W, 2).

    Bilinear with border clamping; differentiable in ``frame``.  Integer flow
    lands exactly on pixels, so warping by the true flow of a rigid shift
    reproduces the previous frame except where content left the border.
    """
    require(frame.dim() == 3, ShapeError, f"frame must be (H,W,C), got {tuple(frame.shape)}")
    require(flow.shape[:2] == frame.shape[:2] and flow.shape[-1] == 2, ShapeError,
            f"flow {tuple(flow.shape)} does not match frame {tuple(frame.shape)}")
    require(bool(torch.isfinite(flow).all()), NumericError, "flow contains non-finite values")
    h, w = frame.shape[:2]
    yy, xx = torch.meshgrid(torch.arange(h, dtype=frame.dtype),
                            torch.arange(w, dtype=frame.dtype), indexing="ij")
    sx = (xx + flow[..., 0]).clamp(0, w - 1)
    sy = (yy + flow[..., 1]).clamp(0, h - 1)
    x0 = sx.floor().long()
    y0 = sy.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (sx - x0.to(frame.dtype))[..., None]
    wy = (sy - y0.to(frame.dtype))[..., None]
    v00 = frame[y0, x0]
    v01 = frame[y0, x1]
    v10 = frame[y1, x0]
    v11 = frame[y1, x1]
    return ((1 - wy) * ((1 - wx) * v00 + wx * v01)
            + wy * ((1 - wx) * v10 + wx * v11))


def loss_temporal(z0_star: torch.Tensor, flow: FlowField | torch.Tensor) -> torch.Tensor:
    """Sum over frame pairs of |warp(z[i+1], flow[i]) - z[i]|, summed over pixels."""
    v = _flow_tensor(flow)
    require(z0_star.dim() == 4, ShapeError, "expected a latent video (N,h,w,c)")
    require(v.shape[0] == z0_star.shape[0] - 1 and v.shape[1:3] == z0_star.shape[1:3],
            ShapeError, f"flow {tuple(v.shape)} does not pair with latent {tuple(z0_star.shape)}")
    total = z0_star.new_zeros(())
    for i in range(z0_star.shape[0] - 1):
        warped = backward_warp(z0_star[i + 1], v[i])
        total = total + (warped - z0_star[i]).abs().sum()
    return total


def loss_spatial(z0_ref: torch.Tensor, z0_star: torch.Tensor) -> torch.Tensor:
    """Negative Euclidean distance between the candidate and the reference."""
    require(z0_ref.shape == z0_star.shape, ShapeError,
            f"shape mismatch {tuple(z0_ref.shape)} vs {tuple(z0_star.shape)}")
    return -torch.linalg.vector_norm(z0_ref - z0_star)


def combined_loss(z0_ref: torch.Tensor, z0_star: torch.Tensor,
                  flow: FlowField | torch.Tensor | None,
                  cfg: GuidanceConfig) -> torch.Tensor:
    """lambda_temp * L_temp + lambda_spa * L_spa, skipping zero-weight terms."""
    total = z0_star.new_zeros(())
    if cfg.lambda_temp > 0:
        require(flow is not None, ConfigError, "temporal loss needs a flow field")
        total = total + cfg.lambda_temp * loss_temporal(z0_star, flow)
    if cfg.lambda_spa > 0:
        total = total + cfg.lambda_spa * loss_spatial(z0_ref, z0_star)
    require(bool(torch.isfinite(total)), NumericError, "guidance loss is non-finite")
    return total


def guided_update(z: torch.Tensor, grad: torch.Tensor, alpha_s: float,
                  sigma_sq: float) -> torch.Tensor:
    """z - alpha_s * sigma^2 * grad; finite in, finite out."""
    require(z.shape == grad.shape, ShapeError, "gradient shape mismatch")
    require(np.isfinite(alpha_s) and np.isfinite(sigma_sq), NumericError,
            "guidance scale must be finite")
    out = z - (alpha_s * sigma_sq) * grad
    require(bool(torch.isfinite(out).all()), NumericError, "guided update produced non-finite values")
    return out


def guidance_gradient(z_t: torch.Tensor, z0_ref: torch.Tensor, t: int, eps_model,
                      flow: FlowField | torch.Tensor | None, cfg: GuidanceConfig,
                      rsched: RespacedSchedule) -> torch.Tensor:
    """Gradient of the combined loss at z_t through z0_t = predict_z0(z_t, eps, t).

    With both weights zero this returns an exact zero tensor.  By default the
    eps estimate is part of the graph; with backprop_through_model=False it is
    treated as a constant evaluated at z_t.
    """
    if not cfg.enabled:
        return torch.zeros_like(z_t)
    with torch.enable_grad():  # callers often purify under no_grad
        z = z_t.detach().clone().requires_grad_(True)
        if cfg.backprop_through_model:
            eps = eps_model(z, t)
        else:
            with torch.no_grad():
                eps = eps_model(z_t, t)
        z0_t = predict_z0(z, eps, t, rsched)
        loss = combined_loss(z0_ref.detach(), z0_t, flow, cfg)
        (grad,) = torch.autograd.grad(loss, z)
    require(bool(torch.isfinite(grad).all()), NumericError, "guidance gradient is non-finite")
    return grad.detach()


def guidance_gradient_direct(z0_star: torch.Tensor, z0_ref: torch.Tensor,
                             flow: FlowField | torch.Tensor | None,
                             cfg: GuidanceConfig) -> torch.Tensor:
    """Gradient of the combined loss taken directly at a clean candidate."""
    if not cfg.enabled:
        return torch.zeros_like(z0_star)
    with torch.enable_grad():
        z = z0_star.detach().clone().requires_grad_(True)
        loss = combined_loss(z0_ref.detach(), z, flow, cfg)
        (grad,) = torch.autograd.grad(loss, z)
    require(bool(torch.isfinite(grad).all()), NumericError, "guidance gradient is non-finite")
    return grad.detach()


def _lk_step(f0: np.ndarray, f1: np.ndarray, window: int, ridge: float) -> np.ndarray:
    """One linearized LK solve between two (H, W, C) frames."""
    h, w, c = f0.shape
    acc = [np.zeros((h, w)) for _ in range(5)]
    for ch in range(c):
        a = 0.5 * (f0[:, :, ch] + f1[:, :, ch])
        gy, gx = np.gradient(a)
        gt = f1[:, :, ch] - f0[:, :, ch]
        acc[0] += gx * gx
        acc[1] += gx * gy
        acc[2] += gy * gy
        acc[3] += gx * gt
        acc[4] += gy * gt
    sxx, sxy, syy, sxt, syt = (uniform_filter(a, size=window, mode="nearest")
                               for a in acc)
    det = (sxx + ridge) * (syy + ridge) - sxy * sxy
    ok = det > 1e-9
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    u = (-(syy + ridge) * sxt + sxy * syt) * inv_det
    vv = (sxy * sxt - (sxx + ridge) * syt) * inv_det
    return np.stack([np.where(ok, u, 0.0), np.where(ok, vv, 0.0)], axis=-1)


def estimate_flow_lk(video: VideoTensor | torch.Tensor, window: int = 7,
                     ridge: float = 1e-3, iterations: int = 4) -> FlowField:
    """Dense Lucas-Kanade flow between consecutive frames.

    Solves the windowed normal equations per pixel with a small ridge term;
    pixels with a near-singular structure tensor get zero flow.  Each
    iteration warps the next frame backward along the running estimate and
    solves for the residual, which recovers displacements beyond the reach
    of a single linearization.  Good enough on this package's smooth
    synthetic textures to stand in for a learned flow estimator.
    """
    frames = video.frames if isinstance(video, VideoTensor) else video
    require(frames.dim() == 4 and frames.shape[0] >= 2, ShapeError,
            "need (N,H,W,C) with at least two frames")
    require(iterations >= 1, ConfigError, "iterations must be >= 1")
    v = frames.detach().cpu().numpy().astype(np.float64)
    n, h, w, c = v.shape
    flows = np.zeros((n - 1, h, w, 2), dtype=np.float64)
    for i in range(n - 1):
        total = np.zeros((h, w, 2))
        f1 = torch.from_numpy(v[i + 1])
        for _ in range(iterations):
            f1w = backward_warp(f1, torch.from_numpy(total)).numpy()
            total = total + _lk_step(v[i], f1w, window, ridge)
        flows[i] = total
    return FlowField(torch.from_numpy(flows.astype(np.float32)))


def scale_flow(flow: FlowField, factor: int) -> FlowField:
    """Adapt pixel-space flow to a latent grid downsampled by ``factor``."""
    require(factor >= 1, ConfigError, "factor must be >= 1")
    if factor == 1:
        return flow
    v = flow.vectors.permute(0, 3, 1, 2)
    v = F.avg_pool2d(v, kernel_size=factor, stride=factor) / factor
    return FlowField(v.permute(0, 2, 3, 1).contiguous())
