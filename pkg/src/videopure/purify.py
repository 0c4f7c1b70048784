"""Purification defenses: the guided multi-candidate pipeline and baselines.

The main pipeline inverts a clip's latent up the thinned DDIM ladder with the
temporal (frame-0 broadcast) noise estimate, then walks back down.  At every
step it forms a candidate clean latent: the current one-shot estimate, nudged
by the spatial-temporal guidance gradient scaled by alpha_s * sigma^2.  The
guidance never alters the trajectory itself unless ``zt_replace`` is set; it
only shapes the candidates.  After the walk, the fully denoised latent gets
one more direct guidance nudge and joins the candidate list.  All candidates
are decoded and classified, and the defense answers with a plurality vote
(ties go to the candidate produced earliest, i.e. at the highest t).

Baselines: stochastic diffusion purification (ancestral or DDIM decoding),
plain deterministic inversion, blockwise DCT quantization, Haar shrinkage,
and random frame shuffling.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import FlowField, VideoTensor, clamp01
from .errors import ConfigError, ShapeError, require
from .guidance import (GuidanceConfig, estimate_flow_lk, guidance_gradient,
                       guidance_gradient_direct, guided_update, scale_flow)
from .models import IdentityCodec, classify
from .samplers import SamplerConfig, run_denoise, run_inversion
from .schedule import (NoiseSchedule, RespacedSchedule, ddim_sigma_sq,
                       forward_diffuse, predict_z0)


@dataclass
class PurificationRecord:
    """Everything a defense produced for one input clip."""

    vote_list: list[VideoTensor]
    candidate_steps: list[int]            # source timestep per candidate; 0 = final
    candidate_classes: list[int] = field(default_factory=list)
    voted_class: int | None = None
    trace: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def plurality_vote(classes: list[int]) -> int:
    """Most frequent class; ties resolve to the one that appears first."""
    require(len(classes) > 0, ConfigError, "cannot vote over an empty list")
    counts = Counter(classes)
    best = max(counts.values())
    for c in classes:
        if counts[c] == best:
            return c
    raise AssertionError("unreachable")


def _resolve_flow(x: VideoTensor, flow: FlowField | None, cfg: GuidanceConfig,
                  codec) -> FlowField | None:
    if cfg.lambda_temp <= 0:
        return None
    if flow is None or cfg.flow_source == "estimator":
        flow = estimate_flow_lk(x)
    return scale_flow(flow, getattr(codec, "latent_scale", 1))


def videopure_record(x: VideoTensor, *, eps_model, classifier, rsched: RespacedSchedule,
                     guidance: GuidanceConfig, t_star: int = 6,
                     flow: FlowField | None = None, codec=None,
                     vote_mode: str = "vote", zt_replace: bool = False) -> PurificationRecord:
    """Run the full guided purification and return all candidates.

    ``vote_mode='vote'`` answers by plurality over every candidate;
    ``'final'`` answers with the last (t=0) candidate alone; ``'step:K'``
    answers with candidate K (0 = the deepest step, t_star = the final one).
    """
    single_step = None
    if vote_mode.startswith("step:"):
        single_step = int(vote_mode[5:])
        require(0 <= single_step <= t_star, ConfigError,
                f"step index must be in [0, {t_star}], got {single_step}")
    else:
        require(vote_mode in ("vote", "final"), ConfigError,
                f"unknown vote_mode {vote_mode!r}")
    codec = codec if codec is not None else IdentityCodec(x.shape[-1])
    t0 = time.monotonic()
    flow_lat = _resolve_flow(x, flow, guidance, codec)

    candidates: list[torch.Tensor] = []
    steps_used: list[int] = []
    trace: list[dict] = []

    with torch.no_grad():
        z0 = codec.encode(x).detach()
        scfg = SamplerConfig("ddim", t_star, rsched)
        z_star = run_inversion(z0, scfg, eps_model, temporal=True)

        def hook(t: int, z_t: torch.Tensor, eps: torch.Tensor, z0_t: torch.Tensor):
            if guidance.enabled:
                sig = ddim_sigma_sq(t, rsched, guidance.first_step)
                g = guidance_gradient(z_t, z0, t, eps_model, flow_lat, guidance, rsched)
                z_prime = guided_update(z_t, g, guidance.alpha_s, sig)
                cand = predict_z0(z_prime, eps, t, rsched)
                trace.append({"t": t, "sigma_sq": sig,
                              "grad_norm": float(g.norm()),
                              "shift_norm": float((z_prime - z_t).norm())})
            else:
                z_prime = None
                cand = z0_t
            candidates.append(cand.detach())
            steps_used.append(t)
            return z_prime if zt_replace else None

        z_final = run_denoise(z_star, scfg, eps_model, step_hook=hook)

        if guidance.enabled:
            sig0 = ddim_sigma_sq(int(rsched.steps[1]), rsched, guidance.first_step)
            g0 = guidance_gradient_direct(z_final, z0, flow_lat, guidance)
            cand0 = guided_update(z_final, g0, guidance.alpha_s, sig0)
        else:
            cand0 = z_final
        candidates.append(cand0.detach())
        steps_used.append(0)

        videos = [codec.decode(c) for c in candidates]

    classes = [classify(classifier, v) for v in videos] if classifier is not None else []
    voted = None
    if classes:
        if vote_mode == "vote":
            voted = plurality_vote(classes)
        elif vote_mode == "final":
            voted = classes[-1]
        else:
            voted = classes[single_step]
    return PurificationRecord(vote_list=videos, candidate_steps=steps_used,
                              candidate_classes=classes, voted_class=voted,
                              trace=trace,
                              meta={"defense": "videopure", "t_star": t_star,
                                    "vote_mode": vote_mode, "zt_replace": zt_replace,
                                    "seconds": time.monotonic() - t0})


def diffpure_ddpm_video(x: VideoTensor, *, eps_model, sched: NoiseSchedule,
                        t_star: int, generator: torch.Generator,
                        codec=None) -> VideoTensor:
    """Stochastic forward jump to training step t_star, then ancestral decoding."""
    codec = codec if codec is not None else IdentityCodec(x.shape[-1])
    with torch.no_grad():
        z0 = codec.encode(x)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z = forward_diffuse(z0, t_star, eps, sched)
        z = run_denoise(z, SamplerConfig("ddpm", t_star, sched), eps_model,
                        generator=generator)
        return codec.decode(z)


def diffpure_ddim_video(x: VideoTensor, *, eps_model, rsched: RespacedSchedule,
                        t_star: int, generator: torch.Generator,
                        codec=None) -> VideoTensor:
    """Stochastic forward jump to ladder index t_star, then deterministic decoding."""
    codec = codec if codec is not None else IdentityCodec(x.shape[-1])
    with torch.no_grad():
        z0 = codec.encode(x)
        t_train = int(rsched.steps[t_star])
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z = forward_diffuse(z0, t_train, eps, rsched.base)
        z = run_denoise(z, SamplerConfig("ddim", t_star, rsched), eps_model)
        return codec.decode(z)


def ddim_inversion_video(x: VideoTensor, *, eps_model, rsched: RespacedSchedule,
                         t_star: int, codec=None, temporal: bool = False) -> VideoTensor:
    """Deterministic inversion up to t_star and plain decoding, no guidance."""
    codec = codec if codec is not None else IdentityCodec(x.shape[-1])
    with torch.no_grad():
        z0 = codec.encode(x)
        scfg = SamplerConfig("ddim", t_star, rsched)
        z = run_inversion(z0, scfg, eps_model, temporal=temporal)
        z = run_denoise(z, scfg, eps_model)
        return codec.decode(z)


# --- blockwise DCT quantization -------------------------------------------

_Q_LUM = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    d = np.cos((2 * j + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    d[0, :] /= np.sqrt(2.0)
    return d


def quantization_table(quality: int) -> np.ndarray:
    """Standard luminance table rescaled for a quality setting in [1, 100]."""
    require(1 <= quality <= 100, ConfigError, f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.floor((_Q_LUM * scale + 50.0) / 100.0)
    return np.clip(q, 1.0, None)


def jpeg_compress_video(x: VideoTensor, quality: int = 90) -> VideoTensor:
    """Per-frame 8x8 DCT quantization, the lossy core of JPEG without entropy coding."""
    v = x.numpy().astype(np.float64)
    n, h, w, c = v.shape
    require(h % 8 == 0 and w % 8 == 0, ShapeError,
            f"frame size must be a multiple of 8, got {h}x{w}")
    q = quantization_table(quality)
    d = _dct_matrix(8)
    pix = v * 255.0 - 128.0
    blocks = pix.reshape(n, h // 8, 8, w // 8, 8, c).transpose(0, 1, 3, 5, 2, 4)
    coef = np.einsum("ij,...jk,lk->...il", d, blocks, d)
    coef = np.round(coef / q) * q
    rec = np.einsum("ji,...jk,kl->...il", d, coef, d)
    out = rec.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    out = np.clip((out + 128.0) / 255.0, 0.0, 1.0)
    return VideoTensor(torch.from_numpy(out.astype(np.float32)))


def wavelet_shrink_video(x: VideoTensor) -> VideoTensor:
    """Single-level orthonormal Haar shrinkage per frame with the universal threshold.

    The noise scale is the median absolute diagonal-detail coefficient over
    0.6745; the threshold is sigma * sqrt(2 ln(HW)) and all detail bands are
    soft-thresholded before reconstruction.
    """
    v = x.numpy().astype(np.float64)
    n, h, w, c = v.shape
    require(h % 2 == 0 and w % 2 == 0, ShapeError, "frame size must be even")
    a = v[:, 0::2, 0::2, :]
    b = v[:, 0::2, 1::2, :]
    cc = v[:, 1::2, 0::2, :]
    dd = v[:, 1::2, 1::2, :]
    ll = (a + b + cc + dd) / 2.0
    lh = (a - b + cc - dd) / 2.0
    hl = (a + b - cc - dd) / 2.0
    hh = (a - b - cc + dd) / 2.0
    sigma = np.median(np.abs(hh)) / 0.6745  # noise scale from the diagonal band
    tau = sigma * np.sqrt(2.0 * np.log(h * w))
    shrink = lambda z: np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)
    lh, hl, hh = shrink(lh), shrink(hl), shrink(hh)
    out = np.empty_like(v)
    out[:, 0::2, 0::2, :] = (ll + lh + hl + hh) / 2.0
    out[:, 0::2, 1::2, :] = (ll - lh + hl - hh) / 2.0
    out[:, 1::2, 0::2, :] = (ll + lh - hl - hh) / 2.0
    out[:, 1::2, 1::2, :] = (ll - lh - hl + hh) / 2.0
    return VideoTensor(torch.from_numpy(np.clip(out, 0.0, 1.0).astype(np.float32)))


def temporal_shuffle_video(x: VideoTensor, generator: torch.Generator) -> VideoTensor:
    """Random permutation of the frame order."""
    perm = torch.randperm(x.shape[0], generator=generator)
    return VideoTensor(x.frames[perm].clone())


# --- defense classes -------------------------------------------------------

class Purifier:
    """Common defense interface: purify to a record, or predict a class."""

    name = "base"
    stochastic = False

    def __init__(self, classifier=None):
        self.classifier = classifier

    def _transform(self, x: VideoTensor, flow: FlowField | None) -> VideoTensor:
        raise NotImplementedError

    def purify(self, x: VideoTensor, flow: FlowField | None = None) -> PurificationRecord:
        t0 = time.monotonic()
        out = self._transform(x, flow)
        classes = [classify(self.classifier, out)] if self.classifier is not None else []
        return PurificationRecord(
            vote_list=[out], candidate_steps=[0], candidate_classes=classes,
            voted_class=classes[0] if classes else None,
            meta={"defense": self.name, "seconds": time.monotonic() - t0})

    def predict(self, x: VideoTensor, classifier=None,
                flow: FlowField | None = None) -> int:
        if classifier is not None and classifier is not self.classifier:
            saved, self.classifier = self.classifier, classifier
            try:
                return self.purify(x, flow).voted_class
            finally:
                self.classifier = saved
        rec = self.purify(x, flow)
        require(rec.voted_class is not None, ConfigError,
                f"{self.name}: no classifier available for predict")
        return rec.voted_class

    def reseed(self, seed: int) -> None:  # stochastic defenses override
        pass


class IdentityPurifier(Purifier):
    name = "none"

    def _transform(self, x, flow):
        return VideoTensor(x.frames.clone())


class VideoPurePurifier(Purifier):
    """The guided multi-candidate defense."""

    name = "videopure"

    def __init__(self, eps_model, classifier, rsched: RespacedSchedule,
                 t_star: int = 6, guidance: GuidanceConfig | None = None,
                 codec=None, vote_mode: str = "vote", zt_replace: bool = False):
        super().__init__(classifier)
        require(1 <= t_star <= rsched.t_ddim, ConfigError,
                f"t_star must be in [1, {rsched.t_ddim}]")
        self.eps_model = eps_model
        self.rsched = rsched
        self.t_star = t_star
        self.guidance = guidance if guidance is not None else GuidanceConfig()
        self.codec = codec
        self.vote_mode = vote_mode
        self.zt_replace = zt_replace

    def purify(self, x: VideoTensor, flow: FlowField | None = None) -> PurificationRecord:
        return videopure_record(
            x, eps_model=self.eps_model, classifier=self.classifier,
            rsched=self.rsched, guidance=self.guidance, t_star=self.t_star,
            flow=flow, codec=self.codec, vote_mode=self.vote_mode,
            zt_replace=self.zt_replace)


class DiffpureDDPMPurifier(Purifier):
    name = "diffpure-ddpm"
    stochastic = True

    def __init__(self, eps_model, classifier, sched: NoiseSchedule,
                 t_star: int = 101, codec=None, seed: int = 0):
        super().__init__(classifier)
        require(1 <= t_star <= sched.t_train, ConfigError, "t_star out of range")
        self.eps_model = eps_model
        self.sched = sched
        self.t_star = t_star
        self.codec = codec
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def _transform(self, x, flow):
        return diffpure_ddpm_video(x, eps_model=self.eps_model, sched=self.sched,
                                   t_star=self.t_star, generator=self.generator,
                                   codec=self.codec)


class DiffpureDDIMPurifier(Purifier):
    name = "diffpure-ddim"
    stochastic = True

    def __init__(self, eps_model, classifier, rsched: RespacedSchedule,
                 t_star: int = 6, codec=None, seed: int = 0):
        super().__init__(classifier)
        require(1 <= t_star <= rsched.t_ddim, ConfigError, "t_star out of range")
        self.eps_model = eps_model
        self.rsched = rsched
        self.t_star = t_star
        self.codec = codec
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def _transform(self, x, flow):
        return diffpure_ddim_video(x, eps_model=self.eps_model, rsched=self.rsched,
                                   t_star=self.t_star, generator=self.generator,
                                   codec=self.codec)


class DDIMInversionPurifier(Purifier):
    """Round trip through the deterministic sampler without guidance or votes."""

    name = "ddim-inversion"

    def __init__(self, eps_model, classifier, rsched: RespacedSchedule,
                 t_star: int = 6, codec=None, temporal: bool = False):
        super().__init__(classifier)
        require(1 <= t_star <= rsched.t_ddim, ConfigError, "t_star out of range")
        self.eps_model = eps_model
        self.rsched = rsched
        self.t_star = t_star
        self.codec = codec
        self.temporal = temporal

    def _transform(self, x, flow):
        return ddim_inversion_video(x, eps_model=self.eps_model, rsched=self.rsched,
                                    t_star=self.t_star, codec=self.codec,
                                    temporal=self.temporal)


class JpegPurifier(Purifier):
    """Blockwise quantization at a quality matched to small frames.

    At 32x32 the default-75 tables quantize away most of the spectrum, which
    would turn a compression baseline into a strong denoiser; 90 keeps the
    step sizes proportionate to what photographic resolutions experience.
    """

    name = "jpeg"

    def __init__(self, classifier=None, quality: int = 90):
        super().__init__(classifier)
        self.quality = quality

    def _transform(self, x, flow):
        return jpeg_compress_video(x, self.quality)


class WaveletPurifier(Purifier):
    name = "wavelet"

    def _transform(self, x, flow):
        return wavelet_shrink_video(x)


class TemporalShufflePurifier(Purifier):
    name = "shuffle"
    stochastic = True

    def __init__(self, classifier=None, seed: int = 0):
        super().__init__(classifier)
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)

    def _transform(self, x, flow):
        return temporal_shuffle_video(x, self.generator)
