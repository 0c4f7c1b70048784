"""Noise predictor, motion classifier, latent codecs, training, checkpoints.

The noise predictor treats a clip as a batch of frames for its 2-d conv
stages and mixes information across frames once, with a (3,1,1) conv at the
bottleneck.  That keeps it cheap while still letting the denoiser see motion.
The classifier is a small factorized 3-d convnet: spatial conv, then temporal
conv, then pool, three times.

All training loops are seeded and single-threaded deterministic: the same
arguments produce bit-identical parameters.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import read_container, write_container
from .data import LabeledClip, VideoTensor, clamp01
from .errors import CheckpointError, ConfigError, ShapeError, require
from .schedule import NoiseSchedule, forward_diffuse


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of shape (len(t), dim) for integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _TimedBlock(nn.Module):
    """Two 3x3 convs with a per-item time bias added between them."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(emb_dim, cout)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = h + self.temb(emb)[:, :, None, None]
        return F.silu(self.conv2(h))


class EpsilonModel(nn.Module):
    """Predicts the noise in a latent video at timestep t.

    forward(z, t) takes a single clip (N, H, W, C) with a scalar t and returns
    the same shape.  The training loop uses the batched entry point directly.
    """

    def __init__(self, channels: int = 1, base_width: int = 32, emb_dim: int = 64):
        super().__init__()
        require(base_width >= 4 and emb_dim % 2 == 0, ConfigError,
                "base_width >= 4 and even emb_dim required")
        w = base_width
        self.channels = channels
        self.base_width = base_width
        self.emb_dim = emb_dim
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(),
                                     nn.Linear(emb_dim, emb_dim))
        self.enc = _TimedBlock(channels, w, emb_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.mid = _TimedBlock(2 * w, 2 * w, emb_dim)
        self.tmix = nn.Conv3d(2 * w, 2 * w, kernel_size=(3, 1, 1), padding=(1, 0, 0))
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.fuse = _TimedBlock(2 * w, w, emb_dim)
        self.head = nn.Conv2d(w, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward_batch(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """z: (B, N, H, W, C) clips, t: (B,) integer timesteps."""
        require(z.dim() == 5 and z.shape[-1] == self.channels, ShapeError,
                f"expected (B,N,H,W,{self.channels}), got {tuple(z.shape)}")
        b, n, h, w, c = z.shape
        emb = self.emb_mlp(timestep_embedding(t, self.emb_dim).to(z.dtype))
        emb_f = emb.repeat_interleave(n, dim=0)  # one row per frame

        x = z.permute(0, 1, 4, 2, 3).reshape(b * n, c, h, w)
        h1 = self.enc(x, emb_f)
        h2 = F.silu(self.down(h1))
        h2 = self.mid(h2, emb_f)
        # temporal mixing: regroup frames into clips for the (3,1,1) conv
        ch, hh, wh = h2.shape[1:]
        h2 = h2.reshape(b, n, ch, hh, wh).permute(0, 2, 1, 3, 4)
        h2 = F.silu(self.tmix(h2))
        h2 = h2.permute(0, 2, 1, 3, 4).reshape(b * n, ch, hh, wh)
        h2 = F.interpolate(h2, scale_factor=2, mode="nearest")
        h2 = F.silu(self.up(h2))
        out = self.fuse(torch.cat([h2, h1], dim=1), emb_f)
        eps = self.head(out)
        return eps.reshape(b, n, c, h, w).permute(0, 1, 3, 4, 2)

    def forward(self, z: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        require(z.dim() == 4, ShapeError,
                f"expected a single clip (N,H,W,C), got {tuple(z.shape)}")
        tt = torch.as_tensor([int(t)], dtype=torch.long)
        return self.forward_batch(z[None], tt)[0]


class VideoClassifier(nn.Module):
    """Motion classifier over (N, H, W, C) clips; returns (B, K) logits.

    The input stem appends scaled temporal differences as extra channels so
    the first conv block sees motion directly; without it the net spends many
    epochs discovering frame differencing on its own.
    """

    DIFF_GAIN = 8.0  # inter-frame differences are ~0.1 in scale; bring them to O(1)

    def __init__(self, channels: int = 1, num_classes: int = 8, width: int = 16):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.width = width
        w = width

        def block(cin, cout, pool):
            return nn.Sequential(
                nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1)),
                nn.GroupNorm(4, cout), nn.SiLU(),
                nn.Conv3d(cout, cout, (3, 1, 1), padding=(1, 0, 0)),
                nn.GroupNorm(4, cout), nn.SiLU(),
                nn.MaxPool3d(pool),
            )

        self.blocks = nn.Sequential(
            block(2 * channels, w, (1, 2, 2)),
            block(w, 2 * w, (2, 2, 2)),
            block(2 * w, 4 * w, (2, 2, 2)),
        )
        self.head = nn.Linear(4 * w, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x[None]
        require(x.dim() == 5 and x.shape[-1] == self.channels, ShapeError,
                f"expected (B,N,H,W,{self.channels}), got {tuple(x.shape)}")
        v = x.permute(0, 4, 1, 2, 3) - 0.5  # (B, C, N, H, W)
        d = torch.zeros_like(v)
        d[:, :, 1:] = v[:, :, 1:] - v[:, :, :-1]
        v = torch.cat([v, self.DIFF_GAIN * d], dim=1)
        v = self.blocks(v)
        v = v.mean(dim=(2, 3, 4))
        return self.head(v)


def classify(model: VideoClassifier, video: VideoTensor | torch.Tensor) -> int:
    """Deterministic class index; ties resolve to the lowest index."""
    frames = video.frames if isinstance(video, VideoTensor) else video
    with torch.no_grad():
        logits = model(frames)[0].cpu().numpy()
    return int(np.argmax(logits))


class IdentityCodec:
    """Pixel-space 'codec': latents are the frames themselves."""

    latent_scale = 1  # spatial downsampling factor

    def __init__(self, channels: int = 1):
        self.channels = channels
        self.latent_channels = channels

    def encode(self, x: VideoTensor | torch.Tensor) -> torch.Tensor:
        frames = x.frames if isinstance(x, VideoTensor) else x
        return frames.clone()

    def decode(self, z: torch.Tensor) -> VideoTensor:
        return VideoTensor(clamp01(z).to(torch.float32))

    def parameters(self):
        return iter(())


class ConvAutoencoderCodec(nn.Module):
    """Per-frame conv autoencoder with a sigmoid decoder.

    ``spatial_stride=4`` gives the compressive variant (two stride-2 convs).
    ``spatial_stride=1`` keeps the frame size and only expands channels; such
    a redundant latent spreads any fixed-norm gradient field over many more
    coordinates, and the decoder contracts what does not look like content,
    so guidance of a given strength disturbs the decoded video far less than
    it would raw pixels.
    """

    def __init__(self, channels: int = 1, latent_channels: int = 4, width: int = 16,
                 spatial_stride: int = 4):
        super().__init__()
        require(spatial_stride in (1, 4), ConfigError,
                f"spatial_stride must be 1 or 4, got {spatial_stride}")
        self.channels = channels
        self.latent_channels = latent_channels
        self.width = width
        self.spatial_stride = spatial_stride
        self.latent_scale = spatial_stride
        if spatial_stride == 4:
            self.enc_net = nn.Sequential(
                nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(width, latent_channels, 3, stride=2, padding=1),
            )
            self.dec_net = nn.Sequential(
                nn.ConvTranspose2d(latent_channels, width, 4, stride=2, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(width, channels, 4, stride=2, padding=1),
            )
        else:
            self.enc_net = nn.Sequential(
                nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
                nn.Conv2d(width, latent_channels, 3, padding=1),
            )
            self.dec_net = nn.Sequential(
                nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
                nn.Conv2d(width, channels, 3, padding=1),
            )

    def encode(self, x: VideoTensor | torch.Tensor) -> torch.Tensor:
        frames = x.frames if isinstance(x, VideoTensor) else x
        require(frames.dim() == 4, ShapeError, "encode expects (N,H,W,C)")
        z = self.enc_net(frames.permute(0, 3, 1, 2))
        return z.permute(0, 2, 3, 1)

    def decode(self, z: torch.Tensor) -> VideoTensor:
        require(z.dim() == 4, ShapeError, "decode expects (N,h,w,c)")
        out = torch.sigmoid(self.dec_net(z.permute(0, 3, 1, 2)))
        return VideoTensor(clamp01(out.permute(0, 2, 3, 1)).to(torch.float32))


@dataclass
class TrainReport:
    kind: str
    epochs: int
    seed: int
    final_train_loss: float
    loss_curve: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _stack_videos(clips: list[LabeledClip]) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.stack([c.video.frames for c in clips])
    ys = torch.tensor([c.label for c in clips], dtype=torch.long)
    return xs, ys


def _unit_patterns(m: int, c: int, h: int, w: int, gen: torch.Generator) -> torch.Tensor:
    """(M, C, H, W) noise patterns of unit standard deviation.

    Half gaussian, half sign-valued, each getting zero, one or two box-blur
    passes.  The blurred members matter: gradients of a small conv net are
    band-limited, so perturbations built from them carry far less
    high-frequency energy than raw sign noise, and training only on raw
    noise leaves exactly that band uncovered.
    """
    gauss = torch.randn((m, c, h, w), generator=gen)
    signs = torch.where(torch.rand((m, c, h, w), generator=gen) < 0.5, -1.0, 1.0)
    pick = (torch.rand(m, 1, 1, 1, generator=gen) < 0.5).float()
    n = pick * gauss + (1 - pick) * signs
    passes = torch.randint(0, 3, (m,), generator=gen)
    for k in (1, 2):
        sel = passes >= k
        if bool(sel.any()):
            n[sel] = F.avg_pool2d(n[sel], 3, stride=1, padding=1)
    flat_std = n.flatten(1).std(dim=1).clamp_min(1e-6)
    return n / flat_std[:, None, None, None]


def train_epsilon_model(train_clips: list[LabeledClip], sched: NoiseSchedule,
                        epochs: int, seed: int, codec=None,
                        val_clips: list[LabeledClip] | None = None,
                        base_width: int = 32, batch_clips: int = 8,
                        lr: float = 2e-3, low_t_frac: float = 0.5,
                        low_t_cap: int = 200,
                        z0_jitter: float = 0.0) -> tuple[EpsilonModel, TrainReport]:
    """Standard denoising objective: predict eps from z_t at a random t per clip.

    Purification operates at shallow noise levels, so a ``low_t_frac`` share
    of the sampled timesteps is drawn from [1, low_t_cap] instead of the full
    range; the rest covers [1, T] uniformly.

    ``z0_jitter`` diffuses from a perturbed clean latent while keeping the
    clean one as the regression anchor, so the model learns to pull slightly
    off-manifold inputs back to content. Purification feeds it exactly such
    inputs: adversarial clips and partially denoised iterates. Patterns are
    iid per frame, held static across frames, or flipped in sign frame to
    frame; the last shape is what an attack on a motion classifier tends to
    produce. The jitter amplitude is relative to the latent standard
    deviation, so the knob means the same thing for any codec.
    """
    require(len(train_clips) > 0 and epochs >= 1, ConfigError, "need clips and epochs >= 1")
    require(0.0 <= low_t_frac <= 1.0, ConfigError, "low_t_frac must be in [0, 1]")
    require(z0_jitter >= 0.0, ConfigError, "z0_jitter must be >= 0")
    codec = codec if codec is not None else IdentityCodec(train_clips[0].video.shape[-1])
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)

    with torch.no_grad():
        latents = torch.stack([codec.encode(c.video) for c in train_clips])
    latent_std = float(latents.std())
    model = EpsilonModel(channels=latents.shape[-1], base_width=base_width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    tmax = sched.t_train
    tcap = min(max(low_t_cap, 1), tmax)
    ab = torch.from_numpy(sched.alpha_bar)  # float64 lookup table

    curve = []
    for _ in range(epochs):
        order = torch.randperm(len(train_clips), generator=gen)
        epoch_loss, nb = 0.0, 0
        for lo in range(0, len(order), batch_clips):
            idx = order[lo:lo + batch_clips]
            z0 = latents[idx]
            t = torch.randint(1, tmax + 1, (len(idx),), generator=gen)
            t_low = torch.randint(1, tcap + 1, (len(idx),), generator=gen)
            pick_low = torch.rand(len(idx), generator=gen) < low_t_frac
            t = torch.where(pick_low, t_low, t)
            eps = torch.randn(z0.shape, generator=gen)
            a = ab[t][:, None, None, None, None]
            z0_in = z0
            if z0_jitter > 0:
                b, n, hh, ww, cc = z0.shape
                amp = (z0_jitter * latent_std
                       * torch.rand(b, 1, 1, 1, 1, generator=gen))
                pat = _unit_patterns(b * n, cc, hh, ww, gen).reshape(b, n, cc, hh, ww)
                mode = torch.randint(0, 3, (b,), generator=gen)
                for j in range(b):
                    if mode[j] == 1:    # static: one pattern on every frame
                        pat[j] = pat[j, :1]
                    elif mode[j] == 2:  # flicker: sign alternates frame to frame
                        flip = torch.where(torch.arange(n) % 2 == 0, 1.0, -1.0)
                        pat[j] = pat[j, :1] * flip[:, None, None, None]
                z0_in = z0 + amp * pat.permute(0, 1, 3, 4, 2)
            zt64 = a.sqrt() * z0_in.double() + (1 - a).sqrt() * eps.double()
            # the target is whatever separates z_t from the *clean* latent
            target = ((zt64 - a.sqrt() * z0.double()) / (1 - a).sqrt()).float()
            pred = model.forward_batch(zt64.float(), t)
            loss = F.mse_loss(pred, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            nb += 1
        curve.append(epoch_loss / nb)

    metrics = {}
    if val_clips:
        metrics["val_eps_mse"] = _eps_val_mse(model, codec, val_clips, sched, seed + 2)
    report = TrainReport(kind="epsilon", epochs=epochs, seed=seed,
                         final_train_loss=curve[-1], loss_curve=curve, metrics=metrics)
    return model, report


def _eps_val_mse(model, codec, clips, sched, seed) -> float:
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for clip in clips:
            z0 = codec.encode(clip.video)
            for t in (50, 300, 700):
                eps = torch.randn(z0.shape, generator=gen)
                zt = forward_diffuse(z0, t, eps, sched)
                total += float(F.mse_loss(model(zt, t), eps))
                count += 1
    return total / count


def _distort_batch(x: torch.Tensor, scale: float, gen: torch.Generator) -> torch.Tensor:
    """Randomly distort each clip of (B, N, H, W, C) with one noise family."""
    b, n, h, w, c = x.shape
    mode = torch.randint(0, 4, (b,), generator=gen)
    amp = torch.rand(b, generator=gen)
    out = []
    for j in range(b):
        xj, m, a = x[j], int(mode[j]), float(amp[j])
        if m == 0:
            pass  # keep some clean clips so clean accuracy stays sharp
        elif m == 1:
            noise = torch.randn(xj.shape, generator=gen)
            if torch.rand((), generator=gen) < 0.5:
                noise = noise[:1].expand_as(noise)
            xj = xj + (1.43 * scale * a) * noise
        elif m == 2:
            amp_px = (0.4 + 0.9 * a) * scale
            density = 0.4 + 0.6 * float(torch.rand((), generator=gen))
            keep = torch.rand(xj.shape, generator=gen) < density
            signs = torch.where(torch.rand(xj.shape, generator=gen) < 0.5, -1.0, 1.0)
            xj = xj + amp_px * signs * keep
        else:
            coarse = torch.randn((n, 4, 4, c), generator=gen).permute(0, 3, 1, 2)
            field = F.interpolate(coarse, size=(h, w), mode="bilinear",
                                  align_corners=False).permute(0, 2, 3, 1)
            xj = xj + (1.7 * scale * a) * field
        out.append(xj)
    return torch.stack(out).clamp(0.0, 1.0)


def _codec_distort_batch(x: torch.Tensor, codec, scale: float,
                         gen: torch.Generator) -> torch.Tensor:
    """Route half of each batch through the codec with a noisy latent.

    This teaches the classifier the decoder's artifact distribution, which is
    where purified candidates live, without ever showing it raw
    high-frequency pixel noise. Tolerance to decoded artifacts does not
    spill over into tolerance to sign perturbations in pixel space.
    """
    b, n, h, w, c = x.shape
    with torch.no_grad():
        z = codec.encode(x.reshape(b * n, h, w, c))
        scale = scale * float(z.std())  # noise amplitude in latent-std units
        amp = (scale * torch.rand(b, 1, 1, 1, generator=gen)).repeat_interleave(n, 0)
        pat = _unit_patterns(b * n, z.shape[-1], z.shape[1], z.shape[2], gen)
        dec = codec.decode(z + amp * pat.permute(0, 2, 3, 1))
        dec = dec.frames.reshape(b, n, h, w, c)
    keep = (torch.rand(b, 1, 1, 1, 1, generator=gen) < 0.5).float()
    return keep * x + (1 - keep) * dec


def train_classifier(train_clips: list[LabeledClip], epochs: int, seed: int,
                     val_clips: list[LabeledClip] | None = None,
                     num_classes: int | None = None, width: int = 16,
                     batch: int = 8, lr: float = 2e-3, noise_aug: float = 0.0,
                     codec=None,
                     codec_noise: float = 0.0) -> tuple[VideoClassifier, TrainReport]:
    """Cross-entropy training, optionally augmented for a defended pipeline.

    ``noise_aug`` applies raw pixel-noise families (gaussian, sign flips,
    smooth fields); it robustifies the classifier against everything,
    including the attacks the benchmark wants to land, so keep it at 0 for
    an attackable model. ``codec``/``codec_noise`` instead route part of each
    batch through the codec with a perturbed latent: the classifier learns
    to read decoded frames, which is the only distorted distribution a
    purified candidate can come from.
    """
    require(len(train_clips) > 0 and epochs >= 1, ConfigError, "need clips and epochs >= 1")
    require(noise_aug >= 0, ConfigError, "noise_aug must be >= 0")
    require(codec_noise >= 0, ConfigError, "codec_noise must be >= 0")
    if num_classes is None:
        num_classes = max(c.label for c in train_clips) + 1
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    xs, ys = _stack_videos(train_clips)
    model = VideoClassifier(channels=xs.shape[-1], num_classes=num_classes, width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    curve = []
    for _ in range(epochs):
        order = torch.randperm(len(xs), generator=gen)
        epoch_loss, nb = 0.0, 0
        for lo in range(0, len(order), batch):
            idx = order[lo:lo + batch]
            x = xs[idx]
            if noise_aug > 0:
                x = _distort_batch(x, noise_aug, gen)
            if codec is not None and codec_noise > 0:
                x = _codec_distort_batch(x, codec, codec_noise, gen)
            logits = model(x)
            loss = F.cross_entropy(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            nb += 1
        curve.append(epoch_loss / nb)

    metrics = {}
    if val_clips:
        metrics["val_acc"] = eval_accuracy(model, val_clips)
        metrics["val_acc_shuffled"] = eval_accuracy(model, val_clips, shuffle_seed=seed + 7)
    report = TrainReport(kind="classifier", epochs=epochs, seed=seed,
                         final_train_loss=curve[-1], loss_curve=curve, metrics=metrics)
    return model, report


def eval_accuracy(model: VideoClassifier, clips: list[LabeledClip],
                  shuffle_seed: int | None = None) -> float:
    """Fraction correct; with shuffle_seed, frames are permuted first (motion destroyed)."""
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    hits = 0
    for clip in clips:
        frames = clip.video.frames
        if rng is not None:
            perm = torch.from_numpy(rng.permutation(frames.shape[0]))
            frames = frames[perm]
        hits += int(classify(model, frames) == clip.label)
    return hits / len(clips)


def train_autoencoder(train_clips: list[LabeledClip], epochs: int, seed: int,
                      val_clips: list[LabeledClip] | None = None,
                      latent_channels: int = 4, width: int = 16, batch: int = 8,
                      lr: float = 2e-3, spatial_stride: int = 4,
                      noise_aug: float = 0.0,
                      input_noise: float = 0.0) -> tuple[ConvAutoencoderCodec, TrainReport]:
    """Frame-level reconstruction training for the latent codec.

    With ``noise_aug > 0`` the decoder sees latents corrupted by mixed noise
    patterns (raw and blurred, gaussian and sign-valued) of random amplitude
    up to that fraction of the latent standard deviation and is still asked
    to reproduce the clean frame, so it maps guided candidates back to
    clean-looking frames instead of amplifying the shift.

    ``input_noise`` corrupts the frame fed to the encoder with the same
    pattern mix while the target stays clean, and adds a latent-consistency
    penalty pulling encode(x + noise) onto encode(x). A pipeline whose
    anchor latents come from this encoder sees mostly content even when the
    input was perturbed on purpose.
    """
    require(len(train_clips) > 0 and epochs >= 1, ConfigError, "need clips and epochs >= 1")
    require(noise_aug >= 0.0, ConfigError, "noise_aug must be >= 0")
    require(input_noise >= 0.0, ConfigError, "input_noise must be >= 0")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    frames = torch.cat([c.video.frames for c in train_clips])  # frame-level batches
    codec = ConvAutoencoderCodec(channels=frames.shape[-1],
                                 latent_channels=latent_channels, width=width,
                                 spatial_stride=spatial_stride)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)

    curve = []
    for _ in range(epochs):
        order = torch.randperm(len(frames), generator=gen)
        epoch_loss, nb = 0.0, 0
        for lo in range(0, len(order), batch * 8):
            idx = order[lo:lo + batch * 8]
            x = frames[idx]
            consistency = None
            x_in = x
            if input_noise > 0:
                amp = input_noise * torch.rand(len(x), 1, 1, 1, generator=gen)
                pat = _unit_patterns(len(x), x.shape[-1], x.shape[1], x.shape[2], gen)
                x_in = (x + amp * pat.permute(0, 2, 3, 1)).clamp(0.0, 1.0)
            z = codec.encode(x_in)
            if input_noise > 0:
                with torch.no_grad():
                    z_clean = codec.encode(x)
                # variance-normalized so growing the latent scale cannot game it
                consistency = F.mse_loss(z, z_clean) / (float(z_clean.var()) + 1e-8)
            if noise_aug > 0:
                scale = noise_aug * float(z.std().detach())
                amp = scale * torch.rand(len(z), 1, 1, 1, generator=gen)
                pat = _unit_patterns(len(z), z.shape[-1], z.shape[1], z.shape[2], gen)
                z = z + amp * pat.permute(0, 2, 3, 1)
            recon = codec.decode(z).frames
            loss = F.mse_loss(recon, x)
            if consistency is not None:
                loss = loss + consistency
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            nb += 1
        curve.append(epoch_loss / nb)

    metrics = {}
    if val_clips:
        with torch.no_grad():
            maes = []
            for clip in val_clips:
                recon = codec.decode(codec.encode(clip.video)).frames
                maes.append(float((recon - clip.video.frames).abs().mean()))
        metrics["val_recon_mae"] = float(np.mean(maes))
    report = TrainReport(kind="autoencoder", epochs=epochs, seed=seed,
                         final_train_loss=curve[-1], loss_curve=curve, metrics=metrics)
    return codec, report


_ARCH = {
    "epsilon": (EpsilonModel, ("channels", "base_width", "emb_dim")),
    "classifier": (VideoClassifier, ("channels", "num_classes", "width")),
    "autoencoder": (ConvAutoencoderCodec,
                    ("channels", "latent_channels", "width", "spatial_stride")),
}

CHECKPOINT_VERSION = 1


def save_model(path: str | os.PathLike, model: nn.Module, kind: str,
               extra: dict | None = None) -> None:
    """Write parameters as named records plus a JSON config sidecar."""
    require(kind in _ARCH, CheckpointError, f"unknown checkpoint kind {kind!r}")
    _, fields = _ARCH[kind]
    config = {name: getattr(model, name) for name in fields}
    records = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in model.state_dict().items()}
    meta = {"kind": kind, "config": config, "version": CHECKPOINT_VERSION,
            "extra": extra or {}}
    write_container(path, records, meta=meta)
    with open(os.fspath(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_model(path: str | os.PathLike, expected_kind: str | None = None) -> tuple[nn.Module, dict]:
    """Rebuild the architecture from the stored config and load validated weights."""
    records, meta = read_container(path)
    kind = meta.get("kind")
    require(kind in _ARCH, CheckpointError, f"{path}: unknown checkpoint kind {kind!r}")
    if expected_kind is not None:
        require(kind == expected_kind, CheckpointError,
                f"{path}: checkpoint is {kind!r}, expected {expected_kind!r}")
    cls, fields = _ARCH[kind]
    config = meta.get("config", {})
    require(set(config) == set(fields), CheckpointError,
            f"{path}: config fields {sorted(config)} do not match {sorted(fields)}")
    model = cls(**config)
    state = model.state_dict()
    require(set(records) == set(state), CheckpointError,
            f"{path}: parameter names do not match architecture "
            f"(missing {sorted(set(state) - set(records))[:3]}, "
            f"unexpected {sorted(set(records) - set(state))[:3]})")
    new_state = {}
    for name, arr in records.items():
        require(tuple(arr.shape) == tuple(state[name].shape), CheckpointError,
                f"{path}: record {name!r} has shape {tuple(arr.shape)}, "
                f"architecture expects {tuple(state[name].shape)}")
        new_state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(new_state)
    model.eval()
    return model, meta
