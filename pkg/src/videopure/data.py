"""Synthetic motion-classification video data.

Clips are short grayscale videos whose class label is the global motion
pattern: four axis translations, two diagonal translations, a clockwise
rotation, and a slow zoom.  Texture is drawn once per clip from the clip seed
and is independent of the class, so two clips sharing a seed differ only in
how the texture moves.  Every clip carries its analytic optical flow, in
(dx, dy) pixels, where ``flow[i]`` maps pixel positions in frame ``i`` to the
matching content in frame ``i + 1``.

Frames are rendered by bilinear sampling from a padded static texture, so the
flow is exact up to interpolation error of the (blurred) texture.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .container import read_container, write_container
from .errors import ConfigError, ShapeError, require


def clamp01(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(0.0, 1.0)


@dataclass(frozen=True)
class VideoTensor:
    """A single clip: float32 frames of shape (N, H, W, C) with values in [0, 1]."""

    frames: torch.Tensor

    def __post_init__(self):
        f = self.frames
        require(isinstance(f, torch.Tensor) and f.dim() == 4, ShapeError,
                f"video frames must be a 4-d tensor (N,H,W,C), got {tuple(getattr(f, 'shape', ()))}")
        require(f.dtype == torch.float32, ShapeError,
                f"video frames must be float32, got {f.dtype}")
        with torch.no_grad():
            require(bool(torch.isfinite(f).all()), ShapeError, "video frames contain non-finite values")
            require(float(f.min()) >= 0.0 and float(f.max()) <= 1.0, ShapeError,
                    "video frames must lie in [0, 1]; clamp before wrapping")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.frames.detach().cpu().numpy()


@dataclass(frozen=True)
class FlowField:
    """Per-frame-pair flow: float32 (N-1, H, W, 2) holding (dx, dy) displacements."""

    vectors: torch.Tensor

    def __post_init__(self):
        v = self.vectors
        require(isinstance(v, torch.Tensor) and v.dim() == 4 and v.shape[-1] == 2, ShapeError,
                f"flow must have shape (N-1,H,W,2), got {tuple(getattr(v, 'shape', ()))}")
        require(v.dtype == torch.float32, ShapeError, f"flow must be float32, got {v.dtype}")
        require(bool(torch.isfinite(v).all()), ShapeError, "flow contains non-finite values")

    def numpy(self) -> np.ndarray:
        return self.vectors.detach().cpu().numpy()


@dataclass(frozen=True)
class LabeledClip:
    video: VideoTensor
    flow: FlowField
    label: int
    clip_id: str

    def __post_init__(self):
        n = self.video.shape[0]
        require(self.flow.vectors.shape[0] == n - 1, ShapeError,
                f"clip {self.clip_id}: flow has {self.flow.vectors.shape[0]} pairs for {n} frames")


@dataclass(frozen=True)
class MotionSpec:
    """One class's motion: 'translate' uses (vx, vy) px/frame, 'rotate' uses
    omega rad/frame about the frame center, 'scale' multiplies radii by rate
    per frame."""

    kind: str
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    rate: float = 1.0

    def __post_init__(self):
        require(self.kind in ("translate", "rotate", "scale"), ConfigError,
                f"unknown motion kind {self.kind!r}")


def default_motions() -> tuple[MotionSpec, ...]:
    # 2 px/frame keeps inter-frame differences well above the distortion the
    # guided purifier introduces, which matters for class separability
    return (
        MotionSpec("translate", vx=2.0, vy=0.0),    # right
        MotionSpec("translate", vx=-2.0, vy=0.0),   # left
        MotionSpec("translate", vx=0.0, vy=-2.0),   # up
        MotionSpec("translate", vx=0.0, vy=2.0),    # down
        MotionSpec("translate", vx=2.0, vy=2.0),    # down-right diagonal
        MotionSpec("translate", vx=-2.0, vy=-2.0),  # up-left diagonal
        MotionSpec("rotate", omega=0.12),           # clockwise in screen coords
        MotionSpec("scale", rate=1.09),             # zoom in
    )


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset deterministically."""

    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    margin: int = 20          # texture padding; must exceed the largest total displacement
    blur_sigma: float = 0.9   # texture smoothing, keeps bilinear flow error small
    seed: int = 0             # master seed, combined with each clip seed
    motions: tuple[MotionSpec, ...] = field(default_factory=default_motions)

    def __post_init__(self):
        require(self.frames >= 2, ConfigError, "need at least 2 frames")
        require(self.height >= 8 and self.width >= 8, ConfigError, "frames too small")
        require(self.channels >= 1, ConfigError, "channels must be >= 1")
        require(self.margin >= 1, ConfigError, "margin must be >= 1")
        require(self.seed >= 0, ConfigError, "seed must be non-negative")
        require(len(self.motions) >= 2, ConfigError, "need at least 2 motion classes")

    @property
    def num_classes(self) -> int:
        return len(self.motions)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["motions"] = [dataclasses.asdict(m) for m in self.motions]
        return d

    @staticmethod
    def from_json(d: dict) -> "DatasetManifest":
        d = dict(d)
        d["motions"] = tuple(MotionSpec(**m) for m in d.get("motions", []))
        return DatasetManifest(**d)


def derive_seed(master: int, tag: str) -> int:
    """Stable per-item seed from a master seed and a string tag."""
    digest = hashlib.sha256(f"{master}|{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _fill_convex_polygon(img: np.ndarray, verts: np.ndarray, value: float) -> None:
    # verts are (k, 2) as (x, y), ordered by angle; inside = all half-plane tests agree
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    k = len(verts)
    for i in range(k):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % k]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    img[inside] = value


def _make_texture(rng: np.random.Generator, h: int, w: int, blur_sigma: float) -> np.ndarray:
    """Padded base texture in [0, 1]: smooth background plus a few solid shapes."""
    # low-frequency background from upsampled noise
    coarse = rng.normal(size=(max(2, h // 8), max(2, w // 8)))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.clip(ys.astype(int), 0, coarse.shape[0] - 2)
    x0 = np.clip(xs.astype(int), 0, coarse.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    bg = ((1 - fy) * (1 - fx) * coarse[y0][:, x0]
          + (1 - fy) * fx * coarse[y0][:, x0 + 1]
          + fy * (1 - fx) * coarse[y0 + 1][:, x0]
          + fy * fx * coarse[y0 + 1][:, x0 + 1])
    bg = 0.5 + 0.22 * bg

    def strong_value() -> float:
        # bias shape intensities toward the ends of the range for contrast
        lo, hi = (0.0, 0.2) if rng.random() < 0.5 else (0.8, 1.0)
        return float(rng.uniform(lo, hi))

    img = bg
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(4):  # disks
        cy, cx = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
        r = rng.uniform(2.5, 6.5)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = strong_value()
    for _ in range(3):  # convex polygons
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        k = int(rng.integers(3, 6))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = rng.uniform(3.0, 7.5, size=k)
        verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        _fill_convex_polygon(img, verts, strong_value())

    img = gaussian_filter(img, sigma=blur_sigma, mode="nearest")
    return np.clip(img, 0.0, 1.0)


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = sy - y0
    wx = sx - x0
    return ((1 - wy) * (1 - wx) * img[y0, x0] + (1 - wy) * wx * img[y0, x1]
            + wy * (1 - wx) * img[y1, x0] + wy * wx * img[y1, x1])


def _source_coords(motion: MotionSpec, i: int, h: int, w: int, margin: int):
    """Padded-texture coordinates that frame ``i`` samples from."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if motion.kind == "translate":
        sy = yy - i * motion.vy
        sx = xx - i * motion.vx
    elif motion.kind == "rotate":
        a = -i * motion.omega  # inverse rotation maps frame coords back to the texture
        dy, dx = yy - cy, xx - cx
        sx = np.cos(a) * dx - np.sin(a) * dy + cx
        sy = np.sin(a) * dx + np.cos(a) * dy + cy
    else:  # scale
        f = motion.rate ** (-i)
        sy = (yy - cy) * f + cy
        sx = (xx - cx) * f + cx
    return sy + margin, sx + margin


def _analytic_flow(motion: MotionSpec, h: int, w: int) -> np.ndarray:
    """One (H, W, 2) flow slice; identical for every frame pair of these motions."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if motion.kind == "translate":
        dx = np.full((h, w), motion.vx)
        dy = np.full((h, w), motion.vy)
    elif motion.kind == "rotate":
        a = motion.omega
        py, px = yy - cy, xx - cx
        dx = np.cos(a) * px - np.sin(a) * py + cx - xx
        dy = np.sin(a) * px + np.cos(a) * py + cy - yy
    else:
        dx = (motion.rate - 1.0) * (xx - cx)
        dy = (motion.rate - 1.0) * (yy - cy)
    return np.stack([dx, dy], axis=-1)


def generate_clip(class_index: int, seed: int, manifest: DatasetManifest) -> LabeledClip:
    """Render one clip.  Same arguments always give bit-identical output."""
    require(0 <= class_index < manifest.num_classes, ConfigError,
            f"class_index {class_index} out of range for {manifest.num_classes} classes")
    require(seed >= 0, ConfigError, "clip seed must be non-negative")
    motion = manifest.motions[class_index]
    h, w, n, c = manifest.height, manifest.width, manifest.frames, manifest.channels
    m = manifest.margin

    # texture depends on the seed only, never on the class
    rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, seed]))
    base = [_make_texture(rng, h + 2 * m, w + 2 * m, manifest.blur_sigma) for _ in range(c)]

    frames = np.empty((n, h, w, c), dtype=np.float64)
    for i in range(n):
        sy, sx = _source_coords(motion, i, h, w, m)
        for ch in range(c):
            frames[i, :, :, ch] = _bilinear_sample(base[ch], sy, sx)

    flow_slice = _analytic_flow(motion, h, w)
    flow = np.repeat(flow_slice[None], n - 1, axis=0)

    video = VideoTensor(torch.from_numpy(np.clip(frames, 0.0, 1.0).astype(np.float32)))
    return LabeledClip(
        video=video,
        flow=FlowField(torch.from_numpy(flow.astype(np.float32))),
        label=class_index,
        clip_id=f"k{class_index}s{seed}",
    )


def generate_dataset(manifest: DatasetManifest, clips_per_class: int,
                     start_seed: int = 0) -> list[LabeledClip]:
    """Class-balanced clip list; use disjoint ``start_seed`` ranges for splits."""
    require(clips_per_class >= 1, ConfigError, "clips_per_class must be >= 1")
    clips = []
    for k in range(manifest.num_classes):
        for j in range(clips_per_class):
            clips.append(generate_clip(k, start_seed + j, manifest))
    return clips


def save_dataset(clips: list[LabeledClip], path: str | os.PathLike,
                 manifest: DatasetManifest | None = None,
                 extra_meta: dict | None = None) -> None:
    """Write clips to a container at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    path = os.fspath(path)
    records: dict[str, np.ndarray] = {}
    ids = []
    for clip in clips:
        cid = clip.clip_id
        require(f"{cid}/frames" not in records, ConfigError, f"duplicate clip_id {cid!r}")
        records[f"{cid}/frames"] = clip.video.numpy()
        records[f"{cid}/flow"] = clip.flow.numpy()
        records[f"{cid}/label"] = np.array([clip.label], dtype=np.int64)
        ids.append(cid)
    meta = dict(extra_meta or {})
    meta["kind"] = meta.get("kind", "video-dataset")
    write_container(path, records, meta=meta)
    sidecar = {
        "clips": ids,
        "manifest": manifest.to_json() if manifest is not None else None,
        "meta": meta,
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)


def load_dataset(path: str | os.PathLike) -> tuple[list[LabeledClip], DatasetManifest | None, dict]:
    """Read back a dataset written by save_dataset; arrays round-trip bit-identically."""
    path = os.fspath(path)
    records, meta = read_container(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    clips = []
    for cid in sidecar["clips"]:
        for suffix in ("frames", "flow", "label"):
            require(f"{cid}/{suffix}" in records, ShapeError,
                    f"dataset {path}: clip {cid!r} missing {suffix!r} record")
        frames = torch.from_numpy(records[f"{cid}/frames"])
        flow = torch.from_numpy(records[f"{cid}/flow"])
        label = int(records[f"{cid}/label"][0])
        clips.append(LabeledClip(VideoTensor(frames), FlowField(flow), label, cid))
    manifest = None
    if sidecar.get("manifest") is not None:
        manifest = DatasetManifest.from_json(sidecar["manifest"])
    return clips, manifest, meta
