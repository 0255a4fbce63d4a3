"""Spatial (weak / strong / standard) and temporal clip augmentations.

Clips are ``(T, H, W, C)`` float arrays in ``[0, 1]``. Every random choice
comes from the generator passed in, so each function is a pure function of
``(clip, rng state)``. Spatial parameters are drawn once per clip and
applied to every frame.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

STRONG_OPS = ("brightness", "contrast", "channel_drop", "cutout", "pixel_dropout", "noise")


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.25)
    crop_size: int = 16
    strong_ops: int = 2
    strong_magnitude: float = 0.5
    frame_dropout_prob: float = 0.1
    primary_stride: int = 2
    auxiliary_stride: int = 1
    seed_stream: str = "augment"
    # ablation switches: spatial=False makes every view an identity crop,
    # temporal=False removes the frame-rate difference (both strides 1)
    spatial: bool = True
    temporal: bool = True

    def validate(self) -> None:
        for name in ("flip_prob", "strong_magnitude", "frame_dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if not 0 <= self.strong_ops <= len(STRONG_OPS):
            raise ValueError(f"strong_ops must be in [0, {len(STRONG_OPS)}]")
        if self.crop_size < 1 or self.primary_stride < 1 or self.auxiliary_stride < 1:
            raise ValueError("crop_size and strides must be >= 1")

    def strides(self) -> tuple[int, int]:
        if self.temporal:
            return self.primary_stride, self.auxiliary_stride
        return 1, 1


@dataclass(frozen=True)
class WeakParams:
    flip: bool
    scale: float
    top: int
    left: int


# --------------------------------------------------------------------------
# geometry helpers


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear resampling matrix (half-pixel centres, clamped edges); read-only."""
    if n_in == n_out:
        m = np.eye(n_in, dtype=dtype)
        m.flags.writeable = False
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def resize(clip: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of every frame of a (T, H, W, C) clip."""
    T_, H, W, C = clip.shape
    if (H, W) == (height, width):
        return clip
    mh = _interp_matrix(H, height, clip.dtype.type)
    mw = _interp_matrix(W, width, clip.dtype.type)
    rows = np.matmul(mh, clip.reshape(T_, H, W * C)).reshape(T_ * height, W, C)
    return np.matmul(mw, rows).reshape(T_, height, width, C)


def sample_weak_params(rng: np.random.Generator, shape: Sequence[int], config: AugmentConfig) -> WeakParams:
    _, H, W, _ = shape
    flip = bool(rng.random() < config.flip_prob)
    scale = float(rng.uniform(*config.scale_range))
    sh, sw = max(round(H * scale), config.crop_size), max(round(W * scale), config.crop_size)
    top = int(rng.integers(0, sh - config.crop_size + 1))
    left = int(rng.integers(0, sw - config.crop_size + 1))
    return WeakParams(flip, scale, top, left)


def apply_weak(clip: np.ndarray, params: WeakParams, crop_size: int) -> np.ndarray:
    """Flip, rescale and crop every frame with the same parameters.

    Frames scaled below ``crop_size`` are edge-padded back up to it.
    """
    T_, H, W, C = clip.shape
    if crop_size > min(H, W):
        raise ValueError(f"crop {crop_size} larger than frame {H}x{W}")
    out = clip[:, :, ::-1] if params.flip else clip
    sh, sw = round(H * params.scale), round(W * params.scale)
    out = resize(out, sh, sw)
    if sh < crop_size or sw < crop_size:
        ph, pw = max(0, crop_size - sh), max(0, crop_size - sw)
        out = np.pad(out, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)), mode="edge")
    if params.top + crop_size > out.shape[1] or params.left + crop_size > out.shape[2]:
        raise ValueError(f"crop at ({params.top}, {params.left}) exceeds scaled frame {out.shape[1:3]}")
    out = out[:, params.top : params.top + crop_size, params.left : params.left + crop_size]
    return np.ascontiguousarray(out, dtype=clip.dtype)


def _identity_crop(clip: np.ndarray, crop_size: int) -> np.ndarray:
    _, H, W, _ = clip.shape
    top, left = (H - crop_size) // 2, (W - crop_size) // 2
    return np.ascontiguousarray(clip[:, top : top + crop_size, left : left + crop_size])


# --------------------------------------------------------------------------
# public augmentations


def _clipwise(fn):
    """Let an array transform also take a clip object; label and meta pass through."""

    @functools.wraps(fn)
    def wrapper(clip, *args, **kwargs):
        if hasattr(clip, "frames"):
            return clip.with_frames(fn(clip.frames, *args, **kwargs))
        return fn(clip, *args, **kwargs)

    return wrapper


@_clipwise
def weak_augment(clip: np.ndarray, rng: np.random.Generator, config: AugmentConfig | None = None) -> np.ndarray:
    config = config or AugmentConfig()
    if not config.spatial:
        return _identity_crop(clip, config.crop_size)
    params = sample_weak_params(rng, clip.shape, config)
    return apply_weak(clip, params, config.crop_size)


def _strong_op(name: str, x: np.ndarray, m: float, rng: np.random.Generator) -> np.ndarray:
    T_, H, W, C = x.shape
    if name == "brightness":
        return x + np.float32(rng.choice((-1.0, 1.0)) * 0.3 * m)
    if name == "contrast":
        factor = 1.0 + rng.choice((-1.0, 1.0)) * 0.6 * m
        if factor == 1.0:
            return x
        mu = x.mean()
        return (x - mu) * np.float32(factor) + mu
    if name == "channel_drop":
        c = int(rng.integers(C))
        x = x.copy()
        x[..., c] *= np.float32(1.0 - m)
        return x
    if name == "cutout":
        side = int(round(m * min(H, W) / 2))
        cy, cx = int(rng.integers(H)), int(rng.integers(W))
        if side == 0:
            return x
        x = x.copy()
        y0, x0 = max(0, cy - side // 2), max(0, cx - side // 2)
        x[:, y0 : y0 + side, x0 : x0 + side, :] = 0.0
        return x
    if name == "pixel_dropout":
        keep = rng.random((T_, H, W, 1)) >= 0.3 * m
        return x * keep
    if name == "noise":
        return x + rng.normal(0.0, 0.15 * m, size=x.shape).astype(x.dtype)
    raise ValueError(f"unknown strong op {name!r}")


@_clipwise
def strong_augment(
    clip: np.ndarray,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    ops: Sequence[str] | None = None,
) -> np.ndarray:
    """Weak augmentation, then random photometric/occlusion ops, then frame dropout.

    ``ops`` forces the op list instead of sampling ``strong_ops`` of them.
    """
    config = config or AugmentConfig()
    x = weak_augment(clip, rng, config)
    if not config.spatial:
        return x
    if ops is None:
        chosen = rng.choice(len(STRONG_OPS), size=config.strong_ops, replace=False)
        ops = [STRONG_OPS[i] for i in sorted(chosen)]
    for name in ops:
        x = _strong_op(name, x, config.strong_magnitude, rng)
    x = np.clip(x, 0.0, 1.0)
    drop = rng.random(x.shape[0]) < config.frame_dropout_prob
    if drop.any():
        x = x.copy()
        x[drop] = 0.0
    return np.ascontiguousarray(x, dtype=clip.dtype)


def normalize(clip: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel standardisation of a (T, H, W, C) clip."""
    mean = np.asarray(mean, dtype=clip.dtype)
    std = np.asarray(std, dtype=clip.dtype)
    return (clip - mean) / std


@_clipwise
def standard_augment(
    clip: np.ndarray,
    rng: np.random.Generator,
    mean: Sequence[float],
    std: Sequence[float],
    config: AugmentConfig | None = None,
) -> np.ndarray:
    """Labeled-data augmentation: weak augmentation plus channel normalisation."""
    return normalize(weak_augment(clip, rng, config), mean, std)


def window_start(rng: np.random.Generator, length: int, spans: Sequence[int]) -> int:
    """Uniform start index valid for every requested window span."""
    longest = max(spans)
    if longest > length:
        raise ValueError(f"clip of {length} frames too short for a {longest}-frame window")
    return int(rng.integers(0, length - longest + 1))


def span(target_frames: int, stride: int) -> int:
    return (target_frames - 1) * stride + 1


@_clipwise
def temporal_sample(
    clip: np.ndarray,
    target_frames: int,
    stride: int,
    rng: np.random.Generator | None = None,
    start: int | None = None,
) -> np.ndarray:
    """Frames ``start, start + stride, ...`` (``target_frames`` of them)."""
    n = clip.shape[0]
    need = span(target_frames, stride)
    if n < need:
        raise ValueError(f"clip of {n} frames too short for {target_frames} frames at stride {stride}")
    if start is None:
        if rng is None:
            raise ValueError("temporal_sample needs rng or start")
        start = int(rng.integers(0, n - need + 1))
    if not 0 <= start <= n - need:
        raise ValueError(f"start {start} out of range for clip of {n} frames")
    return clip[start : start + need : stride]


def with_overrides(config: AugmentConfig, **kw) -> AugmentConfig:
    return dataclasses.replace(config, **kw)
