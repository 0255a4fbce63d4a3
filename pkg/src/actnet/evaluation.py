"""Test-time multi-view inference, top-1 accuracy and the pseudo-label quality probe."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import augment as aug
from . import tensor as T
from .data import to_model_layout
from .models import ModelParams, forward, frames_for

CROP_POSITIONS = ("start", "center", "end")


@dataclass
class EvalConfig:
    clips_per_video: int = 5
    crops_per_clip: int = 3
    crop_size: int = 16
    batch_views: int = 256

    def validate(self) -> None:
        if self.clips_per_video < 1 or self.crops_per_clip < 1:
            raise ValueError("clips_per_video and crops_per_clip must be >= 1")
        if self.crop_size < 1 or self.batch_views < 1:
            raise ValueError("crop_size and batch_views must be >= 1")


@dataclass
class ProbeRecord:
    epoch: int
    subset_size: int
    acc_primary: float | None
    acc_auxiliary: float | None
    acc_reference_single_model: float | None

    def series(self) -> dict[str, float | None]:
        return {
            "primary": self.acc_primary,
            "auxiliary": self.acc_auxiliary,
            "reference": self.acc_reference_single_model,
        }


def clip_starts(n_frames: int, window: int, count: int) -> list[int]:
    """``count`` start indices spread uniformly over the valid range."""
    if window > n_frames:
        raise ValueError(f"video of {n_frames} frames too short for a {window}-frame clip")
    return [int(s) for s in np.rint(np.linspace(0, n_frames - window, count))]


def crop_boxes(height: int, width: int, crop: int, count: int) -> list[tuple[int, int]]:
    """(top, left) of ``count`` crops slid along the longer spatial axis, centred on the other."""
    if crop > min(height, width):
        raise ValueError(f"crop {crop} larger than frame {height}x{width}")
    if count == 1:
        return [((height - crop) // 2, (width - crop) // 2)]
    along = [int(p) for p in np.rint(np.linspace(0, max(height, width) - crop, count))]
    if width >= height:
        return [((height - crop) // 2, p) for p in along]
    return [(p, (width - crop) // 2) for p in along]


def video_views(
    frames: np.ndarray,
    target_frames: int,
    stride: int,
    config: EvalConfig,
    mean: Sequence[float],
    std: Sequence[float],
) -> list[np.ndarray]:
    """All clips x crops of one (T, H, W, C) video, normalised."""
    n, H, W, _ = frames.shape
    c = config.crop_size
    views = []
    for s in clip_starts(n, aug.span(target_frames, stride), config.clips_per_video):
        clip = aug.temporal_sample(frames, target_frames, stride, start=s)
        for top, left in crop_boxes(H, W, c, config.crops_per_clip):
            views.append(aug.normalize(clip[:, top : top + c, left : left + c], mean, std))
    return views


def softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_views(params: ModelParams, views: list[np.ndarray], batch: int = 256) -> np.ndarray:
    """Eval-mode softmax probabilities for a list of (T, H, W, C) views, (V, K) float64."""
    out = []
    with T.no_grad():
        for i in range(0, len(views), batch):
            x = T.Tensor(to_model_layout(views[i : i + batch]).astype(T.default_dtype()))
            logits, _ = forward(params, x, train_mode=False)
            out.append(softmax64(logits.data))
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def _frames_of(video) -> np.ndarray:
    return video.frames if hasattr(video, "frames") else np.asarray(video)


def multi_clip_predict(
    params: ModelParams,
    videos: Sequence,
    mean: Sequence[float],
    std: Sequence[float],
    stride: int,
    config: EvalConfig | None = None,
) -> np.ndarray:
    """Averaged softmax over clips x crops for each video, (N, K)."""
    config = config or EvalConfig()
    config.validate()
    per_video = config.clips_per_video * config.crops_per_clip
    views = []
    for v in videos:
        views.extend(video_views(_frames_of(v), frames_for(params), stride, config, mean, std))
    probs = predict_views(params, views, config.batch_views)
    return probs.reshape(len(videos), per_video, -1).mean(axis=1)


def multi_clip_inference(
    params: ModelParams,
    video,
    mean: Sequence[float],
    std: Sequence[float],
    stride: int,
    config: EvalConfig | None = None,
) -> np.ndarray:
    """Averaged softmax probabilities of one video, (K,)."""
    return multi_clip_predict(params, [video], mean, std, stride, config)[0]


def single_view_predict(params, videos, mean, std, stride, crop_size=16) -> np.ndarray:
    """Centre clip, centre crop; the cheap per-epoch evaluation."""
    return multi_clip_predict(params, videos, mean, std, stride, EvalConfig(1, 1, crop_size))


def top1_accuracy(predictions: np.ndarray, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("top1_accuracy: empty input")
    if len(predictions) != len(labels):
        raise ValueError(f"top1_accuracy: {len(predictions)} predictions vs {len(labels)} labels")
    return float(np.mean(predictions.argmax(axis=-1) == labels))


def probe_views(clips, frames: tuple[int, int], strides: tuple[int, int], mean, std, crop_size=16):
    """Deterministic weak views (centre window, centre crop) for Z and A."""
    vz, va = [], []
    for c in clips:
        x = _frames_of(c)
        n = x.shape[0]
        start = (n - max(aug.span(frames[0], strides[0]), aug.span(frames[1], strides[1]))) // 2
        _, H, W, _ = x.shape
        top, left = (H - crop_size) // 2, (W - crop_size) // 2
        x = x[:, top : top + crop_size, left : left + crop_size]
        vz.append(aug.normalize(aug.temporal_sample(x, frames[0], strides[0], start=start), mean, std))
        va.append(aug.normalize(aug.temporal_sample(x, frames[1], strides[1], start=start), mean, std))
    return vz, va


def probe_from_probs(
    epoch: int,
    probs_z: np.ndarray,
    probs_a: np.ndarray,
    probs_ref: np.ndarray | None,
    hidden_labels: np.ndarray,
    tau_conf: float,
    subset: np.ndarray | None = None,
) -> tuple[ProbeRecord, np.ndarray]:
    """Probe accuracies from precomputed probabilities; returns the record and subset indices."""
    if subset is None:
        subset = np.flatnonzero(probs_a.max(axis=-1) >= tau_conf)
    if subset.size == 0:
        return ProbeRecord(epoch, 0, None, None, None), subset
    y = hidden_labels[subset]

    def acc(p):
        return None if p is None else float(np.mean(p[subset].argmax(axis=-1) == y))

    return ProbeRecord(epoch, int(subset.size), acc(probs_z), acc(probs_a), acc(probs_ref)), subset


def pseudo_label_probe(
    z_params: ModelParams,
    a_params: ModelParams,
    reference_params: ModelParams | None,
    unlabeled,
    hidden_labels: np.ndarray,
    tau_conf: float,
    mean,
    std,
    strides: tuple[int, int] = (2, 1),
    epoch: int = 0,
    crop_size: int = 16,
    subset: np.ndarray | None = None,
) -> ProbeRecord:
    """Pseudo-label accuracy of three label sources on the auxiliary model's confident subset.

    The subset is every unlabeled clip whose auxiliary weak-view confidence
    reaches ``tau_conf`` (or the given ``subset`` indices when frozen).
    ``reference_params`` is a single primary-architecture model trained
    without the auxiliary partner; None marks that series absent.
    """
    frames = (frames_for(z_params), frames_for(a_params))
    vz, va = probe_views(unlabeled, frames, strides, mean, std, crop_size)
    pz = predict_views(z_params, vz)
    pa = predict_views(a_params, va)
    pr = predict_views(reference_params, vz) if reference_params is not None else None
    record, _ = probe_from_probs(epoch, pz, pa, pr, np.asarray(hidden_labels), tau_conf, subset)
    return record


def mean_or_nan(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
