"""Procedural motion-pattern video dataset and the training batch stream.

Eight classes, half decided by a brief event (short-range) and half only by
how the scene evolves over many frames (long-range):

    0 flash       static object brightens for one frame (one-frame afterglow)
    1 bounce      static object jumps up for two frames, then returns
    2 reversal    fast horizontal motion that abruptly reverses
    3 occlusion   slowly moving object vanishes for two frames
    4 drift_down  slow downward drift
    5 drift_up    slow upward drift
    6 oscillation static object, slow global brightness oscillation
    7 accelerate  object starts at rest and slowly accelerates

Every direction-bearing class is invariant to horizontal flips, which the
weak augmentation applies.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import augment as aug
from .archive import file_sha256, read_archive, write_archive
from .clips import UnlabeledClip, VideoClip
from .rng import stream

CLASS_NAMES = (
    "flash",
    "bounce",
    "reversal",
    "occlusion",
    "drift_down",
    "drift_up",
    "oscillation",
    "accelerate",
)
SHORT_RANGE = (0, 1, 2, 3)
LONG_RANGE = (4, 5, 6, 7)
TEST_PER_CLASS = 25

_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass
class DatasetConfig:
    num_classes: int = 8
    clips_per_class: int = 120
    clip_frames: int = 16
    spatial: int = 16
    channels: int = 3
    label_ratio: float = 0.10
    noise_sigma: float = 0.05
    # scales the per-clip spread of background tint, object colour and size
    appearance_jitter: float = 0.0
    seed: int = 0
    test_per_class: int = TEST_PER_CLASS

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValueError(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        if self.labeled_per_class() < 1:
            raise ValueError("label_ratio leaves no labeled clip per class")
        if self.clips_per_class < 1 or self.test_per_class < 1:
            raise ValueError("clips_per_class and test_per_class must be >= 1")
        if self.clip_frames < 8:
            raise ValueError("clip_frames must be >= 8")
        if self.spatial < 12:
            raise ValueError("spatial must be >= 12 to place the object away from the border")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.appearance_jitter <= 1.0:
            raise ValueError("appearance_jitter must be in [0, 1]")

    def labeled_per_class(self) -> int:
        # guard against float fuzz such as 0.1 * 120 = 12.000000000000002
        return math.ceil(round(self.label_ratio * self.clips_per_class, 9))


# --------------------------------------------------------------------------
# rendering


def _coverage(pos: float, size: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [j, j+1) covered by the interval [pos, pos+size)."""
    j = np.arange(n)
    return np.clip(np.minimum(j + 1, pos + size) - np.maximum(j, pos), 0.0, 1.0)


def _render(
    background: np.ndarray,
    color: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
    size: float,
    visible: np.ndarray,
    gain: np.ndarray,
) -> np.ndarray:
    """Composite a square object onto the background at per-frame positions."""
    T_ = len(ys)
    H, W, _ = background.shape
    frames = np.empty((T_, *background.shape))
    for t in range(T_):
        mask = np.outer(_coverage(ys[t], size, H), _coverage(xs[t], size, W))[..., None]
        if not visible[t]:
            mask = mask * 0.0
        obj = np.clip(color * gain[t], 0.0, 1.0)
        frames[t] = background * (1.0 - mask) + obj * mask
    return frames


def generate_clip(class_id: int, config: DatasetConfig, seed: int) -> VideoClip:
    """Render one clip of ``class_id``; a pure function of (class, config, seed)."""
    if not 0 <= class_id < config.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {config.num_classes})")
    rng = np.random.default_rng(seed)
    T_, S, C = config.clip_frames, config.spatial, config.channels
    t = np.arange(T_, dtype=float)

    j = config.appearance_jitter

    def around(mid, half, n=None):
        return mid + j * rng.uniform(-half, half, size=n)

    base = around(0.35, 0.1, C)
    background = base + rng.normal(0.0, 0.03, size=(S, S, C))
    color = around(0.675, 0.125, C)
    size = float(around(3.5, 0.5))
    lo, hi = 1.0, S - size - 1.0
    y0, x0 = rng.uniform(lo + 3, hi - 3), rng.uniform(lo + 3, hi - 3)
    ys, xs = np.full(T_, y0), np.full(T_, x0)
    visible = np.ones(T_, dtype=bool)
    gain = np.ones(T_)
    scene_gain = np.ones(T_)
    # event time, kept away from the clip ends so most windows see it
    t0 = int(rng.integers(T_ // 2 - 3, T_ // 2 + 3))
    sign = rng.choice((-1.0, 1.0))
    name = CLASS_NAMES[class_id]

    if name == "flash":
        gain[t0] = 1.9
        gain[t0 + 1] = 1.45
    elif name == "bounce":
        ys[t0 : t0 + 2] = y0 - 3.0 if y0 > S / 2 else y0 + 3.0
    elif name == "reversal":
        path = np.where(t <= t0, t, 2 * t0 - t) * 0.7 * sign
        xs = (S - size) / 2 + path - (path.max() + path.min()) / 2
    elif name == "occlusion":
        vy, vx = rng.uniform(-0.25, 0.25), sign * 0.3
        ys, xs = y0 + vy * (t - t0), x0 + vx * (t - t0)
        visible[t0 : t0 + 2] = False
    elif name in ("drift_down", "drift_up"):
        v = 0.5 if name == "drift_down" else -0.5
        ys = S / 2 - size / 2 + v * (t - (T_ - 1) / 2) + rng.uniform(-1.0, 1.0)
        xs = np.full(T_, x0)
    elif name == "oscillation":
        phase = rng.uniform(0, 2 * np.pi)
        scene_gain = 1.0 + 0.3 * np.sin(2 * np.pi * t / T_ + phase)
    elif name == "accelerate":
        acc = 0.06
        angle = rng.choice((0.0, 0.5, 1.0, 1.5)) * np.pi
        disp = 0.5 * acc * t**2
        ys = S / 2 - size / 2 + np.sin(angle) * (disp - disp.mean())
        xs = S / 2 - size / 2 + np.cos(angle) * (disp - disp.mean())

    ys = np.clip(ys, 0.0, S - size)
    xs = np.clip(xs, 0.0, S - size)
    frames = _render(background, color, ys, xs, size, visible, gain)
    frames = frames * scene_gain[:, None, None, None]
    if config.noise_sigma > 0:
        frames = frames + rng.normal(0.0, config.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    meta = {"generator": name, "seed": int(seed), "noise_sigma": float(config.noise_sigma)}
    return VideoClip(frames, int(class_id), meta)


def object_centroid(frames: np.ndarray, background_level: float | None = None) -> np.ndarray:
    """(T, 2) intensity-weighted (y, x) centroid of the brightest blob per frame."""
    lum = frames.mean(axis=-1)
    out = np.zeros((frames.shape[0], 2))
    for i, f in enumerate(lum):
        w = np.clip(f - (np.median(f) if background_level is None else background_level), 0, None)
        yy, xx = np.mgrid[: f.shape[0], : f.shape[1]]
        out[i] = (w * yy).sum() / w.sum(), (w * xx).sum() / w.sum()
    return out


# --------------------------------------------------------------------------
# dataset


def _clip_seed(config: DatasetConfig, split: str, class_id: int, index: int) -> int:
    seq = np.random.SeedSequence([config.seed, _SPLIT_CODE[split], class_id, index])
    return int(seq.generate_state(1, np.uint32)[0])


@dataclass
class Dataset:
    config: DatasetConfig
    labeled: list[VideoClip]
    unlabeled: list[UnlabeledClip]
    test: list[VideoClip]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    # ground truth of the unlabeled split, read only by the pseudo-label probe
    _hidden_labels: np.ndarray = dataclasses.field(repr=False, default=None)
    content_hash: str = ""


def probe_ground_truth(dataset: Dataset) -> np.ndarray:
    """Privileged access to the hidden labels of the unlabeled split."""
    return dataset._hidden_labels


def build_dataset(config: DatasetConfig) -> Dataset:
    """Class-balanced labeled / unlabeled / test splits with disjoint seeds."""
    config.validate()
    n_lab = config.labeled_per_class()
    labeled, unlabeled, hidden, test = [], [], [], []
    for c in range(config.num_classes):
        for i in range(config.clips_per_class):
            clip = generate_clip(c, config, _clip_seed(config, "train", c, i))
            if i < n_lab:
                labeled.append(clip)
            else:
                meta = {k: v for k, v in clip.meta.items() if k != "generator"}
                unlabeled.append(UnlabeledClip(clip.frames, meta))
                hidden.append(c)
        for i in range(config.test_per_class):
            test.append(generate_clip(c, config, _clip_seed(config, "test", c, i)))
    train = np.stack([x.frames for x in labeled] + [x.frames for x in unlabeled])
    mean = tuple(float(v) for v in train.mean(axis=(0, 1, 2, 3)))
    std = tuple(float(v) for v in train.std(axis=(0, 1, 2, 3)))
    return Dataset(config, labeled, unlabeled, test, mean, std, np.asarray(hidden, dtype=np.int64))


# --------------------------------------------------------------------------
# serialization

SPLIT_FILES = {"labeled": "labeled.bin", "unlabeled": "unlabeled.bin", "test": "test.bin"}


def save_dataset(dataset: Dataset, out_dir) -> dict[str, str]:
    """Write one archive per split; returns {split: sha256}."""
    out_dir = Path(out_dir)
    base = {
        "config": dataclasses.asdict(dataset.config),
        "mean": list(dataset.mean),
        "std": list(dataset.std),
    }
    hashes = {}
    for split, fname in SPLIT_FILES.items():
        clips = getattr(dataset, split)
        meta = dict(base, split=split, clip_meta=[c.meta for c in clips])
        arrays = {"frames": np.stack([c.frames for c in clips])}
        if split == "unlabeled":
            arrays["hidden_labels"] = dataset._hidden_labels
        else:
            arrays["labels"] = np.asarray([c.label for c in clips], dtype=np.int64)
        hashes[split] = write_archive(out_dir / fname, meta, arrays)
    return hashes


def dataset_hash(data_dir) -> str:
    import hashlib

    h = hashlib.sha256()
    for split in SPLIT_FILES:
        h.update(file_sha256(Path(data_dir) / SPLIT_FILES[split]).encode())
    return h.hexdigest()


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    parts = {}
    meta = None
    for split, fname in SPLIT_FILES.items():
        path = data_dir / fname
        if not path.exists():
            raise FileNotFoundError(f"missing dataset split file {path}")
        meta, arrays = read_archive(path)
        parts[split] = (meta, arrays)
    config = DatasetConfig(**meta["config"])
    lab_meta, lab = parts["labeled"]
    unl_meta, unl = parts["unlabeled"]
    tst_meta, tst = parts["test"]
    labeled = [VideoClip(f, int(y), m) for f, y, m in zip(lab["frames"], lab["labels"], lab_meta["clip_meta"])]
    unlabeled = [UnlabeledClip(f, m) for f, m in zip(unl["frames"], unl_meta["clip_meta"])]
    test = [VideoClip(f, int(y), m) for f, y, m in zip(tst["frames"], tst["labels"], tst_meta["clip_meta"])]
    if not labeled or not unlabeled or not test:
        raise ValueError(f"dataset in {data_dir} has an empty split")
    return Dataset(
        config, labeled, unlabeled, test, tuple(meta["mean"]), tuple(meta["std"]),
        unl["hidden_labels"], dataset_hash(data_dir),
    )


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """One optimisation step's inputs, already in model layout (B, C, T, H, W)."""

    epoch: int
    step: int
    labeled_z: np.ndarray
    labeled_a: np.ndarray
    labels: np.ndarray
    weak_z: np.ndarray
    strong_z: np.ndarray
    weak_a: np.ndarray
    strong_a: np.ndarray
    unlabeled_index: np.ndarray

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.labels), len(self.unlabeled_index)


def to_model_layout(clips: list[np.ndarray]) -> np.ndarray:
    """Stack (T, H, W, C) clips into a (B, C, T, H, W) array."""
    return np.ascontiguousarray(np.stack(clips).transpose(0, 4, 1, 2, 3))


def steps_per_epoch(n_unlabeled: int, batch_u: int) -> int:
    return -(-n_unlabeled // batch_u)


def compose_labeled(
    clip: np.ndarray, rng: np.random.Generator, dataset: Dataset, frames: tuple[int, int], acfg: aug.AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Standard-augmented views of one labeled clip for Z and A (shared window)."""
    sz, sa = acfg.strides()
    start = aug.window_start(rng, clip.shape[0], (aug.span(frames[0], sz), aug.span(frames[1], sa)))
    vz = aug.standard_augment(aug.temporal_sample(clip, frames[0], sz, start=start), rng, dataset.mean, dataset.std, acfg)
    va = aug.standard_augment(aug.temporal_sample(clip, frames[1], sa, start=start), rng, dataset.mean, dataset.std, acfg)
    return vz, va


def compose_unlabeled(
    clip: np.ndarray, rng: np.random.Generator, dataset: Dataset, frames: tuple[int, int], acfg: aug.AugmentConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(weak Z, strong Z, weak A, strong A) views sharing one temporal window."""
    sz, sa = acfg.strides()
    start = aug.window_start(rng, clip.shape[0], (aug.span(frames[0], sz), aug.span(frames[1], sa)))
    cz = aug.temporal_sample(clip, frames[0], sz, start=start)
    ca = aug.temporal_sample(clip, frames[1], sa, start=start)
    m, s = dataset.mean, dataset.std
    return (
        aug.normalize(aug.weak_augment(cz, rng, acfg), m, s),
        aug.normalize(aug.strong_augment(cz, rng, acfg), m, s),
        aug.normalize(aug.weak_augment(ca, rng, acfg), m, s),
        aug.normalize(aug.strong_augment(ca, rng, acfg), m, s),
    )


def batch_iterator(
    dataset: Dataset,
    batch_l: int,
    batch_u: int,
    seed: int,
    frames: tuple[int, int],
    augment_config: aug.AugmentConfig | None = None,
    epoch: int = 0,
    with_unlabeled: bool = True,
) -> Iterator[Batch]:
    """Batches for one epoch: one pass over the unlabeled split without replacement.

    Labeled clips are drawn with replacement. All randomness is keyed on
    (seed, epoch, step, slot), so an epoch can be regenerated in isolation.
    ``with_unlabeled=False`` skips composing unlabeled views (same batch
    boundaries, same labeled draws).
    """
    if batch_l < 1 or batch_u < 1:
        raise ValueError("batch sizes must be >= 1")
    if not dataset.labeled or not dataset.unlabeled:
        raise ValueError("empty labeled or unlabeled split")
    acfg = augment_config or aug.AugmentConfig()
    n_u = len(dataset.unlabeled)
    order = stream(seed, "shuffle", epoch).permutation(n_u)
    for step in range(steps_per_epoch(n_u, batch_u)):
        idx_u = order[step * batch_u : (step + 1) * batch_u]
        pick = stream(seed, "labeled", epoch, step).integers(0, len(dataset.labeled), size=batch_l)
        lz, la = [], []
        for slot, i in enumerate(pick):
            rng = stream(seed, acfg.seed_stream, "labeled", epoch, step, slot)
            vz, va = compose_labeled(dataset.labeled[i].frames, rng, dataset, frames, acfg)
            lz.append(vz)
            la.append(va)
        views = [[], [], [], []]
        if with_unlabeled:
            for slot, i in enumerate(idx_u):
                rng = stream(seed, acfg.seed_stream, "unlabeled", epoch, step, slot)
                for bucket, v in zip(views, compose_unlabeled(dataset.unlabeled[i].frames, rng, dataset, frames, acfg)):
                    bucket.append(v)
        yield Batch(
            epoch,
            step,
            to_model_layout(lz),
            to_model_layout(la),
            np.array([dataset.labeled[i].label for i in pick], dtype=np.int64),
            *(to_model_layout(v) if v else None for v in views),
            unlabeled_index=np.asarray(idx_u),
        )
