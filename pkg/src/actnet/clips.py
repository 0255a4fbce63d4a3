"""Clip containers shared by the data pipeline and the augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class VideoClip:
    """A labeled or test clip: frames are (T, H, W, C) in [0, 1]."""

    frames: np.ndarray
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return replace(self, frames=frames)


@dataclass(frozen=True)
class UnlabeledClip:
    """An unlabeled clip. It deliberately carries no label accessor."""

    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def with_frames(self, frames: np.ndarray) -> "UnlabeledClip":
        return replace(self, frames=frames)
