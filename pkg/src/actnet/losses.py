"""Supervised, cross-architecture pseudo-label and contrastive losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossConfig:
    tau_conf: float = 0.8
    gamma: float = 2.0
    beta: float = 2.0
    tau_contrastive: float = 0.5
    contrastive_symmetric: bool = True

    def validate(self) -> None:
        # tau_conf above 1 is allowed: it switches pseudo-labeling off entirely
        if not self.tau_conf > 0:
            raise ValueError(f"tau_conf must be > 0, got {self.tau_conf}")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be >= 0")
        if not self.tau_contrastive > 0:
            raise ValueError("tau_contrastive must be > 0")


@dataclass
class PseudoLabels:
    labels: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray

    @property
    def mask_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass
class LossBreakdown:
    ls_z: float = 0.0
    ls_a: float = 0.0
    lu_z: float = 0.0
    lu_a: float = 0.0
    l_ca: float = 0.0
    total: float = 0.0
    # masks_za: A's pseudo-labels that supervise Z; masks_az: Z's that supervise A
    masks_za: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    masks_az: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    pseudo_labels: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def mask_rate_za(self) -> float:
        return float(self.masks_za.mean()) if self.masks_za.size else 0.0

    @property
    def mask_rate_az(self) -> float:
        return float(self.masks_az.mean()) if self.masks_az.size else 0.0

    def components(self) -> dict[str, float]:
        return {"ls_z": self.ls_z, "ls_a": self.ls_a, "lu_z": self.lu_z,
                "lu_a": self.lu_a, "l_ca": self.l_ca, "total": self.total}


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy of (B, K) logits against integer labels."""
    return T.cross_entropy(logits, labels)


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a labeled batch."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("supervised_loss: empty batch")
    return T.mean(T.cross_entropy(logits, labels))


def pseudo_labels(teacher_logits: Tensor | np.ndarray, tau_conf: float) -> PseudoLabels:
    """Hard labels and confidence mask from teacher logits (no gradient)."""
    z = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    q = e / e.sum(axis=-1, keepdims=True)
    labels = q.argmax(axis=-1)  # first maximum wins ties
    conf = q.max(axis=-1)
    return PseudoLabels(labels.astype(np.int64), conf, conf >= tau_conf)


def pseudo_label_loss(
    teacher_weak_logits: Tensor,
    student_strong_logits: Tensor,
    tau_conf: float,
) -> tuple[Tensor, PseudoLabels]:
    """Confidence-masked cross-entropy of student logits against teacher pseudo-labels.

    The teacher side is read as plain numbers, so no gradient reaches the
    teacher. The sum is divided by the full batch size, masked samples
    included.
    """
    if teacher_weak_logits.shape != student_strong_logits.shape or teacher_weak_logits.ndim != 2:
        raise ShapeError(
            "pseudo_label_loss",
            f"teacher {teacher_weak_logits.shape} vs student {student_strong_logits.shape}",
        )
    pl = pseudo_labels(teacher_weak_logits, tau_conf)
    B = student_strong_logits.shape[0]
    ce = T.cross_entropy(student_strong_logits, pl.labels)
    mask = Tensor(pl.mask.astype(student_strong_logits.dtype))
    return T.sum(T.mul(ce, mask)) / float(B), pl


def _anchored(anchor: Tensor, other: Tensor, tau: float) -> Tensor:
    """Per-anchor loss: positive is other[i], negatives are anchor[k], other[k] for k != i."""
    B = anchor.shape[0]
    cross = T.matmul(anchor, T.transpose(other, (1, 0))) / tau  # B x B, diagonal = positives
    if B == 1:
        logits = cross
    else:
        same = T.matmul(anchor, T.transpose(anchor, (1, 0))) / tau
        off = np.array([[k for k in range(B) if k != i] for i in range(B)])
        same_off = T.getitem(same, (np.arange(B)[:, None], off))  # B x (B-1)
        logits = T.concat([cross, same_off], axis=1)
    logp = T.log_softmax(logits)
    return T.neg(T.getitem(logp, (np.arange(B), np.arange(B))))


def contrastive_loss(
    z_embeds: Tensor,
    a_embeds: Tensor,
    tau_contrastive: float = 0.5,
    symmetric: bool = True,
) -> Tensor:
    """Cross-architecture contrastive loss over cosine similarities.

    Anchoring at each primary embedding, the positive is the auxiliary
    embedding of the same clip and the negatives are both architectures'
    embeddings of every other clip. ``symmetric`` averages in the mirrored
    loss anchored at the auxiliary embeddings.
    """
    if z_embeds.shape != a_embeds.shape or z_embeds.ndim != 2 or z_embeds.shape[0] < 1:
        raise ShapeError("contrastive_loss", f"embeddings {z_embeds.shape} vs {a_embeds.shape}")
    zn = T.l2_normalize(z_embeds)
    an = T.l2_normalize(a_embeds)
    loss = T.mean(_anchored(zn, an, tau_contrastive))
    if symmetric:
        loss = T.mul(T.add(loss, T.mean(_anchored(an, zn, tau_contrastive))), 0.5)
    return loss


def total_loss(
    ls_z,
    ls_a,
    lu_z,
    lu_a,
    l_ca,
    config: LossConfig,
):
    """``(ls_z + ls_a) + gamma * (lu_z + lu_a) + beta * l_ca``; works on floats or tensors."""
    for name, v in (("ls_z", ls_z), ("ls_a", ls_a), ("lu_z", lu_z), ("lu_a", lu_a), ("l_ca", l_ca)):
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss component {name} = {val}")
    return (ls_z + ls_a) + config.gamma * (lu_z + lu_a) + config.beta * l_ca
