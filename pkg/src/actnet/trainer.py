"""Joint optimisation of the primary and auxiliary models.

One step runs labeled, weak and strong forwards of both models, builds the
cross-model pseudo-label losses (teacher logits read as constants), the
contrastive term and the weighted total, then takes one backward pass and
one SGD update per model.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .archive import atomic_write_text, read_archive, write_archive
from .augment import AugmentConfig
from .data import Batch, Dataset, batch_iterator, probe_ground_truth, steps_per_epoch
from .evaluation import EvalConfig, multi_clip_predict, predict_views, probe_from_probs, probe_views
from .evaluation import single_view_predict, top1_accuracy
from .losses import LossBreakdown, LossConfig, contrastive_loss, pseudo_label_loss, supervised_loss, total_loss
from .models import ModelConfig, ModelParams, forward, init_params
from .rng import stream

log = logging.getLogger(__name__)

MODES = ("actnetformer", "fixmatch-baseline", "supervised-only")
METRICS_VERSION = 1
METRICS_COLUMNS = (
    "kind", "epoch", "step", "lr",
    "ls_z", "ls_a", "lu_z", "lu_a", "l_ca", "total", "mask_rate_za", "mask_rate_az",
    "test_top1_z", "test_top1_a",
    "probe_subset", "probe_acc_primary", "probe_acc_auxiliary", "probe_acc_reference",
)


@dataclass
class TrainConfig:
    mode: str = "actnetformer"
    epochs: int = 40
    base_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_schedule: str = "cosine"
    batch_l: int = 1
    batch_u: int = 5
    seed: int = 0
    checkpoint_every: int = 10
    probe_every: int = 10
    probe_freeze_subset: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.batch_l < 1 or self.batch_u < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.checkpoint_every < 1 or self.probe_every < 1:
            raise ValueError("checkpoint_every and probe_every must be >= 1")
        self.loss.validate()
        self.model.validate()
        self.augment.validate()
        self.eval.validate()

    def effective_loss(self) -> LossConfig:
        """Loss weights actually used: supervised-only zeroes both unlabeled weights."""
        if self.mode == "supervised-only":
            return dataclasses.replace(self.loss, gamma=0.0, beta=0.0)
        if self.mode == "fixmatch-baseline":
            return dataclasses.replace(self.loss, beta=0.0)
        return self.loss

    def trains_auxiliary(self) -> bool:
        return self.mode != "fixmatch-baseline"

    def frames(self) -> tuple[int, int]:
        return self.model.clip_frames_primary, self.model.clip_frames_auxiliary

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"loss": LossConfig, "model": ModelConfig, "augment": AugmentConfig, "eval": EvalConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = typ(**vals)
        return cls(**d)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params})


def learning_rate(config: TrainConfig, global_step: int, total_steps: int) -> float:
    if config.lr_schedule == "constant":
        return config.base_lr
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * global_step / total_steps))


def sgd_update(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Classical SGD with momentum; weight decay is added to the gradient."""
    for name, p in params:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"sgd_update: missing gradient for {params.arch_tag}:{name}")
        v = state.velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= np.asarray(lr * v, dtype=p.data.dtype)
    state.step += 1


def collect_grads(params: ModelParams) -> dict[str, np.ndarray]:
    """Leaf gradients; parameters outside this step's loss graph get zeros."""
    return {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params}


def _x(arr: np.ndarray) -> T.Tensor:
    return T.Tensor(arr.astype(T.default_dtype(), copy=False))


def _value(v) -> float:
    return float(v.data) if isinstance(v, T.Tensor) else float(v)


def _fused_forward(params: ModelParams, parts: list[tuple[str, np.ndarray]], key: tuple) -> dict:
    """One train-mode forward over several view groups stacked on the batch axis.

    Each group keeps its own dropout stream (``key + (tag,)``), so results do
    not depend on which other groups share the call. Returns
    ``{tag: (logits, embedding)}``.
    """
    x = _x(np.concatenate([arr for _, arr in parts]))
    rngs = [(stream(*key, tag), len(arr)) for tag, arr in parts]
    logits, emb = forward(params, x, train_mode=True, rng=rngs)
    out, i = {}, 0
    for tag, arr in parts:
        n = len(arr)
        out[tag] = (logits[i : i + n], emb[i : i + n])
        i += n
    return out


def _teacher_forward(params: ModelParams, arr: np.ndarray, key: tuple, tag: str) -> T.Tensor:
    with T.no_grad():
        return forward(params, _x(arr), train_mode=True, rng=[(stream(*key, tag), len(arr))])[0]


def compute_losses(
    batch: Batch,
    z_params: ModelParams,
    a_params: ModelParams | None,
    config: TrainConfig,
) -> tuple[T.Tensor, LossBreakdown]:
    """Forward passes and the weighted objective for one batch (no update).

    Terms whose weight is zero are not computed and are reported as 0.
    Weak views feed the teachers; they are tracked for gradients only when
    the contrastive term needs their embeddings, and pseudo-labels are
    always read from their values, never their graph.
    """
    lc = config.effective_loss()
    key = (config.seed, "dropout", batch.epoch, batch.step)
    out = LossBreakdown()
    ls_a = lu_z = lu_a = l_ca = 0.0
    use_pl, use_ca = lc.gamma > 0, lc.beta > 0
    if config.mode == "fixmatch-baseline":
        use_ca = False

    def groups(prefix, labeled, weak, strong):
        g = [(f"labeled_{prefix}", labeled)]
        if use_ca:
            g.append((f"weak_{prefix}", weak))
        if use_pl:
            g.append((f"strong_{prefix}", strong))
        return g

    fz = _fused_forward(z_params, groups("z", batch.labeled_z, batch.weak_z, batch.strong_z), key)
    ls_z = supervised_loss(fz["labeled_z"][0], batch.labels)

    if config.mode == "fixmatch-baseline":
        if use_pl:
            wz = _teacher_forward(z_params, batch.weak_z, key, "weak_z")
            lu_z, pl = pseudo_label_loss(wz, fz["strong_z"][0], lc.tau_conf)
            out.masks_za = pl.mask
            out.pseudo_labels = [("Z", int(y), float(c)) for y, c in zip(pl.labels, pl.confidence)]
    else:
        fa = _fused_forward(a_params, groups("a", batch.labeled_a, batch.weak_a, batch.strong_a), key)
        ls_a = supervised_loss(fa["labeled_a"][0], batch.labels)
        if use_ca:
            l_ca = contrastive_loss(fz["weak_z"][1], fa["weak_a"][1], lc.tau_contrastive, lc.contrastive_symmetric)
        if use_pl:
            if use_ca:
                wz, wa = fz["weak_z"][0], fa["weak_a"][0]
            else:
                wz = _teacher_forward(z_params, batch.weak_z, key, "weak_z")
                wa = _teacher_forward(a_params, batch.weak_a, key, "weak_a")
            # A teaches Z, Z teaches A
            lu_z, pl_a = pseudo_label_loss(wa, fz["strong_z"][0], lc.tau_conf)
            lu_a, pl_z = pseudo_label_loss(wz, fa["strong_a"][0], lc.tau_conf)
            out.masks_za, out.masks_az = pl_a.mask, pl_z.mask
            out.pseudo_labels = [("A", int(y), float(c)) for y, c in zip(pl_a.labels, pl_a.confidence)]
            out.pseudo_labels += [("Z", int(y), float(c)) for y, c in zip(pl_z.labels, pl_z.confidence)]

    try:
        loss = total_loss(ls_z, ls_a, lu_z, lu_a, l_ca, lc)
    except FloatingPointError as exc:
        raise FloatingPointError(f"epoch {batch.epoch} step {batch.step}: {exc}") from None
    out.ls_z, out.ls_a, out.lu_z, out.lu_a, out.l_ca = map(_value, (ls_z, ls_a, lu_z, lu_a, l_ca))
    out.total = _value(loss)
    return loss, out


def train_step(
    batch: Batch,
    z_params: ModelParams,
    a_params: ModelParams | None,
    states: dict[str, OptimizerState],
    config: TrainConfig,
    lr: float,
) -> LossBreakdown:
    """One forward/backward/update of every trained model; returns the loss breakdown."""
    models = {"Z": z_params}
    if config.trains_auxiliary():
        models["A"] = a_params
    for p in models.values():
        p.zero_grad()
    T.new_tape()
    loss, parts = compute_losses(batch, z_params, a_params, config)
    T.backward(loss)
    for tag, p in models.items():
        sgd_update(p, collect_grads(p), states[tag], lr, config.momentum, config.weight_decay)
        p.zero_grad()
    return parts


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def save_checkpoint(
    path,
    config: TrainConfig,
    epoch: int,
    models: dict[str, ModelParams],
    states: dict[str, OptimizerState] | None = None,
    extra: dict | None = None,
) -> str:
    arrays, meta_models = {}, {}
    for tag, p in models.items():
        meta_models[tag] = {"init_seed": p.init_seed, "config": dataclasses.asdict(p.config)}
        for name, t in p:
            arrays[f"{tag}/{name}"] = t.data
        if states is not None:
            for name, v in states[tag].velocity.items():
                arrays[f"opt/{tag}/{name}"] = v
    meta = {
        "train_config": config.to_dict(),
        "epoch": epoch,
        "models": meta_models,
        "opt_steps": {tag: s.step for tag, s in (states or {}).items()},
        "deployment_model": "Z",
    }
    meta.update(extra or {})
    return write_archive(path, meta, arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, ModelParams], dict[str, OptimizerState]]:
    meta, arrays = read_archive(path)
    models, states = {}, {}
    for tag, info in meta["models"].items():
        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in info["config"].items()})
        prefix = f"{tag}/"
        params = {
            k[len(prefix):]: T.Tensor(np.array(v), requires_grad=True)
            for k, v in arrays.items() if k.startswith(prefix)
        }
        models[tag] = ModelParams(params, info["init_seed"], tag, cfg)
        oprefix = f"opt/{tag}/"
        vel = {k[len(oprefix):]: np.array(v) for k, v in arrays.items() if k.startswith(oprefix)}
        if vel:
            states[tag] = OptimizerState(vel, meta["opt_steps"][tag])
    return meta, models, states


# --------------------------------------------------------------------------
# metrics


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_row(**values) -> dict[str, str]:
    unknown = set(values) - set(METRICS_COLUMNS)
    if unknown:
        raise KeyError(f"unknown metrics columns {sorted(unknown)}")
    return {c: _fmt(values.get(c)) for c in METRICS_COLUMNS}


def render_metrics(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRICS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: metrics file lacks columns {sorted(missing)}")
        return list(reader)


# --------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    z_params: ModelParams
    a_params: ModelParams | None
    metrics: list[dict[str, str]]
    final: dict
    seconds: float = 0.0


ReferenceFn = Callable[[int], "ModelParams | None"]


def _probe(epoch, z, a, reference, dataset, config, frozen_subset):
    strides = config.augment.strides()
    vz, va = probe_views(dataset.unlabeled, config.frames(), strides, dataset.mean, dataset.std,
                         config.augment.crop_size)
    pz = predict_views(z, vz)
    pa = predict_views(a, va)
    pr = predict_views(reference, vz) if reference is not None else None
    return probe_from_probs(epoch, pz, pa, pr, probe_ground_truth(dataset), config.loss.tau_conf, frozen_subset)


def _check_teacher_isolation(batch: Batch, z, a, config: TrainConfig) -> None:
    """Blanking the student's strong views must leave the teacher's pseudo-labels unchanged."""
    if batch.weak_z is None:
        return
    key = (config.seed, "dropout", batch.epoch, batch.step)
    blank = dataclasses.replace(batch, strong_z=np.zeros_like(batch.strong_z), strong_a=np.zeros_like(batch.strong_a))
    labels = []
    with T.no_grad():
        for b in (batch, blank):
            teachers = [(a, b.weak_a, "weak_a")] if a is not None else [(z, b.weak_z, "weak_z")]
            out = [_teacher_forward(p, arr, key, tag).data.argmax(-1) for p, arr, tag in teachers]
            labels.append(out)
    if not all(np.array_equal(x, y) for x, y in zip(*labels)):
        raise RuntimeError("teacher pseudo-labels depend on the student's strong view")


def fit(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    reference: ReferenceFn | None = None,
    resume: bool = False,
    progress: Callable[[str], None] | None = None,
) -> FitResult:
    """Train for ``config.epochs`` unlabeled passes.

    Writes ``metrics.csv`` (one row per step plus one per epoch), periodic
    checkpoints and ``final.ckpt`` under ``out_dir`` when given. With
    ``resume`` the latest checkpoint in ``out_dir`` is restored and the run
    continues exactly as if never interrupted.
    """
    config.validate()
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    lc = config.effective_loss()
    z = init_params(config.model, "Z", config.seed)
    a = init_params(config.model, "A", config.seed) if config.trains_auxiliary() else None
    models = {"Z": z} if a is None else {"Z": z, "A": a}
    states = {tag: OptimizerState.for_params(p) for tag, p in models.items()}
    rows: list[dict[str, str]] = []
    start_epoch = 0
    frozen_subset = None

    if resume and out is not None:
        ckpts = sorted((out / "checkpoints").glob("epoch_*.ckpt"))
        if ckpts:
            meta, models, states = load_checkpoint(ckpts[-1])
            z, a = models["Z"], models.get("A")
            start_epoch = meta["epoch"] + 1
            if meta.get("probe_subset") is not None:
                frozen_subset = np.asarray(meta["probe_subset"], dtype=np.int64)
            rows = [r for r in read_metrics(out / "metrics.csv") if int(r["epoch"]) < start_epoch]

    n_steps = steps_per_epoch(len(dataset.unlabeled), config.batch_u)
    total_steps = n_steps * config.epochs
    with_unlabeled = lc.gamma > 0 or lc.beta > 0
    strides = config.augment.strides()
    test_labels = np.array([c.label for c in dataset.test])

    for epoch in range(start_epoch, config.epochs):
        last_batch = None
        for batch in batch_iterator(dataset, config.batch_l, config.batch_u, config.seed, config.frames(),
                                    config.augment, epoch, with_unlabeled):
            gstep = epoch * n_steps + batch.step
            lr = learning_rate(config, gstep, total_steps)
            parts = train_step(batch, z, a, states, config, lr)
            rows.append(metrics_row(
                kind="step", epoch=epoch, step=gstep, lr=lr, **parts.components(),
                mask_rate_za=parts.mask_rate_za, mask_rate_az=parts.mask_rate_az,
            ))
            last_batch = batch

        acc_z = top1_accuracy(single_view_predict(z, dataset.test, dataset.mean, dataset.std, strides[0],
                                                  config.augment.crop_size), test_labels)
        acc_a = None
        if a is not None:
            acc_a = top1_accuracy(single_view_predict(a, dataset.test, dataset.mean, dataset.std, strides[1],
                                                      config.augment.crop_size), test_labels)
        probe = {}
        if a is not None and (epoch + 1) % config.probe_every == 0:
            ref = reference(epoch) if reference is not None else None
            rec, subset = _probe(epoch, z, a, ref, dataset, config, frozen_subset)
            if config.probe_freeze_subset and frozen_subset is None:
                frozen_subset = subset
            probe = dict(probe_subset=rec.subset_size, probe_acc_primary=rec.acc_primary,
                         probe_acc_auxiliary=rec.acc_auxiliary, probe_acc_reference=rec.acc_reference_single_model)
            if last_batch is not None:
                _check_teacher_isolation(last_batch, z, a if config.mode == "actnetformer" else None, config)
        rows.append(metrics_row(kind="epoch", epoch=epoch, step=(epoch + 1) * n_steps - 1,
                                lr=learning_rate(config, (epoch + 1) * n_steps, total_steps),
                                test_top1_z=acc_z, test_top1_a=acc_a, **probe))
        if progress:
            progress(f"epoch {epoch + 1}/{config.epochs} test_top1_z={acc_z:.3f}"
                     + (f" test_top1_a={acc_a:.3f}" if acc_a is not None else ""))
        if out is not None:
            atomic_write_text(out / "metrics.csv", render_metrics(rows))
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                extra = {"probe_subset": None if frozen_subset is None else frozen_subset.tolist(),
                         "dataset_hash": dataset.content_hash}
                save_checkpoint(out / "checkpoints" / checkpoint_name(epoch), config, epoch, models, states, extra)

    final = final_evaluation(z, a, dataset, config)
    if out is not None:
        save_checkpoint(out / "final.ckpt", config, config.epochs - 1, models, None,
                        {"dataset_hash": dataset.content_hash})
        atomic_write_text(out / "final.json", json.dumps(final, indent=2, sort_keys=True) + "\n")
    return FitResult(z, a, rows, final, time.perf_counter() - t0)


def final_evaluation(z: ModelParams, a: ModelParams | None, dataset: Dataset, config: TrainConfig) -> dict:
    """Multi-clip, multi-crop test top-1; the primary model is the deployed one."""
    labels = np.array([c.label for c in dataset.test])
    strides = config.augment.strides()
    ecfg = dataclasses.replace(config.eval, crop_size=config.augment.crop_size)
    res = {"deployment_model": "Z", "test_top1_z": top1_accuracy(
        multi_clip_predict(z, dataset.test, dataset.mean, dataset.std, strides[0], ecfg), labels)}
    if a is not None:
        res["test_top1_a"] = top1_accuracy(
            multi_clip_predict(a, dataset.test, dataset.mean, dataset.std, strides[1], ecfg), labels)
    return res
