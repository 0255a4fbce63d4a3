"""``actnet`` command line: gen-data, train, eval, ablate, plot.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 failure while
running (numerical blow-up, I/O).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import keep_heap
from .archive import atomic_write_text
from .config import RunConfig, ValidationError, dump_config, load_config, set_value
from .data import SPLIT_FILES, build_dataset, load_dataset, save_dataset
from .evaluation import multi_clip_predict, top1_accuracy
from .trainer import METRICS_VERSION, MODES, TrainConfig, checkpoint_name, fit, load_checkpoint, read_metrics

log = logging.getLogger("actnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "ACTNET_OUT"
AUGMENT_ARMS = {
    "baseline": (False, False),
    "spatial": (True, False),
    "temporal": (False, True),
    "both": (True, True),
}


# --------------------------------------------------------------------------
# helpers


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if not root:
        raise ValidationError(f"--out not given and {OUT_ENV} is unset")
    return Path(root) / default_name


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> RunConfig:
    run = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        run = set_value(run, key.strip(), value.strip())
    if getattr(args, "mode", None):
        run = set_value(run, "train.mode", args.mode)
    if getattr(args, "seed", None) is not None:
        run = set_value(run, "train.seed", str(args.seed))
        run = set_value(run, "data.seed", str(args.seed)) if args.command == "gen-data" else run
    if getattr(args, "epochs", None) is not None:
        run = set_value(run, "train.epochs", str(args.epochs))
    run.validate()
    return run


def _require_dataset(data_dir) -> Path:
    if data_dir is None:
        raise ValidationError("--data is required")
    p = Path(data_dir)
    missing = [f for f in SPLIT_FILES.values() if not (p / f).is_file()]
    if missing:
        raise ValidationError(f"dataset directory {p} lacks {', '.join(missing)}")
    return p


def _check_dataset_matches(run: RunConfig, dataset) -> None:
    m = run.train.model
    d = dataset.config
    if (d.num_classes, d.spatial, d.channels) != (m.num_classes, m.spatial_size, m.channels):
        raise ValidationError(
            f"dataset ({d.num_classes} classes, {d.spatial}px, {d.channels}ch) does not match model config "
            f"({m.num_classes} classes, {m.spatial_size}px, {m.channels}ch)"
        )


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    run = _resolve(args)
    out = _out_dir(args, "data")
    dataset = build_dataset(run.data)
    hashes = save_dataset(dataset, out)
    dataset = load_dataset(out)
    manifest = {
        "tool": "actnet",
        "version": __version__,
        "command": "gen-data",
        "data_config": dataclasses.asdict(run.data),
        "counts": {"labeled": len(dataset.labeled), "unlabeled": len(dataset.unlabeled), "test": len(dataset.test)},
        "split_sha256": hashes,
        "dataset_hash": dataset.content_hash,
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"out": str(out), **manifest["counts"], "dataset_hash": dataset.content_hash}))
    return EXIT_OK


def _reference_loader(ref_dir):
    if ref_dir is None:
        return None
    ref_dir = Path(ref_dir)
    if not (ref_dir / "checkpoints").is_dir():
        raise ValidationError(f"reference run {ref_dir} has no checkpoints directory")

    def load(epoch: int):
        path = ref_dir / "checkpoints" / checkpoint_name(epoch)
        if not path.is_file():
            log.warning("no reference checkpoint for epoch %d at %s", epoch, path)
            return None
        return load_checkpoint(path)[1]["Z"]

    return load


def run_training(run: RunConfig, data_dir, out: Path, reference_dir=None, resume=False, quiet=False) -> dict:
    """Train one arm and write metrics, checkpoints and a manifest under ``out``."""
    keep_heap()
    dataset = load_dataset(data_dir)
    _check_dataset_matches(run, dataset)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.ini", dump_config(run))
    progress = None if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    res = fit(run.train, dataset, out, reference=_reference_loader(reference_dir), resume=resume, progress=progress)
    ckpts = sorted(str(p.relative_to(out)) for p in (out / "checkpoints").glob("*.ckpt"))
    manifest = {
        "tool": "actnet",
        "version": __version__,
        "command": "train",
        "mode": run.train.mode,
        "config": {"data": dataclasses.asdict(run.data), "train": run.train.to_dict()},
        "seeds": {"train": run.train.seed, "init": {tag: p.init_seed for tag, p in
                                                    (("Z", res.z_params), ("A", res.a_params)) if p is not None}},
        "param_sets": ["Z"] if res.a_params is None else ["Z", "A"],
        "deployment_model": "Z",
        "dataset_dir": str(Path(data_dir).resolve()),
        "dataset_hash": dataset.content_hash,
        "metrics_schema_version": METRICS_VERSION,
        "artifacts": {"metrics": "metrics.csv", "config": "config.ini", "final": "final.ckpt",
                      "final_eval": "final.json", "checkpoints": ckpts},
        "reference_run": None if reference_dir is None else str(reference_dir),
        "final": res.final,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(args) -> int:
    run = _resolve(args)
    data = _require_dataset(args.data)
    out = _out_dir(args, f"train-{run.train.mode}-seed{run.train.seed}")
    manifest = run_training(run, data, out, args.reference_run, args.resume)
    print(json.dumps({"out": str(out), **manifest["final"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _require_dataset(args.data)
    ckpt = Path(args.checkpoint) if args.checkpoint else (Path(args.run) / "final.ckpt" if args.run else None)
    if ckpt is None or not ckpt.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    meta, models, _ = load_checkpoint(ckpt)
    run = RunConfig()
    train = TrainConfig.from_dict(meta["train_config"])
    if args.clips is not None or args.crops is not None:
        train.eval = dataclasses.replace(
            train.eval,
            clips_per_video=args.clips if args.clips is not None else train.eval.clips_per_video,
            crops_per_clip=args.crops if args.crops is not None else train.eval.crops_per_clip,
        )
    run.train = train
    run.validate()
    dataset = load_dataset(data)
    labels = np.array([c.label for c in dataset.test])
    strides = train.augment.strides()
    ecfg = dataclasses.replace(train.eval, crop_size=train.augment.crop_size)
    result = {"checkpoint": str(ckpt), "dataset_hash": dataset.content_hash,
              "clips_per_video": ecfg.clips_per_video, "crops_per_clip": ecfg.crops_per_clip}
    for tag, stride in (("Z", strides[0]), ("A", strides[1])):
        if tag in models:
            probs = multi_clip_predict(models[tag], dataset.test, dataset.mean, dataset.std, stride, ecfg)
            result[f"test_top1_{tag.lower()}"] = top1_accuracy(probs, labels)
    if args.out:
        _write_json(Path(args.out) / "eval.json", result)
    print(json.dumps(result))
    return EXIT_OK


def parse_sweep(spec: str) -> tuple[str, list[tuple[str, dict[str, str]]]]:
    """``augmentation`` or ``section.key=v1,v2,...`` -> (key, [(arm name, overrides)])."""
    spec = spec.strip()
    if spec == "augmentation":
        arms = [(name, {"augment.spatial": str(s).lower(), "augment.temporal": str(t).lower()})
                for name, (s, t) in AUGMENT_ARMS.items()]
        return "augmentation", arms
    key, sep, values = spec.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or not vals:
        raise ValidationError(f"sweep must be 'augmentation' or section.key=v1,v2,..., got {spec!r}")
    return key.strip(), [(v, {key.strip(): v}) for v in vals]


def _arm_job(job):
    run, data, out, quiet = job
    manifest = run_training(run, data, out, quiet=quiet)
    return manifest


def cmd_ablate(args) -> int:
    base = _resolve(args)
    data = _require_dataset(args.data)
    key, arms = parse_sweep(args.sweep)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.train.seed]
    jobs, labels = [], []
    out = _out_dir(args, f"ablate-{key}")
    for arm, overrides in arms:
        run = base
        for k, v in overrides.items():
            run = set_value(run, k, v)  # unknown keys fail here, before any training
        for seed in seeds:
            r = set_value(run, "train.seed", str(seed))
            r.validate()
            jobs.append((r, data, out / "arms" / f"{arm}-seed{seed}", args.quiet))
            labels.append((arm, seed))
    if args.parallel_arms > 1:
        with ProcessPoolExecutor(args.parallel_arms) as pool:
            manifests = list(pool.map(_arm_job, jobs))
    else:
        manifests = [_arm_job(j) for j in jobs]

    runs_rows, by_arm = [], {}
    for (arm, seed), m in zip(labels, manifests):
        row = {"arm": arm, "key": key, "seed": seed, "test_top1_z": m["final"]["test_top1_z"],
               "test_top1_a": m["final"].get("test_top1_a", ""), "dataset_hash": m["dataset_hash"]}
        runs_rows.append(row)
        by_arm.setdefault(arm, []).append(row)
    table = []
    for arm, _ in arms:
        accs = [r["test_top1_z"] for r in by_arm[arm]]
        table.append({"arm": arm, "key": key, "seeds": len(accs),
                      "mean_top1_z": float(np.mean(accs)), "std_top1_z": float(np.std(accs)),
                      "per_seed_top1_z": " ".join(repr(a) for a in accs),
                      "dataset_hash": by_arm[arm][0]["dataset_hash"]})
    _write_csv(out / "ablation_runs.csv", runs_rows)
    _write_csv(out / "ablation.csv", table)
    for row in table:
        print(f"{row['arm']:>12s}  mean top-1 {100 * row['mean_top1_z']:.1f}  (+/- {100 * row['std_top1_z']:.1f}, "
              f"{row['seeds']} seeds)")
    return EXIT_OK


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _f(v: str) -> float:
    return float(v) if v != "" else math.nan


PLOTS = {
    "loss_curves": ("step", "step", ("ls_z", "ls_a", "lu_z", "lu_a", "l_ca", "total")),
    "mask_rate_curves": ("step", "step", ("mask_rate_za", "mask_rate_az")),
    "accuracy_curves": ("epoch", "epoch", ("test_top1_z", "test_top1_a")),
}
PROBE_SERIES = (("primary", "probe_acc_primary"), ("auxiliary", "probe_acc_auxiliary"),
                ("reference", "probe_acc_reference"))


def plot_tables(rows: list[dict[str, str]]) -> dict[str, list[dict]]:
    """Per-figure tables from metrics rows: loss, mask-rate, accuracy and the 3-series probe."""
    tables = {}
    for name, (kind, x, cols) in PLOTS.items():
        sel = [r for r in rows if r["kind"] == kind]
        tables[name] = [{x: int(r[x]), **{c: _f(r[c]) for c in cols}} for r in sel]
    probe = [r for r in rows if r["kind"] == "epoch" and r["probe_subset"] != ""]
    tables["probe_curves"] = [
        {"epoch": int(r["epoch"]) + 1, "subset_size": int(r["probe_subset"]),
         **{name: _f(r[col]) for name, col in PROBE_SERIES}}
        for r in probe
    ]
    return tables


def _svg(table: list[dict], x: str, series: list[str], title: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [r[x] for r in table]
    for s in series:
        ax.plot(xs, [r[s] for r in table], label=s, marker="o" if len(xs) < 30 else None)
    ax.set_xlabel(x)
    ax.set_title(title)
    ax.legend(fontsize="small")
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()


def cmd_plot(args) -> int:
    metrics_dir = Path(args.metrics)
    path = metrics_dir / "metrics.csv"
    if not metrics_dir.is_dir() or not path.is_file():
        raise ValidationError(f"no metrics.csv in {metrics_dir}")
    try:
        rows = read_metrics(path)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if not rows:
        raise ValidationError(f"{path} has no rows")
    out = Path(args.out) if args.out else metrics_dir / "plots"
    tables = plot_tables(rows)
    for name, table in tables.items():
        if not table:
            log.warning("no data for %s", name)
            continue
        _write_csv(out / f"{name}.csv", table)
        x = "epoch" if name in ("accuracy_curves", "probe_curves") else "step"
        series = [k for k in table[0] if k not in (x, "subset_size")]
        atomic_write_text(out / f"{name}.svg", _svg(table, x, series, name.replace("_", " ")))
    print(json.dumps({"out": str(out), "figures": [n for n, t in tables.items() if t]}))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actnet", description="Cross-architecture semi-supervised video classification")
    p.add_argument("--version", action="version", version=f"actnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        if data:
            sp.add_argument("--data", help="dataset directory written by gen-data")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g, data=False)

    t = sub.add_parser("train", help="train one run")
    common(t)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--reference-run", help="fixmatch-baseline run whose checkpoints feed the probe")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")

    e = sub.add_parser("eval", help="multi-clip, multi-crop test accuracy of a checkpoint")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--run", help="run directory (uses its final.ckpt)")
    e.add_argument("--out")
    e.add_argument("--clips", type=int)
    e.add_argument("--crops", type=int)

    a = sub.add_parser("ablate", help="run a sweep or the 4-arm augmentation ablation")
    common(a)
    a.add_argument("--mode", choices=MODES)
    a.add_argument("--epochs", type=int)
    a.add_argument("--sweep", required=True, help="'augmentation' or section.key=v1,v2,...")
    a.add_argument("--seeds", help="comma-separated training seeds (default: config seed)")
    a.add_argument("--parallel-arms", type=int, default=1)
    a.add_argument("--quiet", action="store_true")

    pl = sub.add_parser("plot", help="curve tables and SVG figures from a run's metrics")
    pl.add_argument("--metrics", required=True, help="run directory holding metrics.csv")
    pl.add_argument("--out")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"actnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"actnet: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
