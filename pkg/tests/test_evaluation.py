import dataclasses
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actnet import evaluation as ev
from actnet import tensor as T
from actnet.data import DatasetConfig, build_dataset, probe_ground_truth
from actnet.evaluation import EvalConfig, ProbeRecord
from actnet.models import ModelConfig, forward, init_params
from actnet.trainer import TrainConfig, fit

MEAN, STD = (0.4, 0.4, 0.4), (0.2, 0.2, 0.2)


@pytest.fixture(scope="module")
def z_model():
    return init_params(ModelConfig(), "Z", 0)


@pytest.fixture(scope="module")
def a_model():
    return init_params(ModelConfig(), "A", 0)


def test_eval_config_validation():
    EvalConfig().validate()
    with pytest.raises(ValueError):
        EvalConfig(clips_per_video=0).validate()
    with pytest.raises(ValueError):
        EvalConfig(crops_per_clip=0).validate()


def test_clip_starts_uniform():
    assert ev.clip_starts(16, 7, 5) == [0, 2, 4, 7, 9]
    assert ev.clip_starts(16, 16, 3) == [0, 0, 0]
    assert ev.clip_starts(16, 4, 1) == [0]
    with pytest.raises(ValueError, match="too short"):
        ev.clip_starts(6, 7, 5)


def test_crop_boxes_positions():
    assert ev.crop_boxes(16, 16, 12, 3) == [(2, 0), (2, 2), (2, 4)]
    assert ev.crop_boxes(16, 20, 16, 3) == [(0, 0), (0, 2), (0, 4)]
    assert ev.crop_boxes(20, 16, 16, 3) == [(0, 0), (2, 0), (4, 0)]
    assert ev.crop_boxes(16, 16, 12, 1) == [(2, 2)]
    with pytest.raises(ValueError):
        ev.crop_boxes(8, 8, 12, 3)


def test_short_video_rejected(z_model):
    with pytest.raises(ValueError, match="too short"):
        ev.multi_clip_inference(z_model, np.zeros((5, 16, 16, 3), np.float32), MEAN, STD, stride=2)


@pytest.mark.parametrize("arch,stride", [("Z", 2), ("A", 1)])
def test_constant_video_matches_single_view(arch, stride, z_model, a_model):
    params = z_model if arch == "Z" else a_model
    video = np.full((16, 16, 16, 3), 0.3, dtype=np.float32)
    multi = ev.multi_clip_inference(params, video, MEAN, STD, stride)
    single = ev.single_view_predict(params, [video], MEAN, STD, stride)[0]
    np.testing.assert_allclose(multi, single, atol=1e-6)


def test_probabilities_on_simplex(z_model, a_model):
    rng = np.random.default_rng(0)
    videos = [rng.random((16, 16, 16, 3)).astype(np.float32) for _ in range(6)]
    for params, stride in ((z_model, 2), (a_model, 1)):
        probs = ev.multi_clip_predict(params, videos, MEAN, STD, stride)
        assert probs.shape == (6, 8)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert probs.min() >= 0.0


def test_inference_is_bit_deterministic(z_model):
    video = np.random.default_rng(1).random((16, 16, 16, 3)).astype(np.float32)
    a = ev.multi_clip_inference(z_model, video, MEAN, STD, 2)
    b = ev.multi_clip_inference(z_model, video, MEAN, STD, 2)
    assert a.tobytes() == b.tobytes()


def test_fifteen_hand_set_vectors_average(z_model, monkeypatch):
    rows = [[Fraction(i + 1, 10), Fraction(9 - i, 10), 0] if i < 8 else [0, Fraction(1, 2), Fraction(1, 2)]
            for i in range(15)]
    probs = np.array([[float(v) for v in r] for r in rows])
    monkeypatch.setattr(ev, "predict_views", lambda params, views, batch=256: probs[: len(views)])
    got = ev.multi_clip_inference(z_model, np.zeros((16, 16, 16, 3), np.float32), MEAN, STD, 2)
    want = [sum(r[k] for r in rows) / 15 for k in range(3)]
    # column sums 3.6, 4.4 + 3.5 and 3.5 over 15 views
    assert want == [Fraction(36, 150), Fraction(79, 150), Fraction(35, 150)]
    np.testing.assert_allclose(got, [float(w) for w in want], atol=1e-15)


def test_views_count_and_layout():
    video = np.random.default_rng(2).random((16, 16, 16, 3)).astype(np.float32)
    views = ev.video_views(video, 4, 2, EvalConfig(), MEAN, STD)
    assert len(views) == 15 and all(v.shape == (4, 16, 16, 3) for v in views)


@settings(max_examples=10)
@given(st.lists(st.lists(st.floats(-20, 20), min_size=4, max_size=4), min_size=1, max_size=6))
def test_softmax64_on_simplex(rows):
    p = ev.softmax64(np.array(rows))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- top-1


def test_top1_examples():
    eye = np.eye(4)
    assert ev.top1_accuracy(eye, [0, 1, 2, 3]) == 1.0
    assert ev.top1_accuracy(eye, [1, 2, 3, 0]) == 0.0
    assert ev.top1_accuracy(eye, [0, 1, 2, 0]) == 0.75
    assert ev.top1_accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0  # ties go to the lowest index


def test_top1_errors():
    with pytest.raises(ValueError, match="empty"):
        ev.top1_accuracy(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        ev.top1_accuracy(np.eye(3), [0, 1])


# ---------------------------------------------------------------- probe


def test_probe_record_has_three_series():
    rec = ProbeRecord(9, 4, 0.5, 1.0, 0.25)
    assert list(rec.series()) == ["primary", "auxiliary", "reference"]


def test_probe_oracle_perfect_auxiliary():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, size=40)
    pa = np.full((40, 5), 0.01)
    pa[np.arange(40), y] = 0.96
    pz = rng.dirichlet(np.ones(5), size=40)
    rec, subset = ev.probe_from_probs(9, pz, pa, None, y, 0.8)
    assert rec.subset_size == 40 and rec.acc_auxiliary == 1.0
    assert rec.acc_primary == float(np.mean(pz.argmax(1) == y))
    assert rec.acc_reference_single_model is None


def test_probe_threshold_above_one_is_empty():
    p = np.eye(3)
    rec, subset = ev.probe_from_probs(0, p, p, p, np.arange(3), 1.01)
    assert rec == ProbeRecord(0, 0, None, None, None) and subset.size == 0


def test_probe_frozen_subset_is_respected():
    y = np.array([0, 1, 2])
    p = np.eye(3)
    rec, subset = ev.probe_from_probs(0, p, np.full((3, 3), 1 / 3), None, y, 0.8, subset=np.array([1, 2]))
    assert rec.subset_size == 2 and rec.acc_primary == 1.0 and rec.acc_auxiliary == 0.0


@pytest.fixture(scope="module")
def mid_run():
    cfg = TrainConfig(epochs=2, probe_every=1, base_lr=0.01)
    ds = build_dataset(DatasetConfig(clips_per_class=6, test_per_class=1, label_ratio=0.34, seed=4))
    ref = fit(dataclasses.replace(cfg, mode="fixmatch-baseline", epochs=1), ds).z_params
    res = fit(cfg, ds, reference=lambda epoch: ref)
    return res, ref, ds


def test_probe_matches_brute_force_recomputation(mid_run):
    res, ref, ds = mid_run
    z, a = res.z_params, res.a_params
    hidden = probe_ground_truth(ds)

    def one(params, clip, frames, stride):
        # centre window shared by both models: the longer span is A's 8 frames
        view = ev.aug.normalize(ev.aug.temporal_sample(clip.frames, frames, stride, start=4), ds.mean, ds.std)
        with T.no_grad():
            lg, _ = forward(params, T.Tensor(view.transpose(3, 0, 1, 2)[None].astype(np.float32)))
        return ev.softmax64(lg.data)[0]

    pa = np.array([one(a, c, 8, 1) for c in ds.unlabeled])
    tau = float(np.median(pa.max(axis=1)))
    rec = ev.pseudo_label_probe(z, a, ref, ds.unlabeled, hidden, tau, ds.mean, ds.std)
    subset = [i for i in range(len(ds.unlabeled)) if pa[i].max() >= tau]
    assert rec.subset_size == len(subset) > 0

    def acc(params, frames, stride):
        hits = [int(np.argmax(one(params, ds.unlabeled[i], frames, stride)) == hidden[i]) for i in subset]
        return sum(hits) / len(hits)

    assert rec.acc_auxiliary == acc(a, 8, 1)
    assert rec.acc_primary == acc(z, 4, 2)
    assert rec.acc_reference_single_model == acc(ref, 4, 2)


def test_fit_emits_probe_rows_at_interval(mid_run):
    res, _, _ = mid_run
    rows = [r for r in res.metrics if r["kind"] == "epoch"]
    assert len(rows) == 2
    for r in rows:
        assert r["probe_subset"] != ""
        for col in ("probe_acc_primary", "probe_acc_auxiliary", "probe_acc_reference"):
            if int(r["probe_subset"]) > 0:
                assert 0.0 <= float(r[col]) <= 1.0
