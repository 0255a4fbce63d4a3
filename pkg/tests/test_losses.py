import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from actnet import tensor as T
from actnet.losses import (
    LossConfig,
    contrastive_loss,
    cross_entropy,
    pseudo_label_loss,
    pseudo_labels,
    supervised_loss,
    total_loss,
)
from helpers import leaf

finite = st.floats(-6, 6, allow_nan=False, width=64)


def logits_with_conf(conf, K=4):
    """A logit row whose softmax max equals ``conf`` (class 0 wins)."""
    rest = (1 - conf) / (K - 1)
    return [math.log(conf)] + [math.log(rest)] * (K - 1)


# ---------------------------------------------------------------- config


def test_loss_config_defaults_and_validation():
    c = LossConfig()
    assert (c.tau_conf, c.gamma, c.beta, c.tau_contrastive) == (0.8, 2.0, 2.0, 0.5)
    c.validate()
    for bad in (dict(tau_conf=0.0), dict(gamma=-1.0), dict(beta=-0.1), dict(tau_contrastive=0.0)):
        with pytest.raises(ValueError):
            LossConfig(**bad).validate()


# ---------------------------------------------------------------- supervised


def test_supervised_single_sample_equals_cross_entropy(f64):
    z = T.tensor([[0.3, -1.0, 2.0]])
    assert supervised_loss(z, [2]).item() == pytest.approx(cross_entropy(z, [2]).data[0], abs=1e-15)


def test_supervised_duplicate_invariance(f64):
    z = np.array([[0.3, -1.0, 2.0]])
    once = supervised_loss(T.Tensor(z), [1]).item()
    twice = supervised_loss(T.Tensor(np.concatenate([z, z])), [1, 1]).item()
    assert once == pytest.approx(twice, abs=1e-15)


def test_supervised_hand_built_mean(f64):
    z = T.tensor([[0.0, 0.0], [math.log(3.0), 0.0]])
    # sample 1: ln 2; sample 2: -log(3/4)
    want = (math.log(2) - math.log(0.75)) / 2
    assert supervised_loss(z, [0, 0]).item() == pytest.approx(want, abs=1e-12)


def test_supervised_empty_batch_rejected():
    with pytest.raises(ValueError):
        supervised_loss(T.tensor(np.zeros((0, 3))), [])


# ---------------------------------------------------------------- pseudo-label


def test_pseudo_label_below_threshold_is_zero(f64):
    teacher = T.tensor([logits_with_conf(0.79)] * 3)
    loss, pl = pseudo_label_loss(teacher, T.tensor(np.random.default_rng(0).standard_normal((3, 4))), 0.8)
    assert loss.item() == 0.0
    assert not pl.mask.any()


def test_pseudo_label_masked_mean_over_full_batch(f64):
    teacher = T.tensor([logits_with_conf(0.9), logits_with_conf(0.5)])
    student = T.tensor(np.random.default_rng(1).standard_normal((2, 4)))
    loss, pl = pseudo_label_loss(teacher, student, 0.8)
    c1 = cross_entropy(student, [0, 0]).data[0]
    assert loss.item() == pytest.approx(c1 / 2, abs=1e-12)
    np.testing.assert_array_equal(pl.mask, [True, False])
    assert pl.mask_rate == 0.5


def test_pseudo_label_ties_go_to_lowest_index():
    pl = pseudo_labels(np.array([[1.0, 3.0, 3.0, 0.0]]), 0.1)
    assert pl.labels[0] == 1


def test_pseudo_label_shape_mismatch():
    with pytest.raises(T.ShapeError):
        pseudo_label_loss(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 3))), 0.8)


def test_pseudo_label_loss_matches_oracle_100_instances(f64):
    rng = np.random.default_rng(0)
    for n in range(100):
        B, K = int(rng.integers(1, 8)), int(rng.integers(2, 7))
        teacher = rng.standard_normal((B, K)) * rng.uniform(0.5, 4)
        student = rng.standard_normal((B, K)) * 2
        tau = float(rng.uniform(0.2, 0.95))
        got, _ = pseudo_label_loss(T.Tensor(teacher), T.Tensor(student), tau)
        want = oracles.pseudo_label_loss(teacher.tolist(), student.tolist(), tau)
        assert abs(got.item() - want) <= 1e-10, n


def test_pseudo_label_stop_gradient():
    rng = np.random.default_rng(2)
    teacher, student = leaf(rng.standard_normal((4, 3)) * 3), leaf(rng.standard_normal((4, 3)))
    loss, pl = pseudo_label_loss(teacher, student, 0.3)
    assert pl.mask.any()
    loss.backward()
    assert teacher.grad is None
    assert np.any(student.grad != 0)


def test_tau_above_one_never_fires():
    rng = np.random.default_rng(3)
    loss, pl = pseudo_label_loss(T.tensor(rng.standard_normal((5, 4)) * 50), T.tensor(rng.standard_normal((5, 4))), 1.01)
    assert loss.item() == 0.0 and not pl.mask.any()


@given(arrays(np.float64, (5, 4), elements=finite), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_threshold_monotonicity(z, t1, t2):
    lo, hi = sorted((t1, t2))
    assert pseudo_labels(z, hi).mask.sum() <= pseudo_labels(z, lo).mask.sum()


@given(arrays(np.float64, (4, 5), elements=finite), st.floats(-50, 50))
def test_pseudo_labels_shift_invariant(z, c):
    a, b = pseudo_labels(z, 0.5), pseudo_labels(z + c, 0.5)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.mask, b.mask)


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite))
def test_masked_samples_contribute_zero(teacher, student):
    with T.precision(np.float64):
        full, pl = pseudo_label_loss(T.Tensor(teacher), T.Tensor(student), 0.6)
        kept = np.flatnonzero(pl.mask)
        perturbed = student.copy()
        perturbed[~pl.mask] += 100.0
        again, _ = pseudo_label_loss(T.Tensor(teacher), T.Tensor(perturbed), 0.6)
    assert full.item() == again.item()
    assert (full.item() == 0.0) == (kept.size == 0)


# ---------------------------------------------------------------- contrastive


def test_contrastive_single_pair_is_zero(f64):
    rng = np.random.default_rng(0)
    loss = contrastive_loss(T.Tensor(rng.standard_normal((1, 5))), T.Tensor(rng.standard_normal((1, 5))))
    assert loss.item() == 0.0


@pytest.mark.parametrize("symmetric", [True, False])
def test_contrastive_identical_embeddings_ln3(f64, symmetric):
    e = np.tile([[0.3, -0.2, 0.9]], (2, 1))
    loss = contrastive_loss(T.Tensor(e), T.Tensor(e.copy()), 0.5, symmetric)
    assert abs(loss.item() - math.log(3)) <= 1e-9


def test_contrastive_matches_brute_force_100_instances(f64):
    rng = np.random.default_rng(1)
    for n in range(100):
        B, D = int(rng.integers(1, 7)), int(rng.integers(2, 9))
        z, a = rng.standard_normal((B, D)), rng.standard_normal((B, D))
        tau = float(rng.uniform(0.1, 1.5))
        sym = bool(n % 2)
        got = contrastive_loss(T.Tensor(z), T.Tensor(a), tau, sym).item()
        assert abs(got - oracles.contrastive(z.tolist(), a.tolist(), tau, sym)) <= 1e-8, n


def test_contrastive_b4_brute_force(f64):
    rng = np.random.default_rng(4)
    z, a = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    got = contrastive_loss(T.Tensor(z), T.Tensor(a), 0.5, symmetric=False).item()
    assert abs(got - oracles.anchored(z.tolist(), a.tolist(), 0.5)) <= 1e-8


def test_contrastive_trains_both_sides():
    rng = np.random.default_rng(5)
    z, a = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
    contrastive_loss(z, a).backward()
    assert np.any(z.grad != 0) and np.any(a.grad != 0)


def test_contrastive_zero_embedding_is_an_error():
    with pytest.raises(ValueError):
        contrastive_loss(T.tensor(np.zeros((2, 3))), T.tensor(np.ones((2, 3))))


def test_contrastive_shape_mismatch():
    with pytest.raises(T.ShapeError):
        contrastive_loss(T.tensor(np.ones((2, 3))), T.tensor(np.ones((3, 3))))


@given(arrays(np.float64, (3, 4), elements=st.floats(0.1, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
       st.floats(0.01, 100))
def test_contrastive_scale_invariant(z, a, c):
    with T.precision(np.float64):
        if np.any(np.linalg.norm(a, axis=1) < 1e-3):
            return
        l1 = contrastive_loss(T.Tensor(z), T.Tensor(a)).item()
        l2 = contrastive_loss(T.Tensor(z * c), T.Tensor(a)).item()
    assert l1 == pytest.approx(l2, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- total


def test_total_loss_examples():
    cfg = LossConfig(gamma=2.0, beta=2.0)
    assert total_loss(1, 1, 1, 1, 1, cfg) == 8
    assert total_loss(0.5, 0.7, 0.2, 0.3, 0.4, cfg) == pytest.approx(3.0, abs=1e-12)
    zero = LossConfig(gamma=0.0, beta=0.0)
    assert total_loss(0.5, 0.7, 9.0, 9.0, 9.0, zero) == pytest.approx(1.2)


def test_total_loss_rejects_non_finite_with_name():
    with pytest.raises(FloatingPointError, match="lu_a"):
        total_loss(1, 1, 1, float("nan"), 1, LossConfig())
    with pytest.raises(FloatingPointError, match="l_ca"):
        total_loss(1, 1, 1, 1, T.tensor(float("inf")), LossConfig())


def test_total_loss_on_tensors_backpropagates():
    parts = [leaf(v) for v in (0.5, 0.7, 0.2, 0.3, 0.4)]
    out = total_loss(*parts, LossConfig(gamma=3.0, beta=0.5))
    out.backward()
    assert [p.grad.item() for p in parts] == [1.0, 1.0, 3.0, 3.0, 0.5]


@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.floats(0, 5), st.floats(0, 5), st.integers(0, 4),
       st.floats(-3, 3))
def test_total_loss_affine_in_each_component(parts, gamma, beta, idx, delta):
    cfg = LossConfig(gamma=gamma, beta=beta)
    coef = [1.0, 1.0, gamma, gamma, beta][idx]
    moved = list(parts)
    moved[idx] += delta
    assert total_loss(*moved, cfg) - total_loss(*parts, cfg) == pytest.approx(coef * delta, abs=1e-9)
