import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frameattn import tensor as T
from frameattn.errors import ConfigError, DataError
from frameattn.losses import (
    LossConfig,
    MetricsAccumulator,
    combined_loss,
    cross_entropy,
    focal_loss,
    mean_f1,
)
from frameattn.tensor import Tensor, gradcheck


def brute_force_mean_f1(predictions, labels, classes):
    """Oracle: full confusion matrix, then per-class F1 from its entries."""
    cm = np.zeros((classes, classes), dtype=int)
    for p, t in zip(predictions, labels):
        cm[t, p] += 1
    total = 0.0
    for c in range(classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        total += 2 * tp / denom if denom else 0.0
    return total / classes


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = cross_entropy(logits, np.array([0, 1, 2]))
    assert abs(loss.item() - math.log(4)) < 1e-12
    assert abs(loss.item() - 1.386294) < 1e-6


def test_cross_entropy_confident_correct_goes_to_zero():
    losses = []
    for scale in (1.0, 5.0, 20.0):
        logits = np.zeros((1, 3))
        logits[0, 2] = scale
        losses.append(cross_entropy(Tensor(logits), np.array([2])).item())
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-8


def test_cross_entropy_two_class_derived():
    # softmax([0, ln 3]) = [0.25, 0.75]; -log(0.75)
    logits = Tensor(np.array([[0.0, math.log(3.0)]]))
    loss = cross_entropy(logits, np.array([1]))
    assert abs(loss.item() - (-math.log(0.75))) < 1e-12
    assert abs(loss.item() - 0.287682) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DataError, match="frame 1"):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 5]))


def test_focal_loss_zero_when_certain():
    logits = np.zeros((1, 2))
    logits[0, 0] = 60.0
    assert focal_loss(Tensor(logits), np.array([0])).item() < 1e-12


def test_focal_collapses_to_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(5):
        logits = rng.normal(size=(8, 5))
        labels = rng.integers(0, 5, size=8)
        fl = focal_loss(Tensor(logits), labels, beta=1.0, gamma=0.0).item()
        ce = cross_entropy(Tensor(logits), labels).item()
        assert abs(fl - ce) < 1e-12


def test_focal_loss_direct_arithmetic():
    # p_t = 0.5, beta 0.25, gamma 2 -> 0.25 * 0.25 * ln 2
    logits = Tensor(np.array([[0.0, 0.0]]))
    loss = focal_loss(Tensor(logits.data), np.array([0]), beta=0.25, gamma=2.0)
    expected = 0.25 * 0.25 * math.log(2.0)
    assert abs(loss.item() - expected) < 1e-12
    assert abs(loss.item() - 0.043322) < 1e-6


def test_combined_loss_endpoints():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    ce = cross_entropy(Tensor(logits), labels).item()
    fl = focal_loss(Tensor(logits), labels).item()
    at0 = combined_loss(Tensor(logits), labels, LossConfig(lam=0.0)).item()
    at1 = combined_loss(Tensor(logits), labels, LossConfig(lam=1.0)).item()
    assert at0 == ce
    assert at1 == fl


def test_combined_loss_affine_in_lambda():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    values = [
        combined_loss(Tensor(logits), labels, LossConfig(lam=lam)).item()
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0)
    ]
    lo, hi = min(values[0], values[-1]), max(values[0], values[-1])
    for v in values:
        assert lo - 1e-12 <= v <= hi + 1e-12
    # affine: midpoint equals average of the endpoints
    assert abs(values[2] - 0.5 * (values[0] + values[-1])) < 1e-12


def test_combined_loss_gradcheck():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, size=6)
    cfg = LossConfig(lam=0.3)
    logits = Tensor(rng.normal(size=(6, 4)))
    assert gradcheck(lambda t: combined_loss(t, labels, cfg), logits) < 1e-6


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lam=1.5)
    with pytest.raises(ConfigError):
        LossConfig(beta=0.0)
    with pytest.raises(ConfigError):
        LossConfig(gamma=-1.0)


def test_mean_f1_perfect_score():
    labels = np.array([0, 1, 2, 0, 1, 2])
    report = mean_f1(labels, labels, 3)
    assert report.mean_f1 == 1.0


def test_mean_f1_worked_example():
    report = mean_f1(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    np.testing.assert_allclose(report.per_class_f1, [2.0 / 3.0, 0.8])
    assert abs(report.mean_f1 - 0.733333) < 1e-6


def test_mean_f1_no_true_positives():
    report = mean_f1(np.zeros(4, dtype=int), np.ones(4, dtype=int), 2)
    assert report.mean_f1 == 0.0


def test_mean_f1_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        classes = int(rng.integers(2, 6))
        labels = rng.integers(0, classes, size=n)
        preds = rng.integers(0, classes, size=n)
        report = mean_f1(preds, labels, classes)
        assert abs(report.mean_f1 - brute_force_mean_f1(preds, labels, classes)) < 1e-12


@given(
    st.lists(st.integers(0, 4), min_size=1, max_size=40),
    st.integers(0, 1000),
)
@settings(max_examples=50, deadline=None)
def test_mean_f1_invariant_under_relabeling(labels, perm_seed):
    rng = np.random.default_rng(perm_seed)
    labels = np.array(labels)
    preds = rng.integers(0, 5, size=len(labels))
    perm = rng.permutation(5)
    base = mean_f1(preds, labels, 5).mean_f1
    relabeled = mean_f1(perm[preds], perm[labels], 5).mean_f1
    assert abs(base - relabeled) < 1e-12


def test_accumulator_counts_and_merge():
    labels = np.array([0, 0, 1, 1, 2])
    preds = np.array([0, 1, 1, 1, 0])
    a = MetricsAccumulator(3)
    a.update(preds[:2], labels[:2])
    b = MetricsAccumulator(3)
    b.update(preds[2:], labels[2:])
    a.merge(b)
    whole = MetricsAccumulator(3)
    whole.update(preds, labels)
    np.testing.assert_array_equal(a.tp, whole.tp)
    np.testing.assert_array_equal(a.fp, whole.fp)
    np.testing.assert_array_equal(a.fn, whole.fn)
    # every evaluated frame is either a TP or an FN of its true class
    assert a.tp.sum() + a.fn.sum() == len(labels)


def test_accumulator_rejects_out_of_range():
    acc = MetricsAccumulator(2)
    with pytest.raises(DataError):
        acc.update(np.array([0, 3]), np.array([0, 1]))
