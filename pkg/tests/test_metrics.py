import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmss.metrics import confusion, dice, miou
from pmss.tensor import ShapeError


def test_perfect_prediction_is_one():
    labels = np.random.default_rng(0).integers(0, 4, size=(2, 5, 5))
    per_class, mean = miou(labels, labels, k=4)
    assert mean == 1.0
    assert all(v == 1.0 for v in per_class[~np.isnan(per_class)])


def test_disjoint_single_class_maps():
    gt = np.zeros((2, 2), dtype=np.int64)
    pred = np.ones((2, 2), dtype=np.int64)
    per_class, mean = miou(pred, gt, k=2)
    assert per_class[0] == 0.0 and per_class[1] == 0.0
    assert mean == 0.0


def test_worked_2x2_confusion_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    per_class, mean = miou(pred, gt, k=2)
    np.testing.assert_allclose(per_class, [0.5, 2 / 3])
    np.testing.assert_allclose(mean, 7 / 12)


def test_absent_classes_excluded_from_mean():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [1, 1]])
    per_class, mean = miou(pred, gt, k=5)
    assert np.isnan(per_class[2:]).all()
    assert mean == 1.0


def test_ignore_index_excluded_everywhere():
    gt = np.array([[0, 255], [1, 255]])
    pred = np.array([[0, 1], [1, 0]])
    cm = confusion(pred, gt, k=2, ignore_index=255)
    assert cm.sum() == 2
    _, mean = miou(pred, gt, k=2, ignore_index=255)
    assert mean == 1.0


def test_confusion_counts_are_exact_integers():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 3, size=(4, 6, 6))
    pred = rng.integers(0, 3, size=(4, 6, 6))
    cm = confusion(pred, gt, k=3)
    assert cm.dtype == np.int64
    assert cm.sum() == gt.size
    # row sums equal ground-truth pixel counts per class
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(gt.ravel(), minlength=3))
    np.testing.assert_array_equal(cm.sum(axis=0), np.bincount(pred.ravel(), minlength=3))


def test_shape_mismatch_rejects():
    with pytest.raises(ShapeError):
        miou(np.zeros((2, 2), dtype=int), np.zeros((3, 2), dtype=int), k=2)
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 1)


def test_out_of_range_labels_reject():
    with pytest.raises(ValueError):
        miou(np.array([[5]]), np.array([[0]]), k=2)


# -- dice ----------------------------------------------------------------------

def test_dice_perfect_match():
    gt = np.array([[1, 1], [0, 0]])
    assert dice(gt, gt, foreground_class=1) == 1.0


def test_dice_empty_prediction_nonempty_gt():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.zeros_like(gt)
    assert dice(pred, gt, foreground_class=1) == 0.0


def test_dice_counted_example():
    # TP=3, FP=1, FN=2 -> 6/9
    gt = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0])
    pred = np.array([1, 1, 1, 0, 0, 1, 0, 0, 0])
    np.testing.assert_allclose(dice(pred, gt, 1), 6 / 9)


def test_dice_empty_empty_is_one():
    z = np.zeros((3, 3), dtype=int)
    assert dice(z, z, foreground_class=1) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_miou_self_identity_property(seed):
    labels = np.random.default_rng(seed).integers(0, 5, size=(3, 4))
    _, mean = miou(labels, labels, k=5)
    assert mean == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_confusion_total_is_pixel_count(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=(5, 5))
    pred = rng.integers(0, 4, size=(5, 5))
    assert confusion(pred, gt, k=4).sum() == 25
