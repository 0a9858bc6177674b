import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sagate.errors import EmptyMatrix
from sagate.metrics import ConfusionMatrix, chance_iou, format_table, to_csv


def brute_force(pred, gt, k, ignore=255):
    counts = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != ignore:
            counts[g, p] += 1
    ious = []
    for c in range(k):
        tp = counts[c, c]
        union = counts[c, :].sum() + counts[:, c].sum() - tp
        if union:
            ious.append(tp / union)
    if not ious:
        return counts, None, None
    return counts, sum(ious) / len(ious), np.trace(counts) / counts.sum()


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 2]])
    cm = ConfusionMatrix(3).accumulate(gt, gt)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))
    assert cm.miou() == 1.0 and cm.pixel_acc() == 1.0


def test_all_ignored_leaves_matrix_unchanged():
    cm = ConfusionMatrix(3).accumulate(np.zeros(4, int), np.full(4, 255))
    assert cm.total == 0
    with pytest.raises(EmptyMatrix):
        cm.miou()


def test_hand_filled_fixture():
    cm = ConfusionMatrix(3).accumulate(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
    np.testing.assert_array_equal(cm.counts, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])


def test_binary_fixture():
    gt = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    pred = np.array([0, 0, 0, 1, 1, 1, 1, 0])
    cm = ConfusionMatrix(2).accumulate(pred, gt)
    np.testing.assert_array_equal(cm.counts, [[3, 1], [1, 3]])
    np.testing.assert_allclose(cm.iou_per_class(), [0.6, 0.6])
    assert cm.miou() == pytest.approx(0.6, abs=1e-12)
    assert cm.pixel_acc() == 0.75


def test_absent_class_is_excluded():
    cm = ConfusionMatrix(4).accumulate(np.array([0, 1, 1]), np.array([0, 1, 0]))
    assert np.isnan(cm.iou_per_class()[3])
    assert cm.miou() == pytest.approx((1 / 2 + 1 / 2) / 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.data())
def test_matches_brute_force(k, data):
    gt = data.draw(hnp.arrays(np.int64, (8, 8), elements=st.sampled_from(list(range(k)) + [255])))
    pred = data.draw(hnp.arrays(np.int64, (8, 8), elements=st.integers(0, k - 1)))
    cm = ConfusionMatrix(k).accumulate(pred, gt)
    counts, m, acc = brute_force(pred, gt, k)
    np.testing.assert_array_equal(cm.counts, counts)
    if counts.sum():
        assert abs(cm.miou() - m) <= 1e-12 and abs(cm.pixel_acc() - acc) <= 1e-12


def test_merge_equals_concatenation():
    rng = np.random.default_rng(0)
    a_p, a_g, b_p, b_g = (rng.integers(0, 3, 20) for _ in range(4))
    merged = ConfusionMatrix(3).accumulate(a_p, a_g) + ConfusionMatrix(3).accumulate(b_p, b_g)
    joint = ConfusionMatrix(3).accumulate(np.concatenate([a_p, b_p]), np.concatenate([a_g, b_g]))
    np.testing.assert_array_equal(merged.counts, joint.counts)


def test_out_of_range_labels():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate(np.array([0, 3]), np.array([0, 1]))


def test_chance_iou():
    # a guesser at the base rate p: intersection p^2, union 2p - p^2
    assert chance_iou(0.5) == pytest.approx(0.25 / 0.75)
    rng = np.random.default_rng(1)
    gt = rng.random(400_000) < 0.1
    guess = rng.random(400_000) < 0.1
    iou = (gt & guess).sum() / (gt | guess).sum()
    assert iou == pytest.approx(chance_iou(0.1), abs=5e-3)


def test_table_formats():
    text = format_table(["a", "bb"], [["x", 0.5]])
    assert text.splitlines()[0].split() == ["a", "bb"]
    assert "0.5000" in text
    assert to_csv(["a", "b"], [["x", 0.25]]) == "a,b\nx,0.250000\n"
