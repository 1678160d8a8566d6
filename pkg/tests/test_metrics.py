import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from opticnet.metrics import (ConfusionMatrix, PenaltyMatrix, UndefinedClassError, accuracy, align_penalties,
                              default_oct2017_penalties, load_confusion, load_penalties, per_class_recall,
                              read_grid, report, sensitivity, specificity, weighted_error, write_grid)
from opticnet.tensor import ContractError

LABELS = ["Normal", "Drusen", "CNV", "DME"]


def fig3():
    c = np.diag([250, 249, 250, 249])
    c[1, 2] = 1      # Drusen predicted CNV
    c[3, 2] = 1      # DME predicted CNV
    return ConfusionMatrix(c, LABELS)


def expand(cm):
    """Per-sample (true, pred) lists behind a matrix."""
    t, p = [], []
    for i in range(cm.k):
        for j in range(cm.k):
            t += [i] * int(cm.counts[i, j])
            p += [j] * int(cm.counts[i, j])
    return np.array(t), np.array(p)


def loop_specificity(cm):
    t, p = expand(cm)
    rates = []
    for c in range(cm.k):
        neg = t != c
        rates.append(np.sum(neg & (p != c)) / np.sum(neg))
    return float(np.mean(rates))


square = st.integers(2, 5).flatmap(lambda k: arrays(np.int64, (k, k), elements=st.integers(1, 30)))


def test_diagonal_matrix_is_perfect():
    cm = ConfusionMatrix(np.diag([3, 4, 5]))
    assert accuracy(cm) == sensitivity(cm) == specificity(cm) == 1.0
    assert weighted_error(cm, PenaltyMatrix(np.ones((3, 3)) - np.eye(3))) == 0.0


def test_binary_direct_evaluation():
    cm = ConfusionMatrix([[9, 1], [0, 10]])
    assert sensitivity(cm) == pytest.approx((0.9 + 1.0) / 2)
    # class 0 negatives [0, 10] -> TNR 1; class 1 negatives [9, 1] -> TN 9, FP 1 -> 0.9
    assert specificity(cm) == pytest.approx((1.0 + 0.9) / 2)
    assert specificity(cm) == pytest.approx(loop_specificity(cm))


def test_fig3_golden():
    cm = fig3()
    assert cm.total == 1000
    assert accuracy(cm) == pytest.approx(0.998, abs=1e-12)
    assert sensitivity(cm) == pytest.approx(0.998, abs=1e-12)
    assert 100 * specificity(cm) == pytest.approx(99.93, abs=0.01)
    assert weighted_error(cm, default_oct2017_penalties()) == pytest.approx(0.20, abs=1e-12)


def test_single_cnv_as_normal_costs_four():
    c = np.diag([25, 25, 24, 25])
    c[2, 0] = 1
    assert weighted_error(ConfusionMatrix(c, LABELS), default_oct2017_penalties()) == pytest.approx(4.0)


def test_oct2017_penalty_matrix():
    w = default_oct2017_penalties()
    assert w.labels == LABELS
    assert w.weights.tolist() == [[0, 1, 1, 1], [1, 0, 1, 1], [4, 2, 0, 1], [4, 2, 1, 0]]
    assert w.weights[2, 0] == 4 and w.weights[0, 1] == 1


def test_contract_errors():
    with pytest.raises(ContractError):
        ConfusionMatrix(np.ones((2, 3)))
    with pytest.raises(ContractError):
        ConfusionMatrix([[5]])
    with pytest.raises(ContractError):
        PenaltyMatrix(np.ones((2, 2)))
    with pytest.raises(ContractError):
        weighted_error(ConfusionMatrix(np.eye(3, dtype=int)), PenaltyMatrix(np.zeros((2, 2))))
    with pytest.raises(UndefinedClassError):
        per_class_recall(ConfusionMatrix([[3, 0], [0, 0]]))


@given(square)
def test_metrics_in_unit_interval_and_accuracy_matches_expansion(counts):
    cm = ConfusionMatrix(counts)
    t, p = expand(cm)
    assert accuracy(cm) == pytest.approx(np.mean(t == p))
    assert specificity(cm) == pytest.approx(loop_specificity(cm))
    for v in (accuracy(cm), sensitivity(cm), specificity(cm)):
        assert 0 <= v <= 1


@given(square, st.randoms(use_true_random=False))
def test_permutation_invariance(counts, rnd):
    k = counts.shape[0]
    cm = ConfusionMatrix(counts, [f"c{i}" for i in range(k)])
    w = np.arange(k * k, dtype=float).reshape(k, k)
    np.fill_diagonal(w, 0)
    pen = PenaltyMatrix(w, cm.labels)
    order = list(range(k))
    rnd.shuffle(order)
    cp = cm.permuted(order)
    pp = align_penalties(pen, cp.labels)
    assert accuracy(cp) == pytest.approx(accuracy(cm))
    assert sensitivity(cp) == pytest.approx(sensitivity(cm))
    assert specificity(cp) == pytest.approx(specificity(cm))
    assert weighted_error(cp, pp) == pytest.approx(weighted_error(cm, pen))


@given(square)
def test_weighted_error_zero_iff_weighted_cells_empty(counts):
    k = counts.shape[0]
    w = np.zeros((k, k))
    w[0, 1] = 2.0
    e = weighted_error(ConfusionMatrix(counts), PenaltyMatrix(w))
    assert (e == 0) == (counts[0, 1] == 0)


def test_grid_roundtrip_and_alignment(tmp_path):
    p = tmp_path / "w.txt"
    w = default_oct2017_penalties()
    write_grid(p, w.labels, w.weights)
    assert load_penalties(p).weights.tolist() == w.weights.tolist()
    (tmp_path / "c.csv").write_text("cnv,dme,drusen,normal\n250,0,0,0\n1,249,0,0\n1,0,249,0\n0,0,0,250\n")
    cm = load_confusion(tmp_path / "c.csv")
    assert cm.labels == ["cnv", "dme", "drusen", "normal"]
    # lexicographic loader order, penalties reordered by name: both errors predicted CNV, weight 1 each
    assert report(cm, w)["weighted_error_pct"] == pytest.approx(0.20)


def test_read_grid_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("a b\n0 1\n")
    with pytest.raises(ContractError):
        read_grid(p)
    p.write_text("a b\nx 0 1\nb 1 0\n")
    with pytest.raises(ContractError):
        read_grid(p)
