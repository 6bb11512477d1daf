import numpy as np
import pytest
from numpy.testing import assert_allclose

from rffi.classifier import PosteriorMatrix
from rffi.errors import MetricError
from rffi.metrics import (
    accuracy,
    auc,
    micro_average_roc,
    posterior_accuracy,
    rate,
    roc,
    target_roc,
)


def _mann_whitney(scores, labels) -> float:
    pos = scores[labels]
    neg = scores[~labels]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (pos.size * neg.size)


@pytest.mark.parametrize("seed", range(100))
def test_auc_equals_rank_statistic_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    labels = rng.random(n) < 0.4
    labels[:2] = [True, False]
    scores = rng.integers(0, 6, size=n).astype(float) + labels * rng.integers(0, 3, size=n)
    assert auc(roc(scores, labels)) == pytest.approx(_mann_whitney(scores, labels), abs=1e-12)


def test_roc_endpoints_and_threshold_order():
    curve = roc([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
    assert curve.points[0] == (0.0, 0.0)
    assert curve.points[-1] == (1.0, 1.0)
    assert np.isinf(curve.thresholds[0])
    assert np.all(np.diff(curve.thresholds[1:]) < 0)
    assert auc(curve) == pytest.approx(0.75)
    rows = curve.to_rows()
    assert set(rows[1]) == {"threshold", "fpr", "tpr"}


def test_perfect_and_inverted_separation():
    assert auc(roc([0.9, 0.8, 0.1, 0.2], [True, True, False, False])) == 1.0
    assert auc(roc([0.1, 0.2, 0.9, 0.8], [True, True, False, False])) == 0.0


@pytest.mark.parametrize(
    "scores, labels",
    [
        ([0.1, 0.2], [True, True]),
        ([0.1, 0.2], [False, False]),
        ([0.1, 0.2, 0.3], [True, False]),
        ([0.1, np.nan], [True, False]),
    ],
)
def test_roc_errors(scores, labels):
    with pytest.raises(MetricError):
        roc(scores, labels)


def test_micro_average_hand_example():
    post = PosteriorMatrix(np.array([[0.7, 0.3], [0.4, 0.6]]), ("o1", "o2"), ("a", "b"))
    assert auc(micro_average_roc(post, ["a", "a"])) == pytest.approx(0.75)


def test_micro_average_three_class_hand_case():
    post = PosteriorMatrix(
        np.array([
            [0.6, 0.3, 0.1],
            [0.2, 0.5, 0.3],
            [0.3, 0.3, 0.4],
            [0.3, 0.5, 0.2],
        ]),
        ("o1", "o2", "o3", "o4"),
        ("a", "b", "c"),
    )
    truth = ["a", "b", "c", "a"]
    # 12 пар (наблюдение, класс): 4 истинных, 8 ложных
    scores = np.array([0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.3, 0.3, 0.4, 0.3, 0.5, 0.2])
    labels = np.array([True, False, False, False, True, False, False, False, True, True, False, False])
    curve = micro_average_roc(post, truth)
    assert_allclose(np.array(curve.points), np.array(roc(scores, labels).points))
    # 8 + 7.5 + 7 + 5 из 32
    assert auc(curve) == pytest.approx(55 / 64, abs=1e-12)
    assert auc(curve) == pytest.approx(_mann_whitney(scores, labels), abs=1e-12)


def test_micro_average_rogue_rows_only_add_negatives():
    post = PosteriorMatrix(
        np.array([[0.9, 0.1], [0.2, 0.8], [0.95, 0.05]]), ("o1", "o2", "r1"), ("a", "b")
    )
    clean = auc(micro_average_roc(post, ["a", "b", "a"]))
    attacked = auc(micro_average_roc(post, ["a", "b", "rogue"]))
    assert clean == 1.0
    # 0.95 от чужого выше обоих истинных скоров 0.9 и 0.8
    assert attacked == pytest.approx(1 - 2 / (2 * 4))
    with pytest.raises(MetricError):
        micro_average_roc(post, ["a", "b"])


def test_target_roc():
    post = PosteriorMatrix(
        np.array([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]]), ("o1", "o2", "o3", "o4"), ("a", "b")
    )
    curve = target_roc(post, ["a", "b", "rogue", "b"], target="a")
    assert_allclose(auc(curve), 1.0)
    with pytest.raises(MetricError):
        target_roc(post, ["a", "b", "b", "b"], target="z")


def test_accuracy():
    assert accuracy(["a", "b", "b", "a"], ["a", "b", "a", "a"]) == 0.75
    with pytest.raises(MetricError):
        accuracy([], [])
    with pytest.raises(MetricError):
        accuracy(["a"], ["a", "b"])
    post = PosteriorMatrix(np.array([[0.6, 0.4], [0.4, 0.6]]), ("o1", "o2"), ("a", "b"))
    assert posterior_accuracy(post, ["a", "a"]) == 0.5


def test_rate():
    assert rate([True, False, True, True]) == 0.75
    with pytest.raises(MetricError):
        rate([])
