"""
Метрики качества: accuracy, ROC/AUC, micro-averaging.

ROC строится по всем различным наблюдённым скорам (без сетки порогов),
поэтому AUC совпадает с ранговой статистикой Манна-Уитни.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc as sk_auc
from sklearn.metrics import roc_curve

from rffi.classifier import PosteriorMatrix
from rffi.errors import MetricError


@dataclass(frozen=True, eq=False)
class RocCurve:
    """
    Точки (FPR, TPR) по убывающим порогам.

    Первая точка: (0, 0) при пороге +inf, последняя: (1, 1).
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_rows(self) -> List[dict]:
        """Для CSV: threshold, fpr, tpr."""
        return [
            {"threshold": float(t), "fpr": float(f), "tpr": float(p)}
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr)
        ]


def roc(scores: Sequence[float], labels: Sequence[bool]) -> RocCurve:
    """ROC по скорам положительного класса; нужны оба класса в labels."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise MetricError("ROC needs at least one positive and one negative label")

    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    # старые версии sklearn кладут max+1 вместо +inf
    thresholds[0] = np.inf
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(curve: RocCurve) -> float:
    """Площадь под ROC методом трапеций по FPR."""
    return float(sk_auc(curve.fpr, curve.tpr))


def _flatten(posteriors: PosteriorMatrix, true_labels: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    true_labels = np.asarray(list(true_labels), dtype=object)
    if true_labels.size != posteriors.probs.shape[0]:
        raise MetricError(
            f"{true_labels.size} labels for {posteriors.probs.shape[0]} posterior rows"
        )
    classes = np.asarray(posteriors.col_classes, dtype=object)
    hits = true_labels[:, None] == classes[None, :]
    return posteriors.probs.ravel(), hits.ravel()


def micro_average_roc(posteriors: PosteriorMatrix, true_labels: Sequence[str]) -> RocCurve:
    """
    Micro-averaging: все пары (наблюдение, класс) как одна бинарная задача.

    score = probs[o, c], метка = (true_label(o) == c). Наблюдения
    чужих устройств (true вне классов) дают только отрицательные пары.
    """
    scores, hits = _flatten(posteriors, true_labels)
    return roc(scores, hits)


def target_roc(
    posteriors: PosteriorMatrix,
    true_labels: Sequence[str],
    target: str,
) -> RocCurve:
    """One-vs-all ROC для одного класса: скор probs[:, target], метка true == target."""
    if target not in posteriors.col_classes:
        raise MetricError(f"unknown target class {target!r}")
    hits = np.asarray([label == target for label in true_labels], dtype=bool)
    if hits.size != posteriors.probs.shape[0]:
        raise MetricError(f"{hits.size} labels for {posteriors.probs.shape[0]} posterior rows")
    return roc(posteriors.column(target), hits)


def accuracy(predictions: Sequence[str], true_labels: Sequence[str]) -> float:
    """Доля точных совпадений."""
    predictions = list(predictions)
    true_labels = list(true_labels)
    if not predictions:
        raise MetricError("accuracy of an empty prediction set is undefined")
    if len(predictions) != len(true_labels):
        raise MetricError(f"{len(predictions)} predictions but {len(true_labels)} labels")
    correct = sum(p == t for p, t in zip(predictions, true_labels))
    return correct / len(predictions)


def posterior_accuracy(posteriors: PosteriorMatrix, true_labels: Sequence[str]) -> float:
    """accuracy с предсказанием argmax по строке."""
    return accuracy(posteriors.predict(), true_labels)


def rate(flags: Sequence[bool]) -> float:
    """Доля True; для detection rate и false alarm."""
    flags = list(flags)
    if not flags:
        raise MetricError("rate of an empty set is undefined")
    return sum(bool(f) for f in flags) / len(flags)
