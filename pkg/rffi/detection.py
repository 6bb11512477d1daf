"""
Бесключевая защита от contamination-атаки.

1. posterior_difference: M_diff = M_transfer - M_deep, нормировка на max|.|
2. train_extractor     : маленький CNN-эмбеддер, учится только на нормальных M_diff
3. fit_boundary        : one-class SVM (RBF) по эмбеддингам нормальных матриц
4. detect              : эмбеддинг + знак decision-функции

Эмбеддер собирается из тех же conv-блоков, что и классификатор.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.preprocessing import StandardScaler
from sklearn.svm import OneClassSVM

from rffi.classifier import ArchSpec, PosteriorMatrix, feature_stack, he_init, seeded
from rffi.errors import DataError, FitError, FormatError
from rffi.feature import FeatureImage, rasterize
from rffi.metrics import rate
from rffi.utils.codec import read_tensor_file, write_tensor_file

logger = logging.getLogger("rffi")

NORMAL = "normal"
ANOMALY = "anomaly"
MIN_NORMALS = 50
DETECTOR_FORMAT = "rffi-detector"


@dataclass(frozen=True, eq=False)
class DiffMatrix:
    """Нормированная разность апостериорных вероятностей, значения в [-1, 1]."""

    values: np.ndarray
    row_observations: Tuple[str, ...] = ()
    col_classes: Tuple[str, ...] = ()
    scenario_meta: Dict = field(default_factory=dict)
    label: Optional[str] = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"difference matrix must be 2-D, got shape {values.shape}")
        if values.size and np.abs(values).max() > 1.0:
            raise DataError("difference matrix values must lie in [-1, 1]")
        if self.label not in (None, NORMAL, ANOMALY):
            raise DataError(f"label must be {NORMAL!r} or {ANOMALY!r}, got {self.label!r}")
        object.__setattr__(self, "values", values)

    @property
    def scenario(self) -> str:
        return str(self.scenario_meta.get("scenario", ""))


def posterior_difference(
    m_transfer: PosteriorMatrix,
    m_deep: PosteriorMatrix,
    scenario_meta: Optional[dict] = None,
    label: Optional[str] = None,
) -> DiffMatrix:
    """
    M_transfer - M_deep, делённое на максимум модуля.

    Знак каждого элемента сохраняется; нулевая разность остаётся нулевой.
    """
    if m_transfer.probs.shape != m_deep.probs.shape:
        raise DataError(
            f"posterior shapes differ: {m_transfer.probs.shape} vs {m_deep.probs.shape}"
        )
    if m_transfer.row_observations != m_deep.row_observations:
        raise DataError("posterior matrices have different observation order")
    if m_transfer.col_classes != m_deep.col_classes:
        raise DataError("posterior matrices have different class order")

    diff = m_transfer.probs - m_deep.probs
    peak = float(np.abs(diff).max()) if diff.size else 0.0
    values = diff / peak if peak > 0 else np.zeros_like(diff)
    return DiffMatrix(
        values=values,
        row_observations=m_transfer.row_observations,
        col_classes=m_transfer.col_classes,
        scenario_meta=dict(scenario_meta or {}),
        label=label,
    )


def true_positive_margin(d: DiffMatrix, true_labels: Sequence[str]) -> Dict[str, Optional[float]]:
    """
    Для каждого класса c: среднее d[o, c] по наблюдениям с true = c.

    Класс без наблюдений даёт None (отсутствует), а не 0.
    """
    true_labels = list(true_labels)
    if len(true_labels) != d.values.shape[0]:
        raise DataError(f"{len(true_labels)} labels for {d.values.shape[0]} rows")
    labels = np.asarray(true_labels, dtype=object)
    margins: Dict[str, Optional[float]] = {}
    for c, cls in enumerate(d.col_classes):
        rows = labels == cls
        margins[cls] = float(d.values[rows, c].mean()) if rows.any() else None
    return margins


def rasterize_diff(d: DiffMatrix, size: int) -> FeatureImage:
    """O x C -> size x size, шкала фиксирована [-1, 1]."""
    return rasterize(d.values, size, depth=8, clip_range=(-1.0, 1.0), source="diff")


class Embedder(nn.Module):
    """
    3 conv-блока -> global average pool -> Linear(embedding_dim).

    head нужен только для вспомогательной задачи при обучении.
    """

    def __init__(
        self,
        input_size: int = 64,
        embedding_dim: int = 64,
        proxy_classes: int = 5,
        conv_filters: Tuple[int, ...] = (8, 16, 32),
    ):
        super().__init__()
        self.arch = ArchSpec(
            input_size=input_size,
            num_classes=proxy_classes,
            conv_filters=tuple(conv_filters),
            pool_after=(True, True, False),
            padding=1,
        )
        self.embedding_dim = embedding_dim
        self.features = feature_stack(self.arch)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Linear(self.arch.conv_filters[-1], embedding_dim)
        self.head = nn.Linear(embedding_dim, proxy_classes)

    def embedding(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(torch.flatten(self.pool(self.features(x)), 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(F.relu(self.embedding(x)))

    def config(self) -> dict:
        return {
            "input_size": self.arch.input_size,
            "embedding_dim": self.embedding_dim,
            "proxy_classes": self.arch.num_classes,
            "conv_filters": list(self.arch.conv_filters),
        }


def _stack(matrices: Sequence[DiffMatrix], size: int) -> torch.Tensor:
    images = np.stack([rasterize_diff(d, size).as_float() for d in matrices])
    return torch.from_numpy(images).unsqueeze(1)


def _proxy_labels(normals: Sequence[DiffMatrix], proxy_batches: int) -> List[int]:
    """Номер партии генерации из scenario_meta["batch"]; иначе i % proxy_batches."""
    batches = [d.scenario_meta.get("batch") for d in normals]
    if all(b is not None for b in batches) and len(set(batches)) > 1:
        index = {b: k for k, b in enumerate(sorted(set(batches), key=str))}
        return [index[b] for b in batches]
    return [i % proxy_batches for i in range(len(normals))]


def train_extractor(
    normals: Sequence[DiffMatrix],
    seed: int,
    matrix_size: int = 64,
    embedding_dim: int = 64,
    proxy_batches: int = 5,
    epochs: int = 10,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
) -> Embedder:
    """Обучение эмбеддера на нормальных матрицах (вспомогательная классификация партий)."""
    if len(normals) < MIN_NORMALS:
        raise DataError(f"need at least {MIN_NORMALS} normal matrices, got {len(normals)}")
    if any(d.label == ANOMALY for d in normals):
        raise DataError("extractor must be trained on normal matrices only")

    targets = _proxy_labels(normals, proxy_batches)
    x = _stack(normals, matrix_size)
    y = torch.tensor(targets, dtype=torch.long)

    with seeded(seed):
        net = Embedder(matrix_size, embedding_dim, max(targets) + 1)
        he_init(net)
    optimizer = torch.optim.Adam(net.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(seed)

    net.train()
    for epoch in range(1, epochs + 1):
        perm = torch.randperm(len(normals), generator=generator)
        total = 0.0
        for start in range(0, len(normals), batch_size):
            idx = perm[start : start + batch_size]
            if idx.numel() == 1:
                continue
            loss = F.cross_entropy(net(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * idx.numel()
        logger.debug(f"extractor epoch {epoch}: loss={total / len(normals):.5f}")
    net.eval()
    return net


def embed(extractor: Embedder, matrices: Sequence[DiffMatrix]) -> np.ndarray:
    """N x embedding_dim, float64."""
    if not matrices:
        return np.zeros((0, extractor.embedding_dim))
    extractor.eval()
    with torch.no_grad():
        out = extractor.embedding(_stack(matrices, extractor.arch.input_size))
    return out.double().numpy()


@dataclass(frozen=True, eq=False)
class RbfBoundary:
    """
    Обученная one-class SVM в явном виде.

    score(x) = sum_i a_i * exp(-gamma * |z - sv_i|^2) + intercept,
    z = (x - mean) / scale. score >= 0: внутри границы.
    """

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    intercept: float
    gamma: float
    mean: np.ndarray
    scale: np.ndarray

    def decision(self, embeddings: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(embeddings) - self.mean) / self.scale
        kernel = rbf_kernel(z, self.support_vectors, gamma=self.gamma)
        return kernel @ self.dual_coef + self.intercept


@dataclass(eq=False)
class OneClassDetector:
    boundary: RbfBoundary
    extractor: Optional[Embedder] = None
    nu: float = 0.1
    threshold: float = 0.0

    @property
    def matrix_size(self) -> int:
        return self.extractor.arch.input_size if self.extractor is not None else 0

    def score_embeddings(self, embeddings: np.ndarray) -> np.ndarray:
        return self.boundary.decision(embeddings) - self.threshold

    def scores(self, matrices: Sequence[DiffMatrix]) -> np.ndarray:
        if self.extractor is None:
            raise DataError("detector has no feature extractor")
        return self.score_embeddings(embed(self.extractor, matrices))


def fit_boundary(
    embeddings: np.ndarray,
    nu: float = 0.1,
    gamma: Optional[float] = None,
    extractor: Optional[Embedder] = None,
) -> OneClassDetector:
    """One-class SVM, RBF, gamma по умолчанию 1/dim на стандартизованных эмбеддингах."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise DataError(f"need at least 2 embeddings, got shape {embeddings.shape}")
    if not 0 < nu <= 1:
        raise DataError(f"nu must be in (0, 1], got {nu}")
    if np.all(embeddings == embeddings[0]):
        raise FitError("all embeddings are identical, no boundary to fit")

    gamma = 1.0 / embeddings.shape[1] if gamma is None else gamma
    scaler = StandardScaler().fit(embeddings)
    svm = OneClassSVM(kernel="rbf", gamma=gamma, nu=nu).fit(scaler.transform(embeddings))
    boundary = RbfBoundary(
        support_vectors=np.asarray(svm.support_vectors_, dtype=np.float64),
        dual_coef=np.asarray(svm.dual_coef_, dtype=np.float64).ravel(),
        intercept=float(np.ravel(svm.intercept_)[0]),
        gamma=float(gamma),
        mean=np.asarray(scaler.mean_, dtype=np.float64),
        scale=np.asarray(scaler.scale_, dtype=np.float64),
    )
    logger.info(
        f"one-class boundary: {boundary.support_vectors.shape[0]} support vectors "
        f"from {embeddings.shape[0]} normals (nu={nu}, gamma={gamma:.4g})"
    )
    return OneClassDetector(boundary=boundary, extractor=extractor, nu=nu)


def fit_detector(
    normals: Sequence[DiffMatrix],
    seed: int,
    nu: float = 0.1,
    matrix_size: int = 64,
    embedding_dim: int = 64,
    proxy_batches: int = 5,
    epochs: int = 10,
) -> OneClassDetector:
    """train_extractor + fit_boundary одним вызовом."""
    extractor = train_extractor(
        normals, seed, matrix_size, embedding_dim, proxy_batches=proxy_batches, epochs=epochs
    )
    return fit_boundary(embed(extractor, normals), nu=nu, extractor=extractor)


def detect(det: OneClassDetector, d: DiffMatrix) -> Tuple[str, float]:
    score = float(det.scores([d])[0])
    return (NORMAL if score >= 0 else ANOMALY), score


def detect_many(det: OneClassDetector, matrices: Sequence[DiffMatrix]) -> List[Tuple[str, float]]:
    return [(NORMAL if s >= 0 else ANOMALY, float(s)) for s in det.scores(matrices)]


def detection_rate(results: Sequence[Tuple[str, float]]) -> float:
    """Доля матриц, помеченных как anomaly."""
    return rate([flag == ANOMALY for flag, _ in results])


@dataclass(frozen=True)
class EmbeddingRow:
    embedding: Tuple[float, ...]
    label: str
    scenario: str
    score: float


def export_embeddings(matrices: Sequence[DiffMatrix], det: OneClassDetector) -> List[EmbeddingRow]:
    """Таблица (эмбеддинг, метка, сценарий, скор) в порядке входа: для внешней проекции."""
    if det.extractor is None:
        raise DataError("detector has no feature extractor")
    vectors = embed(det.extractor, matrices)
    scores = det.score_embeddings(vectors) if len(matrices) else np.zeros(0)
    return [
        EmbeddingRow(tuple(float(v) for v in vec), d.label or "", d.scenario, float(s))
        for vec, d, s in zip(vectors, matrices, scores)
    ]


def write_embeddings_csv(rows: Sequence[EmbeddingRow], path: Path) -> None:
    dim = len(rows[0].embedding) if rows else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "scenario", "score"] + [f"e{k}" for k in range(dim)])
        for row in rows:
            writer.writerow([row.label, row.scenario, repr(row.score)] + [repr(v) for v in row.embedding])


def read_embeddings_csv(path: Path) -> List[EmbeddingRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:3] != ["label", "scenario", "score"]:
            raise FormatError(f"{path}: not an embeddings table")
        return [
            EmbeddingRow(tuple(float(v) for v in rec[3:]), rec[0], rec[1], float(rec[2]))
            for rec in reader
        ]


def save_detector(det: OneClassDetector, path: Path) -> None:
    """Тот же формат, что у моделей: JSON-заголовок + float32 blob."""
    if det.extractor is None:
        raise DataError("only detectors with a feature extractor can be saved")
    b = det.boundary
    header = {
        "format": DETECTOR_FORMAT,
        "version": 1,
        "extractor": det.extractor.config(),
        "nu": det.nu,
        "threshold": det.threshold,
        "gamma": b.gamma,
        "intercept": b.intercept,
    }
    tensors = {f"extractor.{k}": v.detach().cpu().numpy() for k, v in det.extractor.state_dict().items()}
    tensors.update(
        {
            "boundary.support_vectors": b.support_vectors,
            "boundary.dual_coef": b.dual_coef,
            "boundary.mean": b.mean,
            "boundary.scale": b.scale,
        }
    )
    write_tensor_file(Path(path), header, tensors)


def load_detector(path: Path) -> OneClassDetector:
    """
    Обратно из файла. Векторы границы хранятся во float32, поэтому
    скоры совпадают с исходным детектором с точностью ~1e-6, не побитово.
    """
    tf = read_tensor_file(Path(path))
    header = tf.header
    if header.get("format") != DETECTOR_FORMAT:
        raise FormatError(f"{path}: not a detector file")
    try:
        cfg = header["extractor"]
        extractor = Embedder(
            input_size=int(cfg["input_size"]),
            embedding_dim=int(cfg["embedding_dim"]),
            proxy_classes=int(cfg["proxy_classes"]),
            conv_filters=tuple(int(v) for v in cfg["conv_filters"]),
        )
        boundary = RbfBoundary(
            support_vectors=tf.tensors["boundary.support_vectors"].astype(np.float64),
            dual_coef=tf.tensors["boundary.dual_coef"].astype(np.float64),
            intercept=float(header["intercept"]),
            gamma=float(header["gamma"]),
            mean=tf.tensors["boundary.mean"].astype(np.float64),
            scale=tf.tensors["boundary.scale"].astype(np.float64),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad detector file: {e}") from e

    expected = extractor.state_dict()
    state = {}
    for name, ref in expected.items():
        value = tf.tensors.get(f"extractor.{name}")
        if value is None or value.shape != tuple(ref.shape):
            raise FormatError(f"{path}: extractor tensor {name} missing or misshaped")
        state[name] = torch.from_numpy(value).to(ref.dtype)
    extractor.load_state_dict(state)
    extractor.eval()
    return OneClassDetector(
        boundary=boundary,
        extractor=extractor,
        nu=float(header.get("nu", 0.1)),
        threshold=float(header.get("threshold", 0.0)),
    )
