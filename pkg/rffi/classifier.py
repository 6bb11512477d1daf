"""
CNN-классификатор устройств.

Архитектура (по умолчанию, вход H x H, один канал):
    [conv3x3 -> BN -> ReLU -> maxpool2x2] x 2
    conv3x3 -> BN -> ReLU
    flatten -> FC(num_classes) -> softmax

Свёртки без паддинга: при H=256 и 20 классах это ровно 2 310 020 параметров.

Два режима обучения:
- scratch : с нуля, Adam lr=0.005
- transfer: свёрточная часть берётся из базовой модели, FC заново,
             lr=0.0001 для старых слоёв и x20 для новых
"""

import copy
import csv
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from rffi.errors import ConfigError, DataError, FormatError
from rffi.utils.codec import read_tensor_file, write_tensor_file

logger = logging.getLogger("rffi")

# BatchNorm: running = 0.9 * running + 0.1 * batch (в терминах torch momentum=0.1)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
HEAD_GAIN = 0.01
MODEL_FORMAT = "rffi-model"


@dataclass(frozen=True)
class ArchSpec:
    """Описание сети; по нему же восстанавливается модель из файла."""

    input_size: int = 64
    num_classes: int = 5
    conv_filters: Tuple[int, ...] = (8, 16, 32)
    pool_after: Tuple[bool, ...] = (True, True, False)
    kernel_size: int = 3
    padding: int = 0
    in_channels: int = 1

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.conv_filters) != len(self.pool_after):
            raise ConfigError("conv_filters and pool_after must have the same length")
        if self.feature_shape()[1] < 1:
            raise ConfigError(f"input size {self.input_size} collapses to nothing in {self.conv_filters}")

    def feature_shape(self) -> Tuple[int, int, int]:
        """(C, H, W) на выходе свёрточной части."""
        size = self.input_size
        channels = self.in_channels
        for filters, pool in zip(self.conv_filters, self.pool_after):
            size = size + 2 * self.padding - self.kernel_size + 1
            if pool:
                size //= 2
            channels = filters
        return channels, size, size

    @property
    def fc_in(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w

    def to_dict(self) -> dict:
        data = asdict(self)
        data["conv_filters"] = list(self.conv_filters)
        data["pool_after"] = list(self.pool_after)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        return cls(
            input_size=int(data["input_size"]),
            num_classes=int(data["num_classes"]),
            conv_filters=tuple(int(v) for v in data["conv_filters"]),
            pool_after=tuple(bool(v) for v in data["pool_after"]),
            kernel_size=int(data.get("kernel_size", 3)),
            padding=int(data.get("padding", 0)),
            in_channels=int(data.get("in_channels", 1)),
        )


@dataclass(frozen=True)
class TrainHyper:
    """Гиперпараметры обучения (Adam, мини-батчи, ранняя остановка)."""

    learning_rate: float = 0.005
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    new_layer_lr_factor: float = 20.0
    plateau_delta: float = 1e-4
    plateau_patience: int = 3

    def __post_init__(self) -> None:
        # lr = 0 допустим: нулевой шаг, полезно для проверок
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")

    @classmethod
    def scratch(cls, seed: int = 0, epochs: int = 30) -> "TrainHyper":
        return cls(learning_rate=0.005, epochs=epochs, seed=seed)

    @classmethod
    def transfer(cls, seed: int = 0, epochs: int = 15) -> "TrainHyper":
        return cls(learning_rate=0.0001, epochs=epochs, seed=seed)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float


def conv_block(in_ch: int, out_ch: int, kernel: int, padding: int, pool: bool) -> nn.Sequential:
    """Conv -> BN -> ReLU [-> MaxPool 2x2/2]; общий кирпич и для детектора."""
    layers: List[nn.Module] = [
        nn.Conv2d(in_ch, out_ch, kernel_size=kernel, padding=padding),
        nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
        nn.ReLU(),
    ]
    if pool:
        layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
    return nn.Sequential(*layers)


def feature_stack(arch: ArchSpec) -> nn.Sequential:
    blocks = []
    in_ch = arch.in_channels
    for filters, pool in zip(arch.conv_filters, arch.pool_after):
        blocks.append(conv_block(in_ch, filters, arch.kernel_size, arch.padding, pool))
        in_ch = filters
    return nn.Sequential(*blocks)


def he_init(module: nn.Module) -> None:
    """He (normal) для conv/FC, нулевые bias; BN: gamma=1, beta=0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def head_init(fc: nn.Linear) -> None:
    """Выходной слой: He x HEAD_GAIN, свежая модель даёт почти равномерные апостериорные."""
    nn.init.kaiming_normal_(fc.weight, nonlinearity="relu")
    with torch.no_grad():
        fc.weight.mul_(HEAD_GAIN)
    nn.init.zeros_(fc.bias)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Локальный seed torch, не трогая глобальное состояние вызывающего."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class RffiNet(nn.Module):
    """Свёрточная часть + FC. Возвращает логиты; softmax снаружи."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.features = feature_stack(arch)
        self.fc = nn.Linear(arch.fc_in, arch.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.features(x), 1))


@dataclass
class TrainedModel:
    """Веса + архитектура + метки классов + происхождение."""

    arch: ArchSpec
    network: RffiNet
    class_labels: Tuple[str, ...]
    provenance: str = "scratch"
    model_id: str = ""
    history: List[EpochStats] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.class_labels)) != len(self.class_labels):
            raise DataError(f"class labels must be distinct: {self.class_labels}")
        if len(self.class_labels) != self.arch.num_classes:
            raise DataError(
                f"{len(self.class_labels)} labels for a {self.arch.num_classes}-class network"
            )

    @property
    def label_index(self) -> Dict[str, int]:
        return {label: i for i, label in enumerate(self.class_labels)}


@dataclass(frozen=True, eq=False)
class PosteriorMatrix:
    """O x C, строки по наблюдениям, столбцы по классам."""

    probs: np.ndarray
    row_observations: Tuple[str, ...]
    col_classes: Tuple[str, ...]

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (len(self.row_observations), len(self.col_classes)):
            raise DataError(
                f"posterior shape {probs.shape} does not match "
                f"{len(self.row_observations)} rows x {len(self.col_classes)} classes"
            )
        if probs.size and (probs.min() < 0 or probs.max() > 1):
            raise DataError("posterior probabilities must lie in [0, 1]")
        if probs.size and not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise DataError("posterior rows must sum to 1")
        object.__setattr__(self, "probs", probs)

    def predict(self) -> List[str]:
        """argmax по строке -> метка класса."""
        return [self.col_classes[i] for i in np.argmax(self.probs, axis=1)]

    def column(self, label: str) -> np.ndarray:
        return self.probs[:, self.col_classes.index(label)]


def _as_arrays(dataset) -> Tuple[np.ndarray, List[str]]:
    """
    Приводит датасет к (N x H x H float32 в [0,1], метки).

    Понимает кортеж (images, labels) и объекты с as_arrays()
    (LabeledFeatureSet из attacks).
    """
    if hasattr(dataset, "as_arrays"):
        images, labels = dataset.as_arrays()
    else:
        images, labels = dataset
    images = _image_array(images)
    labels = list(labels)
    if len(labels) != images.shape[0]:
        raise DataError(f"{images.shape[0]} images but {len(labels)} labels")
    return images, labels


def _image_array(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float32, copy=False)
    elif len(images) == 0:
        arr = np.zeros((0, 0, 0), dtype=np.float32)
    else:
        arr = np.stack([
            img.as_float() if hasattr(img, "as_float") else np.asarray(img, dtype=np.float32)
            for img in images
        ]).astype(np.float32, copy=False)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def _check_input(arch: ArchSpec, images: np.ndarray) -> None:
    if images.ndim != 3 or images.shape[1:] != (arch.input_size, arch.input_size):
        raise DataError(
            f"images of shape {images.shape[1:]} do not match network input "
            f"{arch.input_size}x{arch.input_size}"
        )


def build(
    arch: ArchSpec,
    seed: int,
    class_labels: Optional[Sequence[str]] = None,
) -> TrainedModel:
    """Новая модель: He для свёрток, head_init для FC; детерминирована по seed."""
    labels = tuple(class_labels) if class_labels is not None else tuple(
        f"C{i}" for i in range(arch.num_classes)
    )
    with seeded(seed):
        net = RffiNet(arch)
        he_init(net.features)
        head_init(net.fc)
    return TrainedModel(arch, net, labels, provenance="untrained", model_id=f"model-{seed}")


def parameter_counts(model: TrainedModel) -> Dict[str, int]:
    """
    Обучаемые параметры по слоям: conv1, bn1, conv2, ..., fc.

    Для сверки с таблицей архитектуры.
    """
    counts: Dict[str, int] = {}
    for i, block in enumerate(model.network.features, start=1):
        conv, bn = block[0], block[1]
        counts[f"conv{i}"] = sum(p.numel() for p in conv.parameters())
        counts[f"bn{i}"] = sum(p.numel() for p in bn.parameters())
    counts["fc"] = sum(p.numel() for p in model.network.fc.parameters())
    return counts


def forward(
    model: TrainedModel,
    images,
    observation_ids: Optional[Sequence[str]] = None,
    batch_size: int = 256,
) -> PosteriorMatrix:
    """Инференс: BN на running-статистике, softmax в float64."""
    x = _image_array(images)
    _check_input(model.arch, x)
    net = model.network
    was_training = net.training
    net.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            batch = torch.from_numpy(x[start : start + batch_size]).unsqueeze(1)
            chunks.append(F.softmax(net(batch).double(), dim=1).numpy())
    net.train(was_training)

    probs = np.concatenate(chunks) if chunks else np.zeros((0, len(model.class_labels)))
    rows = tuple(observation_ids) if observation_ids is not None else tuple(
        str(i) for i in range(x.shape[0])
    )
    return PosteriorMatrix(probs=probs, row_observations=rows, col_classes=model.class_labels)


def epoch_batches(perm: torch.Tensor, batch_size: int) -> List[torch.Tensor]:
    """
    Мини-батчи эпохи в порядке perm.

    Хвост из одного элемента приклеивается к предыдущему батчу:
    BN в train-режиме не считает статистику по одному образцу.
    """
    batches = list(torch.split(perm, batch_size))
    if len(batches) > 1 and batches[-1].numel() == 1:
        batches[-2:] = [torch.cat(batches[-2:])]
    return batches


def _fit(
    model: TrainedModel,
    images: np.ndarray,
    labels: List[str],
    hyper: TrainHyper,
    optimizer: torch.optim.Optimizer,
) -> List[EpochStats]:
    """Общий цикл обучения: перемешивание с seed, CE-loss, ранняя остановка по плато."""
    index = model.label_index
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise DataError(f"labels {unknown} are not classes of the model")

    net = model.network
    x = torch.from_numpy(np.ascontiguousarray(images)).unsqueeze(1)
    y = torch.tensor([index[label] for label in labels], dtype=torch.long)
    n = x.shape[0]
    generator = torch.Generator().manual_seed(hyper.seed)

    history: List[EpochStats] = []
    stalled = 0
    for epoch in range(1, hyper.epochs + 1):
        net.train()
        total_loss, correct, seen = 0.0, 0, 0
        for idx in epoch_batches(torch.randperm(n, generator=generator), hyper.batch_size):
            logits = net(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * idx.numel()
            correct += int((logits.argmax(dim=1) == y[idx]).sum())
            seen += idx.numel()

        stats = EpochStats(epoch, total_loss / max(seen, 1), correct / max(seen, 1))
        history.append(stats)
        logger.info(f"epoch {epoch}: loss={stats.loss:.5f} acc={stats.train_accuracy:.4f}")

        if len(history) > 1 and history[-2].loss - stats.loss < hyper.plateau_delta:
            stalled += 1
        else:
            stalled = 0
        if stalled >= hyper.plateau_patience:
            logger.info(f"loss plateau for {stalled} epochs, stopping at epoch {epoch}")
            break
    return history


def _adam(params, hyper: TrainHyper) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=hyper.learning_rate, betas=(hyper.beta1, hyper.beta2), eps=hyper.eps
    )


def train_scratch(model: TrainedModel, dataset, hyper: TrainHyper) -> TrainedModel:
    """Обучение с нуля. Исходная модель не меняется: работаем с копией."""
    images, labels = _as_arrays(dataset)
    if not labels:
        raise DataError("cannot train on an empty dataset")
    _check_input(model.arch, images)

    trained = TrainedModel(
        arch=model.arch,
        network=copy.deepcopy(model.network),
        class_labels=model.class_labels,
        provenance="scratch",
        model_id=f"scratch-{hyper.seed}",
    )
    optimizer = _adam(trained.network.parameters(), hyper)
    trained.history = _fit(trained, images, labels, hyper, optimizer)
    return trained


def transfer_optimizer(network: RffiNet, hyper: TrainHyper) -> torch.optim.Adam:
    """Две группы: старые слои с lr, новый FC с lr * new_layer_lr_factor."""
    return _adam(
        [
            {"params": network.features.parameters(), "lr": hyper.learning_rate},
            {
                "params": network.fc.parameters(),
                "lr": hyper.learning_rate * hyper.new_layer_lr_factor,
            },
        ],
        hyper,
    )


def transfer(
    base: TrainedModel,
    dataset,
    hyper: TrainHyper,
    class_labels: Optional[Sequence[str]] = None,
) -> TrainedModel:
    """
    Transfer learning: свёртки и BN из base, FC: новый слой.

    Классы по умолчанию: классы базовой модели, если метки датасета
    в них укладываются, иначе отсортированные метки датасета.
    """
    images, labels = _as_arrays(dataset)
    if images.shape[0] and images.shape[1:] != (base.arch.input_size, base.arch.input_size):
        raise DataError(
            f"dataset images {images.shape[1:]} do not match base architecture "
            f"input {base.arch.input_size}"
        )
    if class_labels is None:
        class_labels = base.class_labels if set(labels) <= set(base.class_labels) else sorted(set(labels))
    arch = replace(base.arch, num_classes=len(class_labels))

    with seeded(hyper.seed):
        net = RffiNet(arch)
        head_init(net.fc)
    net.features.load_state_dict(base.network.features.state_dict())

    model = TrainedModel(
        arch=arch,
        network=net,
        class_labels=tuple(class_labels),
        provenance=f"transfer({base.model_id})",
        model_id=f"transfer-{hyper.seed}",
    )
    if hyper.epochs and labels:
        model.history = _fit(model, images, labels, hyper, transfer_optimizer(net, hyper))
    return model


def gradient_check(
    model: TrainedModel,
    images,
    labels: Sequence[str],
    step: float = 1e-5,
    max_params: int = 5000,
) -> float:
    """
    Сверка градиентов autograd с центральными конечными разностями.

    Считается в float64, BN в режиме обучения. Возвращает максимальную
    относительную ошибку |a - n| / max(|a|, |n|, 1e-6) по всем параметрам.
    """
    x_np = _image_array(images)
    _check_input(model.arch, x_np)
    net = copy.deepcopy(model.network).double().train()
    params = [p for p in net.parameters() if p.requires_grad]
    total = sum(p.numel() for p in params)
    if total > max_params:
        raise DataError(f"gradient check is limited to {max_params} parameters, model has {total}")

    index = model.label_index
    x = torch.from_numpy(x_np.astype(np.float64)).unsqueeze(1)
    y = torch.tensor([index[label] for label in labels], dtype=torch.long)

    def loss_value() -> torch.Tensor:
        return F.cross_entropy(net(x), y)

    net.zero_grad()
    loss_value().backward()
    analytic = [p.grad.detach().clone().view(-1) for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = loss_value().item()
                flat[i] = orig - step
                minus = loss_value().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                a = grad[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
    logger.debug(f"gradient check over {total} parameters: max relative error {worst:.3e}")
    return worst


def save(model: TrainedModel, path: Path) -> None:
    """JSON-заголовок (arch, метки, provenance) + float32 blob весов."""
    header = {
        "format": MODEL_FORMAT,
        "version": 1,
        "arch": model.arch.to_dict(),
        "class_labels": list(model.class_labels),
        "provenance": model.provenance,
        "model_id": model.model_id,
    }
    tensors = {k: v.detach().cpu().numpy() for k, v in model.network.state_dict().items()}
    write_tensor_file(Path(path), header, tensors)


def load(path: Path) -> TrainedModel:
    """Обратно из файла. Любая несостыковка: FormatError."""
    tf = read_tensor_file(Path(path))
    header = tf.header
    if header.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: not a model file")
    try:
        arch = ArchSpec.from_dict(header["arch"])
        labels = tuple(header["class_labels"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad model header: {e}") from e

    net = RffiNet(arch)
    expected = net.state_dict()
    if set(expected) != set(tf.tensors):
        raise FormatError(f"{path}: tensor names do not match architecture")
    state = {}
    for name, ref in expected.items():
        value = tf.tensors[name]
        if tuple(ref.shape) != value.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {value.shape}, architecture expects {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(value).to(ref.dtype)
    net.load_state_dict(state)

    try:
        return TrainedModel(
            arch=arch,
            network=net,
            class_labels=labels,
            provenance=header.get("provenance", "scratch"),
            model_id=header.get("model_id", ""),
        )
    except DataError as e:
        raise FormatError(f"{path}: {e}") from e


def write_history_csv(history: Sequence[EpochStats], path: Path) -> None:
    """Лог обучения: epoch, loss, train_accuracy."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "train_accuracy"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss), repr(row.train_accuracy)])
