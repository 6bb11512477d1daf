"""
Модель угроз как преобразования датасетов.

- impersonation : на аутентификации чужие устройства называют себя target
- contamination : при enrollment выборка target подменяется образцами rogue

Обе операции чистые: на вход наборы, на выход новый набор.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from rffi.errors import ConfigError, DataError, FormatError
from rffi.feature import FeatureImage
from rffi.utils.codec import read_tensor_file, write_tensor_file

logger = logging.getLogger("rffi")

ATTACK_KINDS = ("impersonation", "contamination")
FEATURE_SET_FORMAT = "rffi-features"


@dataclass(frozen=True)
class AttackScenario:
    kind: str
    target: str
    rogue: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.target == self.rogue:
            raise ConfigError(f"target and rogue must differ, both are {self.target!r}")

    @property
    def scenario_id(self) -> str:
        return f"{self.kind}-{self.target}-{self.rogue}-s{self.seed}"

    def validate(self, legitimate: Iterable[str], rogues: Iterable[str]) -> None:
        """target среди легитимных, rogue среди чужих, множества не пересекаются."""
        legitimate, rogues = set(legitimate), set(rogues)
        if legitimate & rogues:
            raise ConfigError(f"labels {sorted(legitimate & rogues)} are both legitimate and rogue")
        if self.target not in legitimate:
            raise ConfigError(f"target {self.target!r} is not a legitimate device")
        if self.rogue not in rogues:
            raise ConfigError(f"rogue {self.rogue!r} is not a rogue device")

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "target": self.target, "rogue": self.rogue, "seed": self.seed},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "AttackScenario":
        try:
            data = json.loads(text)
            return cls(
                kind=data["kind"],
                target=str(data["target"]),
                rogue=str(data["rogue"]),
                seed=int(data.get("seed", 0)),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ConfigError(f"bad attack scenario: {e}") from e

    @classmethod
    def from_file(cls, path: Path) -> "AttackScenario":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read attack scenario {path}: {e}") from e


@dataclass(frozen=True)
class LabeledItem:
    """Образец: картинка, заявленная метка, истинная метка, откуда взят."""

    image: FeatureImage
    claimed: str
    true: str
    capture_seed: int = -1
    env: str = ""

    @property
    def injected(self) -> bool:
        return self.claimed != self.true


@dataclass(frozen=True)
class LabeledFeatureSet:
    items: Tuple[LabeledItem, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def claimed_labels(self) -> List[str]:
        return [item.claimed for item in self.items]

    @property
    def true_labels(self) -> List[str]:
        return [item.true for item in self.items]

    @property
    def capture_seeds(self) -> List[int]:
        return [item.capture_seed for item in self.items]

    def observation_ids(self) -> List[str]:
        return [f"{item.true}#{item.capture_seed}" for item in self.items]

    def as_arrays(self) -> Tuple[np.ndarray, List[str]]:
        """Картинки в [0,1] и заявленные метки: на них учится классификатор."""
        if not self.items:
            return np.zeros((0, 0, 0), dtype=np.float32), []
        images = np.stack([item.image.as_float() for item in self.items])
        return images, self.claimed_labels

    def by_true(self, label: str) -> "LabeledFeatureSet":
        return LabeledFeatureSet(tuple(i for i in self.items if i.true == label), self.split)

    def subset(self, labels: Iterable[str]) -> "LabeledFeatureSet":
        wanted = set(labels)
        return LabeledFeatureSet(tuple(i for i in self.items if i.true in wanted), self.split)

    def merge(self, other: "LabeledFeatureSet") -> "LabeledFeatureSet":
        return LabeledFeatureSet(self.items + other.items, self.split)


def impersonation_testset(
    legit_test: LabeledFeatureSet,
    rogue_pool: LabeledFeatureSet,
    sc: AttackScenario,
    rogue_only: bool = False,
) -> LabeledFeatureSet:
    """
    Тестовый набор атаки на аутентификацию.

    Настоящие образцы target + все образцы rogue-пула с claimed=target.
    rogue_only=True берёт из пула только устройство sc.rogue.
    Метка rogue не может стать заявленной: sc.validate по claimed-меткам.
    """
    if sc.kind != "impersonation":
        raise DataError(f"scenario {sc.scenario_id} is not an impersonation attack")
    if not legit_test.items:
        raise DataError("legitimate test set is empty")
    genuine = [item for item in legit_test.items if item.true == sc.target]
    if not genuine:
        raise DataError(f"no genuine test samples of target {sc.target!r}")
    sc.validate(legit_test.claimed_labels, [sc.rogue])

    pool = rogue_pool.by_true(sc.rogue).items if rogue_only else rogue_pool.items
    forged = [replace(item, claimed=sc.target) for item in pool]
    logger.debug(f"impersonation of {sc.target}: {len(genuine)} genuine + {len(forged)} forged")
    return LabeledFeatureSet(tuple(genuine + forged), split="test")


def contaminate_enrollment(
    train: LabeledFeatureSet,
    rogue_pool: LabeledFeatureSet,
    sc: AttackScenario,
) -> LabeledFeatureSet:
    """
    Атака на enrollment: все образцы target заменяются тем же числом
    образцов из rogue_pool (выбор без повторов по sc.seed), claimed=target.
    Остальные устройства и порядок элементов не трогаются.
    """
    if sc.kind != "contamination":
        raise DataError(f"scenario {sc.scenario_id} is not a contamination attack")
    sc.validate(train.claimed_labels, [sc.rogue])
    positions = [i for i, item in enumerate(train.items) if item.claimed == sc.target]
    if len(rogue_pool) < len(positions):
        raise DataError(
            f"rogue pool has {len(rogue_pool)} samples, "
            f"{len(positions)} needed to replace target {sc.target!r}"
        )

    rng = np.random.default_rng(sc.seed)
    picked = rng.choice(len(rogue_pool), size=len(positions), replace=False)
    items = list(train.items)
    for pos, idx in zip(positions, picked):
        items[pos] = replace(rogue_pool.items[int(idx)], claimed=sc.target)
    logger.debug(f"contaminated {len(positions)} enrollment samples of {sc.target} with {sc.rogue}")
    return LabeledFeatureSet(tuple(items), split=train.split)


def save_feature_set(fs: LabeledFeatureSet, path: Path, extra: Optional[dict] = None) -> None:
    """Картинки одним тензором N x H x H + манифест элементов в заголовке."""
    depths = {item.image.depth for item in fs.items}
    sources = {item.image.source for item in fs.items}
    if len(depths) > 1 or len(sources) > 1:
        raise DataError("feature set mixes image depths or sources")
    header = {
        "format": FEATURE_SET_FORMAT,
        "split": fs.split,
        "depth": depths.pop() if depths else 8,
        "source": sources.pop() if sources else "quotient",
        "items": [
            {"claimed": i.claimed, "true": i.true, "capture_seed": i.capture_seed, "env": i.env}
            for i in fs.items
        ],
        "extra": extra or {},
    }
    pixels = np.stack([i.image.pixels for i in fs.items]) if fs.items else np.zeros((0, 0, 0))
    write_tensor_file(Path(path), header, {"pixels": pixels})


def load_feature_set(path: Path) -> LabeledFeatureSet:
    tf = read_tensor_file(Path(path))
    header = tf.header
    if header.get("format") != FEATURE_SET_FORMAT or "pixels" not in tf.tensors:
        raise FormatError(f"{path}: not a feature set file")
    pixels = tf.tensors["pixels"]
    meta = header.get("items", [])
    if pixels.shape[0] != len(meta):
        raise FormatError(f"{path}: {pixels.shape[0]} images but {len(meta)} manifest entries")
    depth = int(header.get("depth", 8))
    dtype = np.uint8 if depth <= 8 else np.uint16
    items = tuple(
        LabeledItem(
            image=FeatureImage(pixels[k].astype(dtype), depth=depth, source=header.get("source", "quotient")),
            claimed=m["claimed"],
            true=m["true"],
            capture_seed=int(m.get("capture_seed", -1)),
            env=m.get("env", ""),
        )
        for k, m in enumerate(meta)
    )
    return LabeledFeatureSet(items, split=header.get("split", "train"))
