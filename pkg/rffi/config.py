"""
Конфигурация эксперимента.

Все настройки описаны как dataclasses, грузятся из YAML.
Секции lora/stft: это сами LoRaConfig/StftConfig из signal_sim/feature.
Формат см. в config.example.yaml
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from rffi.errors import ConfigError
from rffi.feature import StftConfig
from rffi.signal_sim import EnvironmentPreset, LoRaConfig, load_environment_presets

FEATURE_KINDS = ("quotient", "spectrogram")
TRAIN_MODES = ("scratch", "transfer")


@dataclass
class PopulationConfig:
    """Сколько устройств и как их звать."""

    legit: int = 5
    rogue: int = 2
    legit_prefix: str = "L"
    rogue_prefix: str = "R"
    max_perturbation: float = 0.1  # разброс коэффициентов Saleh, доля от номинала


@dataclass
class FeatureSection:
    image_size: int = 64
    depth: int = 8
    theta: float = 0.05  # порог фильтра по корреляции
    epsilon: float = 1e-6  # защита деления в quotient
    crop_to_band: bool = True
    clip_percentiles: Tuple[float, float] = (1.0, 99.0)
    calibration_per_device: int = 10  # сколько пар на устройство идёт в расчёт [p1, p99]
    rho_ref: Optional[float] = None  # None: измерить в chamber


@dataclass
class TrainingSection:
    conv_filters: Tuple[int, ...] = (8, 16, 32)
    pool_after: Tuple[bool, ...] = (True, True, False)
    padding: int = 0
    batch_size: int = 32
    scratch_lr: float = 0.005
    transfer_lr: float = 0.0001
    new_layer_lr_factor: float = 20.0
    scratch_epochs: int = 30
    transfer_epochs: int = 15
    base_samples_per_device: int = 100  # chamber-датасет для базовой модели


@dataclass
class SamplesSection:
    train_sweep: List[int] = field(default_factory=lambda: [50, 100, 200])
    test_per_device: int = 50
    attack_train: int = 100  # обучающих пар на устройство в сценариях атак
    rogue_test_per_device: int = 50
    base_env: str = "chamber"
    deployment_env: str = "indoor"
    max_attempts_factor: int = 3  # redraw отбракованных пар, не больше factor * count


@dataclass
class AttackSection:
    targets: List[str] = field(default_factory=list)  # пусто: все легитимные
    rogue_only: bool = False
    contamination_draws: int = 10


@dataclass
class DetectionSection:
    feature: str = "quotient"
    nu: float = 0.1
    matrix_size: int = 64
    embedding_dim: int = 64
    normal_matrices: int = 60
    test_matrices: int = 20  # столько же нормальных и аномальных
    pool_per_device: int = 300
    proxy_batches: int = 5
    extractor_epochs: int = 10
    classifier_epochs: int = 10  # эпохи классификаторов при генерации M_diff
    sample_sweep: List[int] = field(default_factory=lambda: [50, 100, 200])


@dataclass
class LimitsConfig:
    """Лимиты на параллелизм."""

    workers: int = 1  # потоки для синтеза пар


@dataclass
class ExperimentConfig:
    """
    Корневой конфиг эксперимента.

    Можно создать через from_yaml() или default() для разработки.
    """

    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    features: List[str] = field(default_factory=lambda: list(FEATURE_KINDS))
    modes: List[str] = field(default_factory=lambda: list(TRAIN_MODES))
    population: PopulationConfig = field(default_factory=PopulationConfig)
    lora: LoRaConfig = field(default_factory=lambda: LoRaConfig(spreading_factor=7, bandwidth=125e3, preamble_symbols=8))
    stft: StftConfig = field(default_factory=lambda: StftConfig(window_length=256, hop=128))
    feature: FeatureSection = field(default_factory=FeatureSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    samples: SamplesSection = field(default_factory=SamplesSection)
    attack: AttackSection = field(default_factory=AttackSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    limits: LimitsConfig = field(default_factory=LimitsConfig)
    environments: Dict[str, EnvironmentPreset] = field(default_factory=load_environment_presets)
    log_level: str = "info"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Проверки, которые нельзя выразить дефолтами. Всё: ConfigError."""
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.population.legit < 2:
            raise ConfigError("classification needs at least 2 legitimate devices")
        if self.population.rogue < 0:
            raise ConfigError("rogue population cannot be negative")
        if self.population.legit_prefix == self.population.rogue_prefix:
            raise ConfigError("legitimate and rogue label prefixes must differ")
        for kind in self.features:
            if kind not in FEATURE_KINDS:
                raise ConfigError(f"unknown feature {kind!r}, expected one of {FEATURE_KINDS}")
        for mode in self.modes:
            if mode not in TRAIN_MODES:
                raise ConfigError(f"unknown classifier mode {mode!r}, expected one of {TRAIN_MODES}")
        if self.detection.feature not in FEATURE_KINDS:
            raise ConfigError(f"unknown detection feature {self.detection.feature!r}")
        for env in (self.samples.base_env, self.samples.deployment_env, "chamber"):
            if env not in self.environments:
                raise ConfigError(f"environment {env!r} is not defined")
        counts = list(self.samples.train_sweep) + list(self.detection.sample_sweep) + [
            self.samples.test_per_device,
            self.samples.attack_train,
            self.training.base_samples_per_device,
        ]
        if any(int(n) < 1 for n in counts):
            raise ConfigError("sample counts must be positive")
        if self.samples.max_attempts_factor < 1:
            raise ConfigError("max_attempts_factor must be at least 1")
        if not 0 < self.detection.nu <= 1:
            raise ConfigError(f"detection nu must be in (0, 1], got {self.detection.nu}")
        if self.detection.pool_per_device < max(self.detection.sample_sweep):
            raise ConfigError("detection pool_per_device must cover the largest sample count")
        if self.feature.calibration_per_device < 1:
            raise ConfigError("calibration_per_device must be positive")
        lo, hi = self.feature.clip_percentiles
        if not 0 <= lo < hi <= 100:
            raise ConfigError(f"bad clip percentiles {self.feature.clip_percentiles}")
        if self.limits.workers < 1:
            raise ConfigError("workers must be at least 1")
        legit = {f"{self.population.legit_prefix}{i + 1:02d}" for i in range(self.population.legit)}
        for target in self.attack.targets:
            if target not in legit:
                raise ConfigError(f"attack target {target!r} is not a legitimate device")

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        """
        Парсит YAML-конфиг.

        Формат см. в config.example.yaml
        """
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls._from_dict(data)
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {e}") from e

    @classmethod
    def _from_dict(cls, data: dict) -> "ExperimentConfig":
        defaults = cls.default()

        pop = data.get("population", {})
        population = PopulationConfig(
            legit=int(pop.get("legit", 5)),
            rogue=int(pop.get("rogue", 2)),
            legit_prefix=str(pop.get("legit_prefix", "L")),
            rogue_prefix=str(pop.get("rogue_prefix", "R")),
            max_perturbation=float(pop.get("max_perturbation", 0.1)),
        )

        lora_data = data.get("lora", {})
        lora = LoRaConfig(
            spreading_factor=int(lora_data.get("spreading_factor", defaults.lora.spreading_factor)),
            bandwidth=float(lora_data.get("bandwidth", defaults.lora.bandwidth)),
            sample_rate=float(lora_data.get("sample_rate", defaults.lora.sample_rate)),
            preamble_symbols=int(lora_data.get("preamble_symbols", defaults.lora.preamble_symbols)),
            carrier_offset=float(lora_data.get("carrier_offset", 0.0)),
        )

        stft_data = data.get("stft", {})
        stft = StftConfig(
            window_length=int(stft_data.get("window_length", defaults.stft.window_length)),
            hop=int(stft_data.get("hop", defaults.stft.hop)),
            window=str(stft_data.get("window", "hamming")),
        )

        feat = data.get("feature", {})
        rho_ref = feat.get("rho_ref")
        feature = FeatureSection(
            image_size=int(feat.get("image_size", 64)),
            depth=int(feat.get("depth", 8)),
            theta=float(feat.get("theta", 0.05)),
            epsilon=float(feat.get("epsilon", 1e-6)),
            crop_to_band=bool(feat.get("crop_to_band", True)),
            clip_percentiles=tuple(float(v) for v in feat.get("clip_percentiles", (1.0, 99.0))),
            calibration_per_device=int(feat.get("calibration_per_device", 10)),
            rho_ref=None if rho_ref is None else float(rho_ref),
        )

        tr = data.get("training", {})
        training = TrainingSection(
            conv_filters=tuple(int(v) for v in tr.get("conv_filters", (8, 16, 32))),
            pool_after=tuple(bool(v) for v in tr.get("pool_after", (True, True, False))),
            padding=int(tr.get("padding", 0)),
            batch_size=int(tr.get("batch_size", 32)),
            scratch_lr=float(tr.get("scratch_lr", 0.005)),
            transfer_lr=float(tr.get("transfer_lr", 0.0001)),
            new_layer_lr_factor=float(tr.get("new_layer_lr_factor", 20.0)),
            scratch_epochs=int(tr.get("scratch_epochs", 30)),
            transfer_epochs=int(tr.get("transfer_epochs", 15)),
            base_samples_per_device=int(tr.get("base_samples_per_device", 100)),
        )

        sm = data.get("samples", {})
        samples = SamplesSection(
            train_sweep=[int(v) for v in sm.get("train_sweep", [50, 100, 200])],
            test_per_device=int(sm.get("test_per_device", 50)),
            attack_train=int(sm.get("attack_train", 100)),
            rogue_test_per_device=int(sm.get("rogue_test_per_device", 50)),
            base_env=str(sm.get("base_env", "chamber")),
            deployment_env=str(sm.get("deployment_env", "indoor")),
            max_attempts_factor=int(sm.get("max_attempts_factor", 3)),
        )

        at = data.get("attack", {})
        attack = AttackSection(
            targets=[str(t) for t in at.get("targets", [])],
            rogue_only=bool(at.get("rogue_only", False)),
            contamination_draws=int(at.get("contamination_draws", 10)),
        )

        det = data.get("detection", {})
        detection = DetectionSection(
            feature=str(det.get("feature", "quotient")),
            nu=float(det.get("nu", 0.1)),
            matrix_size=int(det.get("matrix_size", 64)),
            embedding_dim=int(det.get("embedding_dim", 64)),
            normal_matrices=int(det.get("normal_matrices", 60)),
            test_matrices=int(det.get("test_matrices", 20)),
            pool_per_device=int(det.get("pool_per_device", 300)),
            proxy_batches=int(det.get("proxy_batches", 5)),
            extractor_epochs=int(det.get("extractor_epochs", 10)),
            classifier_epochs=int(det.get("classifier_epochs", 10)),
            sample_sweep=[int(v) for v in det.get("sample_sweep", [50, 100, 200])],
        )

        limits = LimitsConfig(workers=int(data.get("limits", {}).get("workers", 1)))

        # environments: поверх пресетов по умолчанию, поле за полем
        environments = load_environment_presets(data.get("presets_file"))
        for name, override in (data.get("environments") or {}).items():
            base = environments[name].to_dict() if name in environments else {}
            base.update(override or {})
            environments[name] = EnvironmentPreset.from_dict(name, base)

        seeds = data.get("seeds", [data.get("seed", 0)])
        return cls(
            seeds=[int(s) for s in seeds],
            output_dir=str(data.get("output_dir", "out")),
            features=[str(f) for f in data.get("features", FEATURE_KINDS)],
            modes=[str(m) for m in data.get("modes", TRAIN_MODES)],
            population=population,
            lora=lora,
            stft=stft,
            feature=feature,
            training=training,
            samples=samples,
            attack=attack,
            detection=detection,
            limits=limits,
            environments=environments,
            log_level=data.get("logging", {}).get("level", "info"),
        )

    @classmethod
    def default(cls) -> "ExperimentConfig":
        """Дефолтный конфиг для локальной разработки (desk-масштаб)."""
        return cls()

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_dir: Optional[str] = None,
        workers: Optional[int] = None,
        log_level: Optional[str] = None,
    ) -> "ExperimentConfig":
        """Флаги CLI поверх значений из файла."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=[seed])
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        if workers is not None:
            cfg = replace(cfg, limits=LimitsConfig(workers=workers))
        if log_level is not None:
            cfg = replace(cfg, log_level=log_level)
        return cfg

    def to_dict(self) -> dict:
        """
        Эхо конфига для отчёта.

        Без output_dir, workers и log_level: на результат они не влияют,
        а отчёт должен совпадать побайтно между запусками.
        """
        data = {
            "features": list(self.features),
            "modes": list(self.modes),
            "population": asdict(self.population),
            "lora": asdict(self.lora),
            "stft": asdict(self.stft),
            "feature": asdict(self.feature),
            "training": asdict(self.training),
            "samples": asdict(self.samples),
            "attack": asdict(self.attack),
            "detection": asdict(self.detection),
            "environments": {name: p.to_dict() for name, p in sorted(self.environments.items())},
        }
        return _plain(data)


def _plain(value):
    """tuple -> list рекурсивно, чтобы JSON был стабилен."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Из файла, если путь задан; иначе default(). Отсутствующий файл: ConfigError."""
    if path is None:
        return ExperimentConfig.default()
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    return ExperimentConfig.from_yaml(path)
