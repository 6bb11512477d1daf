"""
Оркестрация экспериментов.

ExperimentContext держит всё, что общее для сценариев одного seed'а:
популяцию устройств, rho_ref, диапазон клиппинга, датасеты и обученные
модели. Сценарии:

    classification : точность по (признак x режим x число образцов)
    impersonation  : micro-AUC и AUC по каждой цели
    contamination  : уязвимость (AUC target vs rogue), знаки M_diff, детектор

Результат: Report: строки метрик + checks + эхо конфига.
"""

import csv
import io
import json
import logging
import statistics
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from rffi.attacks import (
    AttackScenario,
    LabeledFeatureSet,
    LabeledItem,
    contaminate_enrollment,
    impersonation_testset,
)
from rffi.classifier import (
    ArchSpec,
    PosteriorMatrix,
    TrainedModel,
    TrainHyper,
    build,
    forward,
    train_scratch,
    transfer,
)
from rffi.config import FEATURE_KINDS, ExperimentConfig
from rffi.detection import (
    ANOMALY,
    NORMAL,
    DiffMatrix,
    detect_many,
    detection_rate,
    export_embeddings,
    fit_detector,
    posterior_difference,
    save_detector,
    true_positive_margin,
    write_embeddings_csv,
)
from rffi.errors import ConfigError, DataError
from rffi.feature import (
    FeatureExtractor,
    band_rows,
    corpus_clip_range,
    rasterize,
    reference_correlation,
)
from rffi.logger import log_scenario
from rffi.metrics import auc, micro_average_roc, posterior_accuracy, roc, target_roc
from rffi.signal_sim import CaptureJob, DeviceProfile, sample_device_population, synthesize_batch

logger = logging.getLogger("rffi")

SPLITS = ("train", "test", "ref")
ROGUE_INDEX_OFFSET = 1000
# порог "нет выраженной дискриминации" для AUC
WEAK_AUC = 0.9


def _word(part) -> int:
    return int(part) if isinstance(part, (int, np.integer)) else zlib.crc32(str(part).encode())


def derive_seed(seed: int, *parts) -> int:
    """Детерминированный дочерний seed по набору меток."""
    words = [_word(seed)] + [_word(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def capture_seed(seed: int, device_index: int, env: str, split: str, index: int) -> int:
    """
    Seed одной пары: SeedSequence([seed, device, env, split, i]).

    63 бита: train и test разводятся гарантированно на практике,
    а check_split_hygiene проверяет это явно.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    ss = np.random.SeedSequence([seed, device_index, _word(env), SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def check_split_hygiene(train: LabeledFeatureSet, test: LabeledFeatureSet) -> None:
    """Ни один capture seed не должен попасть и в train, и в test."""
    shared = set(train.capture_seeds) & set(test.capture_seeds)
    shared.discard(-1)
    if shared:
        raise DataError(f"{len(shared)} capture seeds appear in both train and test splits")


@dataclass(frozen=True)
class Population:
    legit: Tuple[DeviceProfile, ...]
    rogue: Tuple[DeviceProfile, ...]

    def index_of(self, dev: DeviceProfile) -> int:
        for i, d in enumerate(self.legit):
            if d.device_id == dev.device_id:
                return i
        for i, d in enumerate(self.rogue):
            if d.device_id == dev.device_id:
                return ROGUE_INDEX_OFFSET + i
        raise DataError(f"device {dev.device_id!r} is not part of the population")

    def device(self, label: str) -> DeviceProfile:
        for d in self.legit + self.rogue:
            if d.device_id == label:
                return d
        raise DataError(f"unknown device {label!r}")

    @property
    def legit_labels(self) -> List[str]:
        return [d.device_id for d in self.legit]

    @property
    def rogue_labels(self) -> List[str]:
        return [d.device_id for d in self.rogue]


def build_population(cfg: ExperimentConfig, seed: int) -> Population:
    """Легитимные и чужие устройства из одного распределения, разные seed'ы."""
    pop = cfg.population
    legit = sample_device_population(
        pop.legit, derive_seed(seed, "legit"), pop.legit_prefix, max_perturbation=pop.max_perturbation
    )
    rogue = []
    if pop.rogue:
        rogue = sample_device_population(
            pop.rogue, derive_seed(seed, "rogue"), pop.rogue_prefix, max_perturbation=pop.max_perturbation
        )
    return Population(tuple(legit), tuple(rogue))


def measure_rho_ref(cfg: ExperimentConfig, devices: Sequence[DeviceProfile], seed: int) -> float:
    """Среднее rho_ref по устройствам, по одной безэховой паре на каждое."""
    values = [
        reference_correlation(
            dev, cfg.lora, cfg.stft, capture_seed(seed, i, "chamber", "ref", 0), cfg.environments
        )
        for i, dev in enumerate(devices)
    ]
    rho_ref = float(np.mean(values))
    logger.info(f"reference correlation rho_ref={rho_ref:.6f} over {len(values)} devices")
    return rho_ref


def arch_for(cfg: ExperimentConfig, num_classes: int) -> ArchSpec:
    t = cfg.training
    return ArchSpec(
        input_size=cfg.feature.image_size,
        num_classes=num_classes,
        conv_filters=tuple(t.conv_filters),
        pool_after=tuple(t.pool_after),
        padding=t.padding,
    )


def hyper_for(cfg: ExperimentConfig, mode: str, seed: int, epochs: Optional[int] = None) -> TrainHyper:
    """Гиперпараметры режима scratch/transfer из секции training."""
    t = cfg.training
    if mode == "scratch":
        lr, default_epochs = t.scratch_lr, t.scratch_epochs
    else:
        lr, default_epochs = t.transfer_lr, t.transfer_epochs
    return TrainHyper(
        learning_rate=lr,
        batch_size=t.batch_size,
        epochs=default_epochs if epochs is None else epochs,
        seed=seed,
        new_layer_lr_factor=t.new_layer_lr_factor,
    )


@dataclass
class _Stream:
    """Поток принятых пар одного (устройство, среда, сплит)."""

    source: Iterator
    attempts: int = 0
    items: Dict[str, List[LabeledItem]] = field(default_factory=lambda: {k: [] for k in FEATURE_KINDS})


class ExperimentContext:
    """Общие артефакты одного seed'а; датасеты и модели кэшируются."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        torch.use_deterministic_algorithms(True, warn_only=True)
        self.cfg = cfg
        self.seed = seed
        self.population = build_population(cfg, seed)
        self.rows = (
            band_rows(cfg.stft, cfg.lora.bandwidth, cfg.lora.sample_rate)
            if cfg.feature.crop_to_band
            else None
        )
        self.rho_ref = (
            cfg.feature.rho_ref
            if cfg.feature.rho_ref is not None
            else measure_rho_ref(cfg, self.population.legit, seed)
        )
        self.extractor = FeatureExtractor(
            stft_config=cfg.stft,
            rho_ref=self.rho_ref,
            theta=cfg.feature.theta,
            epsilon=cfg.feature.epsilon,
            rows=self.rows,
        )
        self._clip: Optional[Dict[str, Tuple[float, float]]] = None
        self._streams: Dict[Tuple[str, str, str], _Stream] = {}
        self._models: Dict[Tuple, TrainedModel] = {}

    def _accepted(self, dev: DeviceProfile, env: str, split: str) -> Iterator:
        """(seed, матрицы или None) по возрастанию индекса пары."""
        index = 0
        workers = self.cfg.limits.workers
        chunk = max(8, 4 * workers)
        dev_index = self.population.index_of(dev)
        while True:
            jobs = [
                CaptureJob(dev, env, capture_seed(self.seed, dev_index, env, split, i))
                for i in range(index, index + chunk)
            ]
            for pair in synthesize_batch(jobs, self.cfg.lora, self.cfg.environments, workers):
                yield pair.capture_seed, self.extractor.matrices(pair)
            index += chunk

    def _take_matrices(self, dev: DeviceProfile, env: str, split: str, count: int) -> List[Tuple[int, tuple]]:
        """Первые count принятых пар без кэша: для калибровки."""
        stream = self._accepted(dev, env, split)
        accepted, attempts = [], 0
        while len(accepted) < count:
            self._check_budget(dev, env, split, len(accepted), count, attempts)
            seed, mats = next(stream)
            attempts += 1
            if mats is not None:
                accepted.append((seed, mats))
        return accepted

    def _check_budget(self, dev, env, split, have: int, count: int, attempts: int) -> None:
        if attempts >= count * self.cfg.samples.max_attempts_factor:
            raise DataError(
                f"only {have} of {count} captures of {dev.device_id} in {env}/{split} "
                f"passed the correlation filter after {attempts} attempts"
            )

    def clip_ranges(self) -> Dict[str, Tuple[float, float]]:
        """[p1, p99] по калибровочной части train-сплита легитимных устройств."""
        if self._clip is None:
            envs = sorted({self.cfg.samples.base_env, self.cfg.samples.deployment_env})
            quotients, spectrograms = [], []
            for env in envs:
                for dev in self.population.legit:
                    for _, (q, s) in self._take_matrices(
                        dev, env, "train", self.cfg.feature.calibration_per_device
                    ):
                        quotients.append(q)
                        spectrograms.append(s)
            pct = self.cfg.feature.clip_percentiles
            self._clip = {
                "quotient": corpus_clip_range(quotients, pct),
                "spectrogram": corpus_clip_range(spectrograms, pct),
            }
            logger.info(f"clip ranges frozen: {self._clip}")
        return self._clip

    def device_set(self, kind: str, dev: DeviceProfile, env: str, split: str, count: int) -> LabeledFeatureSet:
        """Первые count принятых образцов устройства; наборы вложены по count."""
        clip = self.clip_ranges()
        key = (dev.device_id, env, split)
        state = self._streams.get(key)
        if state is None:
            state = self._streams[key] = _Stream(self._accepted(dev, env, split))
        fc = self.cfg.feature
        while len(state.items[kind]) < count:
            self._check_budget(dev, env, split, len(state.items[kind]), count, state.attempts)
            seed, mats = next(state.source)
            state.attempts += 1
            if mats is None:
                continue
            for name, matrix in zip(("quotient", "spectrogram"), mats):
                image = rasterize(matrix, fc.image_size, fc.depth, clip[name], source=name)
                state.items[name].append(LabeledItem(image, dev.device_id, dev.device_id, seed, env))
        return LabeledFeatureSet(tuple(state.items[kind][:count]), split="test" if split == "test" else "train")

    def devices_set(
        self, kind: str, devices: Sequence[DeviceProfile], env: str, split: str, count: int
    ) -> LabeledFeatureSet:
        items: Tuple[LabeledItem, ...] = ()
        for dev in devices:
            items += self.device_set(kind, dev, env, split, count).items
        return LabeledFeatureSet(items, split="test" if split == "test" else "train")

    def legit_set(self, kind: str, split: str, count: int, env: Optional[str] = None) -> LabeledFeatureSet:
        env = env or self.cfg.samples.deployment_env
        return self.devices_set(kind, self.population.legit, env, split, count)

    def arch(self) -> ArchSpec:
        return arch_for(self.cfg, len(self.population.legit))

    def hyper(self, mode: str, seed: int, epochs: Optional[int] = None) -> TrainHyper:
        return hyper_for(self.cfg, mode, seed, epochs)

    def base_model(self, kind: str) -> TrainedModel:
        """Базовая модель: scratch на безэховом датасете тех же устройств."""
        key = ("base", kind)
        if key not in self._models:
            with log_scenario(logger, f"base/{kind}/s{self.seed}") as log:
                data = self.legit_set(
                    kind, "train", self.cfg.training.base_samples_per_device, env=self.cfg.samples.base_env
                )
                seed = derive_seed(self.seed, "base", kind)
                model = build(self.arch(), seed, self.population.legit_labels)
                self._models[key] = train_scratch(model, data, self.hyper("scratch", seed))
                self._models[key].model_id = f"base-{kind}-s{self.seed}"
                log.summary = f"{len(data)} samples"
        return self._models[key]

    def fit(
        self, kind: str, mode: str, train: LabeledFeatureSet, tag: str, epochs: Optional[int] = None
    ) -> TrainedModel:
        """Классификатор над легитимными классами; seed зависит от tag."""
        seed = derive_seed(self.seed, "fit", kind, mode, tag)
        labels = self.population.legit_labels
        if mode == "scratch":
            model = build(self.arch(), seed, labels)
            return train_scratch(model, train, self.hyper("scratch", seed, epochs))
        return transfer(self.base_model(kind), train, self.hyper("transfer", seed, epochs), class_labels=labels)

    def enrolled_model(self, kind: str, mode: str, n: int) -> TrainedModel:
        """Чистое enrollment с n образцами на устройство (кэш общий для сценариев)."""
        key = ("enrolled", kind, mode, n)
        if key not in self._models:
            train = self.legit_set(kind, "train", n)
            check_split_hygiene(train, self.legit_set(kind, "test", self.cfg.samples.test_per_device))
            self._models[key] = self.fit(kind, mode, train, tag=f"n{n}")
        return self._models[key]

    def test_set(self, kind: str) -> LabeledFeatureSet:
        return self.legit_set(kind, "test", self.cfg.samples.test_per_device)

    def rogue_set(self, kind: str, split: str, count: int, labels: Optional[Sequence[str]] = None) -> LabeledFeatureSet:
        devices = [d for d in self.population.rogue if labels is None or d.device_id in labels]
        return self.devices_set(kind, devices, self.cfg.samples.deployment_env, split, count)


def posteriors(model: TrainedModel, data: LabeledFeatureSet) -> PosteriorMatrix:
    images, _ = data.as_arrays()
    return forward(model, images, data.observation_ids())


# --- отчёт ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    metric: str
    value: float
    seed: str
    feature: str = ""
    mode: str = ""
    samples: int = 0
    target: str = ""


ROW_FIELDS = ["scenario", "metric", "value", "seed", "feature", "mode", "samples", "target"]


@dataclass
class Report:
    """
    Метрики сценариев + проверки трендов + эхо конфига.

    Время выполнения сюда не пишется: только в runtime.json рядом,
    иначе отчёты не совпадали бы побайтно.
    """

    name: str
    rows: List[MetricRow] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        self.rows.append(MetricRow(**kwargs))

    def add_means(self) -> None:
        """Строки seed="mean": среднее по seed'ам для каждой метрики."""
        groups: Dict[Tuple, List[MetricRow]] = {}
        for row in self.rows:
            if row.seed == "mean":
                continue
            groups.setdefault((row.scenario, row.metric, row.target), []).append(row)
        for rows in groups.values():
            first = rows[0]
            self.rows.append(
                MetricRow(
                    scenario=first.scenario,
                    metric=first.metric,
                    value=statistics.fmean(r.value for r in rows),
                    seed="mean",
                    feature=first.feature,
                    mode=first.mode,
                    samples=first.samples,
                    target=first.target,
                )
            )

    def value(self, scenario: str, metric: str, target: str = "", seed: str = "mean") -> Optional[float]:
        for row in self.rows:
            if (row.scenario, row.metric, row.target, row.seed) == (scenario, metric, target, seed):
                return row.value
        return None

    def values(self, metric: str, seed: str = "mean", **match) -> List[MetricRow]:
        return [
            r
            for r in self.rows
            if r.metric == metric and r.seed == seed and all(getattr(r, k) == v for k, v in match.items())
        ]

    def merge(self, other: "Report") -> "Report":
        return Report(
            name=self.name,
            rows=self.rows + other.rows,
            checks={**self.checks, **other.checks},
            config=self.config or other.config,
            seeds=self.seeds or other.seeds,
        )

    def to_json(self) -> str:
        body = {
            "name": self.name,
            "seeds": list(self.seeds),
            "config": self.config,
            "checks": dict(self.checks),
            "rows": [asdict(r) for r in self.rows],
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        try:
            body = json.loads(text)
            return cls(
                name=body["name"],
                rows=[MetricRow(**r) for r in body.get("rows", [])],
                checks={k: bool(v) for k, v in body.get("checks", {}).items()},
                config=body.get("config", {}),
                seeds=[int(s) for s in body.get("seeds", [])],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"not a report: {e}") from e

    def to_csv(self) -> str:
        """Одна строка на метрику сценария."""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            record = asdict(row)
            record["value"] = repr(row.value)
            writer.writerow(record)
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"report: {self.name}  seeds: {', '.join(str(s) for s in self.seeds)}", ""]
        lines.append(f"{'scenario':<48} {'metric':<28} {'target':<8} {'seed':<6} value")
        for row in self.rows:
            lines.append(
                f"{row.scenario:<48} {row.metric:<28} {row.target:<8} {row.seed:<6} {row.value:.4f}"
            )
        if self.checks:
            lines.append("")
            lines.append("checks:")
            for name, ok in sorted(self.checks.items()):
                lines.append(f"  [{'ok' if ok else 'FAIL'}] {name}")
        return "\n".join(lines) + "\n"


def mostly_non_decreasing(values: Sequence[float]) -> bool:
    """Не больше одного шага вниз (на 4 точках: 2 из 3 шагов не убывают)."""
    steps = [b >= a for a, b in zip(values, values[1:])]
    if not steps:
        return True
    return sum(steps) >= max(1, len(steps) - 1)


def _contexts(cfg: ExperimentConfig, contexts: Optional[Dict[int, ExperimentContext]]) -> Dict[int, ExperimentContext]:
    contexts = {} if contexts is None else contexts
    for seed in cfg.seeds:
        if seed not in contexts:
            contexts[seed] = ExperimentContext(cfg, seed)
    return contexts


# --- сценарии -------------------------------------------------------------


def run_classification_experiment(
    cfg: ExperimentConfig, contexts: Optional[Dict[int, ExperimentContext]] = None
) -> Report:
    """Точность для всех (признак, режим) по сетке числа образцов."""
    contexts = _contexts(cfg, contexts)
    report = Report(name="classification", config=cfg.to_dict(), seeds=list(cfg.seeds))
    env = cfg.samples.deployment_env
    for seed in cfg.seeds:
        ctx = contexts[seed]
        for kind in cfg.features:
            test = ctx.test_set(kind)
            for n in cfg.samples.train_sweep:
                for mode in cfg.modes:
                    sid = f"classification/{env}/{kind}/{mode}/n{n}"
                    with log_scenario(logger, f"{sid}/s{seed}") as log:
                        model = ctx.enrolled_model(kind, mode, n)
                        acc = posterior_accuracy(posteriors(model, test), test.true_labels)
                        log.summary = f"accuracy={acc:.4f}"
                    report.add(
                        scenario=sid, metric="accuracy", value=acc, seed=str(seed),
                        feature=kind, mode=mode, samples=n,
                    )
    report.add_means()
    report.checks = classification_checks(cfg, report)
    return report


def _reference_samples(cfg: ExperimentConfig) -> int:
    sweep = cfg.samples.train_sweep
    return cfg.samples.attack_train if cfg.samples.attack_train in sweep else max(sweep)


def classification_checks(cfg: ExperimentConfig, report: Report) -> Dict[str, bool]:
    env = cfg.samples.deployment_env
    checks: Dict[str, bool] = {}
    n = _reference_samples(cfg)
    best = report.value(f"classification/{env}/quotient/transfer/n{n}", "accuracy")
    worst = report.value(f"classification/{env}/spectrogram/scratch/n{n}", "accuracy")
    if best is not None and worst is not None:
        checks["quotient_transfer_beats_spectrogram_scratch_by_10pt"] = best - worst >= 0.10
    for kind in cfg.features:
        for mode in cfg.modes:
            series = [
                report.value(f"classification/{env}/{kind}/{mode}/n{m}", "accuracy")
                for m in sorted(cfg.samples.train_sweep)
            ]
            if len(series) > 1 and None not in series:
                checks[f"{kind}_{mode}_accuracy_grows_with_samples"] = mostly_non_decreasing(series)
    return checks


def run_impersonation_experiment(
    cfg: ExperimentConfig, contexts: Optional[Dict[int, ExperimentContext]] = None
) -> Report:
    """Micro-averaged AUC на общем тестовом наборе + AUC по каждой цели."""
    if cfg.population.rogue < 1:
        raise ConfigError("impersonation needs at least one rogue device")
    contexts = _contexts(cfg, contexts)
    report = Report(name="impersonation", config=cfg.to_dict(), seeds=list(cfg.seeds))
    env = cfg.samples.deployment_env
    n = cfg.samples.attack_train
    for seed in cfg.seeds:
        ctx = contexts[seed]
        targets = cfg.attack.targets or ctx.population.legit_labels
        for kind in cfg.features:
            legit_test = ctx.test_set(kind)
            rogue_pool = ctx.rogue_set(kind, "test", cfg.samples.rogue_test_per_device)
            union = legit_test.merge(rogue_pool)
            for mode in cfg.modes:
                sid = f"impersonation/{env}/{kind}/{mode}/n{n}"
                with log_scenario(logger, f"{sid}/s{seed}") as log:
                    model = ctx.enrolled_model(kind, mode, n)
                    micro = auc(micro_average_roc(posteriors(model, union), union.true_labels))
                    report.add(
                        scenario=sid, metric="micro_auc", value=micro, seed=str(seed),
                        feature=kind, mode=mode, samples=n,
                    )
                    for target in targets:
                        sc = AttackScenario("impersonation", target, ctx.population.rogue_labels[0], seed)
                        attack_set = impersonation_testset(legit_test, rogue_pool, sc, cfg.attack.rogue_only)
                        value = auc(target_roc(posteriors(model, attack_set), attack_set.true_labels, target))
                        report.add(
                            scenario=sid, metric="target_auc", value=value, seed=str(seed),
                            feature=kind, mode=mode, samples=n, target=target,
                        )
                    log.summary = f"micro_auc={micro:.4f}"
    report.add_means()
    report.checks = impersonation_checks(cfg, report)
    return report


def impersonation_checks(cfg: ExperimentConfig, report: Report) -> Dict[str, bool]:
    env = cfg.samples.deployment_env
    n = cfg.samples.attack_train
    best_sid = f"impersonation/{env}/quotient/transfer/n{n}"
    worst_sid = f"impersonation/{env}/spectrogram/scratch/n{n}"
    if report.value(best_sid, "micro_auc") is None or report.value(worst_sid, "micro_auc") is None:
        return {}
    # строго на каждом seed'е, не только в среднем
    per_seed = all(
        report.value(best_sid, "micro_auc", seed=str(s)) > report.value(worst_sid, "micro_auc", seed=str(s))
        for s in cfg.seeds
    )
    return {"quotient_transfer_auc_beats_spectrogram_scratch": per_seed}


def _diff_matrix(
    ctx: ExperimentContext,
    kind: str,
    train: LabeledFeatureSet,
    test: LabeledFeatureSet,
    tag: str,
    meta: dict,
    label: Optional[str],
    epochs: Optional[int] = None,
) -> Tuple[DiffMatrix, TrainedModel]:
    """Transfer и scratch на одном train, разность softmax на test."""
    t_model = ctx.fit(kind, "transfer", train, tag, epochs)
    d_model = ctx.fit(kind, "scratch", train, tag, epochs)
    d = posterior_difference(posteriors(t_model, test), posteriors(d_model, test), meta, label)
    return d, t_model


def _bootstrap(pool: Dict[str, LabeledFeatureSet], n: int, seed: int) -> LabeledFeatureSet:
    """n образцов на устройство без повторов из заранее сгенерированного пула."""
    rng = np.random.default_rng(seed)
    items: Tuple[LabeledItem, ...] = ()
    for label in sorted(pool):
        picked = np.sort(rng.choice(len(pool[label]), size=n, replace=False))
        items += tuple(pool[label].items[int(i)] for i in picked)
    return LabeledFeatureSet(items, split="train")


def run_contamination_experiment(
    cfg: ExperimentConfig,
    contexts: Optional[Dict[int, ExperimentContext]] = None,
    artifacts: Optional[Path] = None,
) -> Report:
    """
    (a) уязвимость: AUC target vs rogue у отравленного transfer-классификатора
        и знак true-positive margin в M_diff;
    (b) детектор: one-class по нормальным M_diff, detection rate по сетке образцов.
    """
    if cfg.population.rogue < 1:
        raise ConfigError("contamination needs at least one rogue device")
    contexts = _contexts(cfg, contexts)
    report = Report(name="contamination", config=cfg.to_dict(), seeds=list(cfg.seeds))
    for seed in cfg.seeds:
        ctx = contexts[seed]
        _vulnerability(ctx, report)
        _detection(ctx, report, artifacts)
    report.add_means()
    report.checks = contamination_checks(cfg, report)
    return report


def _vulnerability(ctx: ExperimentContext, report: Report) -> None:
    cfg = ctx.cfg
    kind = cfg.detection.feature
    env = cfg.samples.deployment_env
    n = cfg.samples.attack_train
    seed = ctx.seed
    train = ctx.legit_set(kind, "train", n)
    test = ctx.test_set(kind)
    targets = cfg.attack.targets or ctx.population.legit_labels

    # без атаки: доля классов с положительным margin
    sid = f"contamination/{env}/{kind}/no-attack/n{n}"
    with log_scenario(logger, f"{sid}/s{seed}") as log:
        t_model = ctx.enrolled_model(kind, "transfer", n)
        d_model = ctx.enrolled_model(kind, "scratch", n)
        d = posterior_difference(posteriors(t_model, test), posteriors(d_model, test))
        margins = [m for m in true_positive_margin(d, test.true_labels).values() if m is not None]
        positive = sum(m > 0 for m in margins) / len(margins)
        log.summary = f"positive_margin_fraction={positive:.3f}"
    report.add(scenario=sid, metric="positive_margin_fraction", value=positive, seed=str(seed), feature=kind, samples=n)

    rng = np.random.default_rng(derive_seed(seed, "contamination-draws"))
    sid = f"contamination/{env}/{kind}/attack/n{n}"
    weak, negative = [], []
    for k in range(cfg.attack.contamination_draws):
        target = str(rng.choice(targets))
        rogue_label = str(rng.choice(ctx.population.rogue_labels))
        sc = AttackScenario("contamination", target, rogue_label, derive_seed(seed, "draw", k))
        with log_scenario(logger, f"{sc.scenario_id}/n{n}"):
            rogue = ctx.population.device(rogue_label)
            rogue_pool = ctx.device_set(kind, rogue, env, "train", n)
            poisoned = contaminate_enrollment(train, rogue_pool, sc)
            d, t_model = _diff_matrix(ctx, kind, poisoned, test, sc.scenario_id, {"scenario": sc.scenario_id}, ANOMALY)

            rogue_test = ctx.device_set(kind, rogue, env, "test", cfg.samples.rogue_test_per_device)
            attacked = impersonation_testset(test, rogue_test, AttackScenario("impersonation", target, rogue_label, sc.seed))
            value = auc(target_roc(posteriors(t_model, attacked), attacked.true_labels, target))
            margin = true_positive_margin(d, test.true_labels)[target]
        weak.append(value < WEAK_AUC)
        report.add(scenario=sid, metric="target_rogue_auc", value=value, seed=str(seed), feature=kind, mode="transfer", samples=n, target=f"draw{k}")
        if margin is not None:
            negative.append(margin < 0)
            report.add(scenario=sid, metric="target_margin", value=margin, seed=str(seed), feature=kind, samples=n, target=f"draw{k}")
    if weak:
        report.add(scenario=sid, metric="weak_auc_fraction", value=sum(weak) / len(weak), seed=str(seed), feature=kind, samples=n)
    if negative:
        report.add(scenario=sid, metric="negative_margin_fraction", value=sum(negative) / len(negative), seed=str(seed), feature=kind, samples=n)


def _detection(ctx: ExperimentContext, report: Report, artifacts: Optional[Path]) -> None:
    cfg = ctx.cfg
    det_cfg = cfg.detection
    kind = det_cfg.feature
    env = cfg.samples.deployment_env
    seed = ctx.seed
    test = ctx.test_set(kind)
    targets = cfg.attack.targets or ctx.population.legit_labels

    legit_pool = {
        dev.device_id: ctx.device_set(kind, dev, env, "train", det_cfg.pool_per_device)
        for dev in ctx.population.legit
    }
    for dev in ctx.population.legit:
        check_split_hygiene(legit_pool[dev.device_id], test)
    rogue_pool = {
        dev.device_id: ctx.device_set(kind, dev, env, "train", det_cfg.pool_per_device)
        for dev in ctx.population.rogue
    }
    epochs = det_cfg.classifier_epochs

    for n in det_cfg.sample_sweep:
        sid = f"detection/{env}/{kind}/n{n}"
        with log_scenario(logger, f"{sid}/s{seed}") as log:

            def normal(k: int) -> DiffMatrix:
                train = _bootstrap(legit_pool, n, derive_seed(seed, "bootstrap", n, k))
                meta = {"scenario": f"normal-{k}", "batch": k % det_cfg.proxy_batches}
                return _diff_matrix(ctx, kind, train, test, f"det-n{n}-{k}", meta, NORMAL, epochs)[0]

            def anomaly(k: int) -> DiffMatrix:
                rng = np.random.default_rng(derive_seed(seed, "anomaly", n, k))
                sc = AttackScenario(
                    "contamination",
                    str(rng.choice(targets)),
                    str(rng.choice(sorted(rogue_pool))),
                    derive_seed(seed, "anomaly-sc", n, k),
                )
                train = _bootstrap(legit_pool, n, derive_seed(seed, "bootstrap-a", n, k))
                poisoned = contaminate_enrollment(train, rogue_pool[sc.rogue], sc)
                meta = {"scenario": sc.scenario_id}
                return _diff_matrix(ctx, kind, poisoned, test, f"det-a-n{n}-{k}", meta, ANOMALY, epochs)[0]

            normals = [normal(k) for k in range(det_cfg.normal_matrices)]
            held_out = [normal(det_cfg.normal_matrices + k) for k in range(det_cfg.test_matrices)]
            anomalies = [anomaly(k) for k in range(det_cfg.test_matrices)]

            det = fit_detector(
                normals,
                derive_seed(seed, "detector", n),
                nu=det_cfg.nu,
                matrix_size=det_cfg.matrix_size,
                embedding_dim=det_cfg.embedding_dim,
                proxy_batches=det_cfg.proxy_batches,
                epochs=det_cfg.extractor_epochs,
            )
            rate = detection_rate(detect_many(det, anomalies))
            false_alarm = detection_rate(detect_many(det, held_out))
            outside = detection_rate(detect_many(det, normals))
            scores = np.concatenate([det.scores(held_out), det.scores(anomalies)])
            is_anomaly = [False] * len(held_out) + [True] * len(anomalies)
            det_auc = auc(roc(-scores, is_anomaly))
            log.summary = f"detection_rate={rate:.3f} false_alarm={false_alarm:.3f} auc={det_auc:.3f}"

            if artifacts is not None:
                out = Path(artifacts) / f"seed{seed}"
                out.mkdir(parents=True, exist_ok=True)
                save_detector(det, out / f"detector-n{n}.rffd")
                write_embeddings_csv(export_embeddings(held_out + anomalies, det), out / f"embeddings-n{n}.csv")

        common = dict(scenario=sid, seed=str(seed), feature=kind, samples=n)
        report.add(metric="detection_rate", value=rate, **common)
        report.add(metric="false_alarm_rate", value=false_alarm, **common)
        report.add(metric="training_outlier_rate", value=outside, **common)
        report.add(metric="detector_auc", value=det_auc, **common)


def contamination_checks(cfg: ExperimentConfig, report: Report) -> Dict[str, bool]:
    env = cfg.samples.deployment_env
    kind = cfg.detection.feature
    n = cfg.samples.attack_train
    checks: Dict[str, bool] = {}

    weak = report.value(f"contamination/{env}/{kind}/attack/n{n}", "weak_auc_fraction")
    if weak is not None:
        checks["contaminated_target_auc_below_0_9"] = weak >= 0.8
    negative = report.value(f"contamination/{env}/{kind}/attack/n{n}", "negative_margin_fraction")
    if negative is not None:
        checks["attacked_target_margin_negative"] = negative >= 0.8
    positive = report.value(f"contamination/{env}/{kind}/no-attack/n{n}", "positive_margin_fraction")
    if positive is not None:
        checks["no_attack_margins_positive"] = positive >= 0.8

    sweep = sorted(cfg.detection.sample_sweep)
    rates = [report.value(f"detection/{env}/{kind}/n{m}", "detection_rate") for m in sweep]
    if rates and None not in rates:
        checks["detection_rate_grows_with_samples"] = mostly_non_decreasing(rates)
        checks["detection_rate_at_max_samples_at_least_0_75"] = rates[-1] >= 0.75
    alarms = [report.value(f"detection/{env}/{kind}/n{m}", "false_alarm_rate") for m in sweep]
    if alarms and None not in alarms:
        checks["false_alarm_within_2nu"] = all(a <= 2 * cfg.detection.nu for a in alarms)
    return checks


SCENARIOS = ("classification", "impersonation", "contamination")


def run_experiment(
    cfg: ExperimentConfig,
    scenarios: Sequence[str] = SCENARIOS,
    artifacts: Optional[Path] = None,
) -> Report:
    """Несколько сценариев на общих контекстах; один сводный отчёт."""
    unknown = [s for s in scenarios if s not in SCENARIOS]
    if unknown:
        raise ConfigError(f"unknown scenarios {unknown}, expected a subset of {SCENARIOS}")
    contexts: Dict[int, ExperimentContext] = {}
    report = Report(name="experiment", config=cfg.to_dict(), seeds=list(cfg.seeds))
    for name in scenarios:
        if name == "classification":
            part = run_classification_experiment(cfg, contexts)
        elif name == "impersonation":
            part = run_impersonation_experiment(cfg, contexts)
        else:
            part = run_contamination_experiment(cfg, contexts, artifacts)
        report = report.merge(part)
    return report
