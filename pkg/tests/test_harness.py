"""Сиды, отчёт и сценарии на крошечной конфигурации."""
import json

import numpy as np
import pytest

from rffi.attacks import LabeledFeatureSet, LabeledItem
from rffi.config import ExperimentConfig
from rffi.errors import ConfigError, DataError
from rffi.feature import FeatureImage
from rffi.harness import (
    ExperimentContext,
    MetricRow,
    Report,
    ROW_FIELDS,
    capture_seed,
    check_split_hygiene,
    derive_seed,
    mostly_non_decreasing,
    run_classification_experiment,
    run_contamination_experiment,
    run_experiment,
    run_impersonation_experiment,
)

from tests.conftest import TINY


@pytest.fixture(scope="module")
def contexts():
    """Общие контексты на модуль: модели и датасеты кэшируются."""
    cfg = ExperimentConfig.from_dict(TINY)
    return cfg, {0: ExperimentContext(cfg, 0)}


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(1, "fit", "quotient") == derive_seed(1, "fit", "quotient")
    assert derive_seed(1, "fit", "quotient") != derive_seed(1, "fit", "spectrogram")
    assert derive_seed(1, "x") != derive_seed(2, "x")


def test_capture_seeds_separate_splits():
    train = {capture_seed(0, d, "indoor", "train", i) for d in range(3) for i in range(200)}
    test = {capture_seed(0, d, "indoor", "test", i) for d in range(3) for i in range(200)}
    assert len(train) == 600 and len(test) == 600
    assert not train & test
    assert capture_seed(0, 0, "indoor", "train", 0) != capture_seed(0, 0, "outdoor", "train", 0)
    with pytest.raises(DataError):
        capture_seed(0, 0, "indoor", "validation", 0)


def test_split_hygiene():
    image = FeatureImage(np.zeros((2, 2), dtype=np.uint8))
    a = LabeledFeatureSet((LabeledItem(image, "L01", "L01", 5),))
    b = LabeledFeatureSet((LabeledItem(image, "L01", "L01", 6),), split="test")
    check_split_hygiene(a, b)
    with pytest.raises(DataError):
        check_split_hygiene(a, a)


@pytest.mark.parametrize(
    "values, expected",
    [
        ([0.5], True),
        ([0.5, 0.6, 0.7, 0.8], True),
        ([0.5, 0.7, 0.65, 0.8], True),
        ([0.8, 0.7, 0.6, 0.5], False),
        ([0.6, 0.5], False),
        ([0.5, 0.5], True),
    ],
)
def test_mostly_non_decreasing(values, expected):
    assert mostly_non_decreasing(values) is expected


def _report() -> Report:
    report = Report(name="demo", config={"k": 1}, seeds=[0, 1])
    report.add(scenario="s/a", metric="accuracy", value=0.5, seed="0", feature="quotient", samples=4)
    report.add(scenario="s/a", metric="accuracy", value=0.75, seed="1", feature="quotient", samples=4)
    report.add(scenario="s/a", metric="target_auc", value=0.9, seed="0", target="L01")
    report.add_means()
    report.checks = {"something_holds": True, "other": False}
    return report


def test_report_means_and_lookup():
    report = _report()
    assert report.value("s/a", "accuracy") == pytest.approx(0.625)
    assert report.value("s/a", "accuracy", seed="1") == 0.75
    assert report.value("s/a", "target_auc", target="L01") == 0.9
    assert report.value("s/a", "missing") is None
    assert [r.seed for r in report.values("accuracy")] == ["mean"]


def test_report_serialization():
    report = _report()
    again = Report.from_json(report.to_json())
    assert again.rows == report.rows
    assert again.checks == report.checks
    assert again.to_json() == report.to_json()

    lines = report.to_csv().splitlines()
    assert lines[0].split(",") == ROW_FIELDS
    assert len(lines) == 1 + len(report.rows)

    text = report.to_text()
    assert "[ok] something_holds" in text
    assert "[FAIL] other" in text
    with pytest.raises(DataError):
        Report.from_json("[]")


def test_report_merge_keeps_all_rows():
    a = _report()
    b = Report(name="b", rows=[MetricRow("t", "m", 1.0, "0")], checks={"x": True})
    merged = a.merge(b)
    assert len(merged.rows) == len(a.rows) + 1
    assert merged.checks["x"] and merged.checks["something_holds"]
    assert merged.config == {"k": 1}


def test_context_sets_are_nested_and_clipped(contexts):
    cfg, ctxs = contexts
    ctx = ctxs[0]
    lo, hi = ctx.clip_ranges()["quotient"]
    assert lo < hi
    dev = ctx.population.legit[0]
    small = ctx.device_set("quotient", dev, "indoor", "train", 3)
    large = ctx.device_set("quotient", dev, "indoor", "train", 5)
    assert small.capture_seeds == large.capture_seeds[:3]
    assert all(item.image.size == cfg.feature.image_size for item in large)
    test = ctx.device_set("quotient", dev, "indoor", "test", 3)
    check_split_hygiene(large, test)
    assert test.split == "test"


def test_classification_runner(contexts):
    cfg, ctxs = contexts
    report = run_classification_experiment(cfg, ctxs)
    for kind in ("quotient", "spectrogram"):
        for mode in ("scratch", "transfer"):
            for n in (4, 8):
                value = report.value(f"classification/indoor/{kind}/{mode}/n{n}", "accuracy")
                assert 0.0 <= value <= 1.0
    assert "quotient_transfer_beats_spectrogram_scratch_by_10pt" in report.checks
    assert "quotient_scratch_accuracy_grows_with_samples" in report.checks
    assert report.config == cfg.to_dict()


def test_impersonation_runner(contexts):
    cfg, ctxs = contexts
    report = run_impersonation_experiment(cfg, ctxs)
    micro = report.values("micro_auc", feature="quotient", mode="transfer")
    assert len(micro) == 1 and 0.0 <= micro[0].value <= 1.0
    targets = {r.target for r in report.values("target_auc")}
    assert targets == {"L01", "L02", "L03"}
    assert set(report.checks) == {"quotient_transfer_auc_beats_spectrogram_scratch"}


def test_contamination_runner_writes_artifacts(contexts, tmp_path):
    cfg, ctxs = contexts
    report = run_contamination_experiment(cfg, ctxs, artifacts=tmp_path)
    draws = [r for r in report.rows if r.metric == "target_rogue_auc" and r.seed == "0"]
    assert len(draws) == cfg.attack.contamination_draws
    assert report.value("contamination/indoor/quotient/no-attack/n8", "positive_margin_fraction") is not None
    rate = report.value("detection/indoor/quotient/n4", "detection_rate")
    assert 0.0 <= rate <= 1.0
    assert (tmp_path / "seed0" / "detector-n4.rffd").exists()
    header = (tmp_path / "seed0" / "embeddings-n4.csv").read_text().splitlines()[0]
    assert header.startswith("label,scenario,score,e0")
    assert "detection_rate_at_max_samples_at_least_0_75" in report.checks


def test_run_experiment_rejects_unknown_scenarios(tiny_config):
    with pytest.raises(ConfigError):
        run_experiment(tiny_config, ["benchmark"])


def test_attack_scenarios_need_rogues(tiny_dict):
    tiny_dict["population"]["rogue"] = 0
    cfg = ExperimentConfig.from_dict(tiny_dict)
    with pytest.raises(ConfigError):
        run_impersonation_experiment(cfg)
    with pytest.raises(ConfigError):
        run_contamination_experiment(cfg)


def test_report_json_is_plain(contexts):
    cfg, ctxs = contexts
    body = json.loads(run_classification_experiment(cfg, ctxs).to_json())
    assert body["name"] == "classification"
    assert body["config"]["population"]["legit"] == 3
