"""CLI: коды выхода и конвейер simulate -> extract -> train -> attack -> detect."""
import json

import pytest

from rffi.attacks import AttackScenario, load_feature_set
from rffi.main import main


def test_missing_config_exits_with_config_code(tmp_path):
    assert main(["experiment", "-c", str(tmp_path / "nope.yaml")]) == 3


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus"])
    assert exc.value.code == 2


def test_missing_report_is_a_data_error(tmp_path):
    assert main(["report", "-i", str(tmp_path / "report.json")]) == 4


def test_file_pipeline(tmp_path, tiny_yaml, capsys):
    cfg = ["-c", str(tiny_yaml)]

    def run(*argv) -> int:
        return main(list(argv) + cfg)

    assert run("simulate", "--split", "train", "--count", "4", "-o", str(tmp_path / "caps-train")) == 0
    assert run("simulate", "--split", "test", "--count", "3", "-o", str(tmp_path / "caps-test")) == 0
    assert run("simulate", "--rogue", "--split", "test", "--count", "3", "-o", str(tmp_path / "caps-rogue")) == 0

    for name, split in (("train", "train"), ("test", "test"), ("rogue", "test")):
        code = run(
            "extract", "-i", str(tmp_path / f"caps-{name}"), "--split", split,
            "--clip", "-10", "10", "-o", str(tmp_path / f"{name}.rfff"),
        )
        assert code == 0
    train = load_feature_set(tmp_path / "train.rfff")
    assert len(train) == 12
    assert sorted(set(train.true_labels)) == ["L01", "L02", "L03"]
    assert set(load_feature_set(tmp_path / "rogue.rfff").true_labels) == {"R01", "R02"}

    capsys.readouterr()
    code = run(
        "train", "--train", str(tmp_path / "train.rfff"), "--test", str(tmp_path / "test.rfff"),
        "--history", str(tmp_path / "history.csv"), "-o", str(tmp_path / "model.rffm"),
    )
    assert code == 0
    accuracy = json.loads(capsys.readouterr().out)["test_accuracy"]
    assert 0.0 <= accuracy <= 1.0
    assert (tmp_path / "history.csv").read_text().startswith("epoch,loss,train_accuracy")

    scenario = tmp_path / "sc.json"
    scenario.write_text(AttackScenario("impersonation", "L01", "R01", seed=1).to_json())
    code = run(
        "attack", "--scenario", str(scenario), "-i", str(tmp_path / "test.rfff"),
        "--rogue-set", str(tmp_path / "rogue.rfff"), "-o", str(tmp_path / "attack.rfff"),
    )
    assert code == 0
    attacked = load_feature_set(tmp_path / "attack.rfff")
    assert set(attacked.claimed_labels) == {"L01"}
    assert len(attacked) == 3 + 6

    scenario.write_text(AttackScenario("impersonation", "L09", "R01").to_json())
    code = run(
        "attack", "--scenario", str(scenario), "-i", str(tmp_path / "test.rfff"),
        "--rogue-set", str(tmp_path / "rogue.rfff"), "-o", str(tmp_path / "bad.rfff"),
    )
    assert code == 3

    code = run(
        "detect", "--base", str(tmp_path / "model.rffm"), "--train", str(tmp_path / "train.rfff"),
        "--test", str(tmp_path / "test.rfff"), "-o", str(tmp_path / "margins.json"),
    )
    assert code == 0
    margins = json.loads((tmp_path / "margins.json").read_text())["margins"]
    assert set(margins) == {"L01", "L02", "L03"}
    assert all(-1.0 <= m <= 1.0 for m in margins.values())

    # train и test из одного каталога: пересечение seed'ов
    code = run(
        "train", "--train", str(tmp_path / "train.rfff"), "--test", str(tmp_path / "train.rfff"),
        "-o", str(tmp_path / "leaky.rffm"),
    )
    assert code == 4


def test_experiment_reports_are_reproducible(tmp_path, tiny_yaml, capsys):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["experiment", "--scenario", "classification", "-c", str(tiny_yaml), "-o", str(out)])
        assert code == 0
        outputs.append((out / "report.json").read_bytes())
        assert (out / "report.csv").exists() and (out / "runtime.json").exists()
    assert outputs[0] == outputs[1]

    capsys.readouterr()
    assert main(["report", "-i", str(tmp_path / "a" / "report.json"), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scenario,metric,value,seed")
    assert "classification/indoor/quotient/transfer/n8" in out
