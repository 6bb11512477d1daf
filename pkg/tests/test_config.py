import pytest

from rffi.config import ExperimentConfig, load_config
from rffi.errors import ConfigError
from rffi.harness import build_population

from tests.conftest import REPO_ROOT


@pytest.mark.parametrize("name", ["config.yaml", "config.example.yaml", "configs/full-scale.yaml"])
def test_shipped_configs_parse(name):
    cfg = ExperimentConfig.from_yaml(str(REPO_ROOT / name))
    assert build_population(cfg, 0).legit_labels[0] == "L01"


def test_full_scale_values():
    cfg = load_config(str(REPO_ROOT / "configs/full-scale.yaml"))
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert cfg.population.legit == 20 and cfg.population.rogue == 5
    assert cfg.lora.spreading_factor == 10
    assert cfg.lora.bandwidth == 62_500.0
    assert cfg.lora.num_samples == 163_840
    assert (cfg.stft.window_length, cfg.stft.hop) == (1024, 512)
    assert cfg.feature.image_size == 256
    assert cfg.samples.deployment_env == "outdoor"
    assert build_population(cfg, 0).rogue_labels == ["R01", "R02", "R03", "R04", "R05"]


def test_defaults_are_desk_scale():
    cfg = ExperimentConfig.default()
    assert cfg.lora.spreading_factor == 7
    assert cfg.stft.window_length == 256
    assert cfg.training.padding == 0
    assert cfg.training.new_layer_lr_factor == 20.0
    assert set(cfg.environments) >= {"chamber", "indoor", "outdoor"}
    assert load_config(None).population.legit == 5


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.yaml"))
    broken = tmp_path / "broken.yaml"
    broken.write_text("seeds: [0\n")
    with pytest.raises(ConfigError):
        load_config(str(broken))
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError):
        load_config(str(scalar))


@pytest.mark.parametrize(
    "patch",
    [
        {"seeds": []},
        {"population": {"legit": 1}},
        {"features": ["wavelet"]},
        {"modes": ["finetune"]},
        {"lora": {"spreading_factor": 5}},
        {"stft": {"window_length": 64, "hop": 128}},
        {"samples": {"deployment_env": "mars"}},
        {"samples": {"test_per_device": 0}},
        {"detection": {"nu": 1.5}},
        {"detection": {"pool_per_device": 10, "sample_sweep": [50]}},
        {"feature": {"clip_percentiles": [99, 1]}},
        {"attack": {"targets": ["L99"]}},
        {"limits": {"workers": 0}},
        {"training": {"batch_size": "many"}},
    ],
)
def test_invalid_values(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(patch)


def test_environment_override_merges_field_by_field():
    cfg = ExperimentConfig.from_dict({"environments": {"indoor": {"snr_db": [10.0, 12.0]}}})
    default = ExperimentConfig.default().environments["indoor"]
    assert cfg.environments["indoor"].snr_db == (10.0, 12.0)
    assert cfg.environments["indoor"].tap_count == default.tap_count


def test_overrides_and_echo(tiny_config):
    cfg = tiny_config.with_overrides(seed=7, output_dir="elsewhere", workers=3, log_level="debug")
    assert cfg.seeds == [7]
    assert cfg.output_dir == "elsewhere"
    assert cfg.limits.workers == 3
    assert tiny_config.seeds == [0]

    echo = cfg.to_dict()
    assert "output_dir" not in echo and "limits" not in echo and "log_level" not in echo
    assert echo["training"]["conv_filters"] == [4, 8]
    assert tiny_config.with_overrides(workers=8).to_dict() == tiny_config.to_dict()


def test_tiny_yaml_matches_tiny_dict(tiny_yaml, tiny_config):
    assert load_config(str(tiny_yaml)).to_dict() == tiny_config.to_dict()
