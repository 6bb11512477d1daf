"""
Общие фикстуры.

TINY: конфиг на секунды: SF7 при 500 кГц, картинки 24x24, три легитимных
и два чужих устройства. theta = 2 отключает фильтр по корреляции, чтобы
число синтезированных пар было предсказуемым.
"""
import copy
from pathlib import Path

import numpy as np
import pytest
import yaml

from rffi.config import ExperimentConfig
from rffi.feature import StftConfig
from rffi.signal_sim import DeviceProfile, LoRaConfig, SalehParams

REPO_ROOT = Path(__file__).resolve().parent.parent

TINY = {
    "seeds": [0],
    "population": {"legit": 3, "rogue": 2},
    "lora": {"spreading_factor": 7, "bandwidth": 125000, "sample_rate": 500000, "preamble_symbols": 4},
    "stft": {"window_length": 128, "hop": 64},
    "feature": {"image_size": 24, "theta": 2.0, "calibration_per_device": 3},
    "training": {
        "conv_filters": [4, 8],
        "pool_after": [True, False],
        "batch_size": 16,
        "scratch_epochs": 3,
        "transfer_epochs": 2,
        "base_samples_per_device": 8,
    },
    "samples": {
        "train_sweep": [4, 8],
        "test_per_device": 6,
        "attack_train": 8,
        "rogue_test_per_device": 6,
    },
    "attack": {"contamination_draws": 2},
    "detection": {
        "normal_matrices": 50,
        "test_matrices": 4,
        "matrix_size": 16,
        "embedding_dim": 8,
        "pool_per_device": 10,
        "sample_sweep": [4],
        "extractor_epochs": 1,
        "classifier_epochs": 1,
    },
    "logging": {"level": "warning"},
}


@pytest.fixture
def small_lora() -> LoRaConfig:
    """512 отсчётов на символ, 4 символа."""
    return LoRaConfig(spreading_factor=7, bandwidth=125e3, sample_rate=500e3, preamble_symbols=4)


@pytest.fixture
def small_stft() -> StftConfig:
    return StftConfig(window_length=128, hop=64)


@pytest.fixture
def device() -> DeviceProfile:
    return DeviceProfile("L01", SalehParams(2.0, 1.0, np.pi / 6, 1.0), perturbation_seed=0)


@pytest.fixture
def other_device() -> DeviceProfile:
    return DeviceProfile("L02", SalehParams(2.1, 1.08, np.pi / 6 * 0.95, 1.05), perturbation_seed=1)


@pytest.fixture
def tiny_dict() -> dict:
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_config(tiny_dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(tiny_dict)


@pytest.fixture
def tiny_yaml(tmp_path, tiny_dict) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_dict))
    return path
