"""
Симуляция передатчиков и канала.

Цепочка для одного пакета:
    preamble (K up-chirp'ов) -> PA (Saleh AM/AM + AM/PM) -> канал -> шум

Два последовательных пакета (high/low мощность) через один и тот же
канал дают CapturePair: сырьё для PA nonlinearity quotient.

Всё детерминировано: одна и та же пара (входы, seed) даёт тот же результат.
"""

import functools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from rffi.errors import ConfigError, DataError
from rffi.utils.codec import read_iq, write_iq

logger = logging.getLogger("rffi")

DEFAULT_PRESETS_PATH = Path(__file__).with_name("presets.yaml")

# 17 dBm -> амплитуда 0.9 на входе PA; условность симулятора, не из железа
REFERENCE_POWER_DBM = 17.0
REFERENCE_DRIVE_AMPLITUDE = 0.9
MAX_PERTURBATION = 0.1


@dataclass(frozen=True)
class LoRaConfig:
    """
    Параметры LoRa-преамбулы.

    Длительность символа 2^SF / B, на символ должно приходиться
    целое число отсчётов: иначе чирпы не стыкуются.
    """

    spreading_factor: int = 10
    bandwidth: float = 62.5e3
    sample_rate: float = 1e6
    preamble_symbols: int = 10
    carrier_offset: float = 0.0

    def __post_init__(self) -> None:
        if not 7 <= self.spreading_factor <= 12:
            raise ConfigError(f"spreading factor must be in 7..12, got {self.spreading_factor}")
        if self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.sample_rate < self.bandwidth:
            raise ConfigError(
                f"sample rate {self.sample_rate} is below bandwidth {self.bandwidth}"
            )
        if self.preamble_symbols < 1:
            raise ConfigError(f"preamble needs at least one symbol, got {self.preamble_symbols}")
        exact = 2**self.spreading_factor / self.bandwidth * self.sample_rate
        if abs(exact - round(exact)) > 1e-9 * exact or round(exact) < 1:
            raise ConfigError(
                f"2^SF/B*f_S = {exact} is not a positive integer number of samples"
            )

    @property
    def symbol_duration(self) -> float:
        return 2**self.spreading_factor / self.bandwidth

    @property
    def samples_per_symbol(self) -> int:
        return int(round(2**self.spreading_factor / self.bandwidth * self.sample_rate))

    @property
    def num_samples(self) -> int:
        return self.preamble_symbols * self.samples_per_symbol


@dataclass(frozen=True, eq=False)
class BasebandSignal:
    """Комплексная огибающая + частота дискретизации."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.complex128)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("baseband signal must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise DataError("baseband signal contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class SalehParams:
    """
    Коэффициенты модели Saleh.

    A(r) = alpha_a * r / (1 + beta_a * r^2)
    Phi(r) = alpha_phi * r^2 / (1 + beta_phi * r^2)
    """

    alpha_a: float
    beta_a: float
    alpha_phi: float
    beta_phi: float

    def am_am(self, r: np.ndarray) -> np.ndarray:
        return self.alpha_a * r / (1 + self.beta_a * r**2)

    def am_pm(self, r: np.ndarray) -> np.ndarray:
        return self.alpha_phi * r**2 / (1 + self.beta_phi * r**2)

    def as_vector(self) -> np.ndarray:
        return np.array([self.alpha_a, self.beta_a, self.alpha_phi, self.beta_phi])


NOMINAL_SALEH = SalehParams(alpha_a=2.0, beta_a=1.0, alpha_phi=math.pi / 6, beta_phi=1.0)


@dataclass(frozen=True)
class DeviceProfile:
    """Виртуальное устройство: его PA и есть отпечаток."""

    device_id: str
    pa_params: SalehParams
    perturbation_seed: int
    perturbation: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.pa_params.beta_a <= 0:
            raise ConfigError(f"{self.device_id}: beta_a must be positive")
        if any(abs(d) > MAX_PERTURBATION for d in self.perturbation):
            raise ConfigError(f"{self.device_id}: perturbation exceeds ±{MAX_PERTURBATION}")


@dataclass(frozen=True)
class PowerLevel:
    """Уровень мощности передачи (high/low)."""

    tag: str
    tx_power_dbm: float

    @property
    def drive_amplitude(self) -> float:
        """Нормированная амплитуда на входе PA для этой мощности."""
        return REFERENCE_DRIVE_AMPLITUDE * 10 ** (
            (self.tx_power_dbm - REFERENCE_POWER_DBM) / 20
        )


HIGH_POWER = PowerLevel("high", 17.0)
LOW_POWER = PowerLevel("low", 10.0)


def power_levels(high_dbm: float = 17.0, low_dbm: float = 10.0) -> Tuple[PowerLevel, PowerLevel]:
    """Пара уровней; high обязан быть строго выше low."""
    if high_dbm <= low_dbm:
        raise ConfigError(f"high power {high_dbm} dBm must exceed low power {low_dbm} dBm")
    return PowerLevel("high", high_dbm), PowerLevel("low", low_dbm)


@dataclass(frozen=True)
class ChannelRealization:
    """
    Одна реализация канала h(tau, t) + шум.

    Временная вариация: синусоида с единичным средним, плюс опциональная
    ступенька усиления (для проверки фильтра искажённых пар).
    Отсчёты считаются от начала high-пакета: low продолжает траекторию.
    """

    taps: Tuple[Tuple[int, complex], ...]
    doppler_hz: float = 0.0
    snr_db: float = math.inf
    fading_rate_hz: float = 0.0
    fading_depth: float = 0.0
    fading_phase: float = 0.0
    gain_step: Optional[Tuple[int, float]] = None
    env: str = "custom"

    def __post_init__(self) -> None:
        if not self.taps:
            raise ConfigError("channel needs at least one tap")
        delays = [d for d, _ in self.taps]
        if delays[0] < 0 or any(b <= a for a, b in zip(delays, delays[1:])):
            raise ConfigError(f"tap delays must be nonnegative and strictly increasing: {delays}")
        if not 0 <= self.fading_depth < 1:
            raise ConfigError(f"fading depth must be in [0, 1), got {self.fading_depth}")
        if self.gain_step is not None and self.gain_step[1] <= 0:
            raise ConfigError("gain step factor must be positive")

    @property
    def delays(self) -> np.ndarray:
        return np.array([d for d, _ in self.taps], dtype=int)

    @property
    def gains(self) -> np.ndarray:
        return np.array([g for _, g in self.taps], dtype=np.complex128)

    @property
    def delay_spread(self) -> float:
        """RMS delay spread в отсчётах."""
        power = np.abs(self.gains) ** 2
        if power.sum() == 0:
            return 0.0
        weights = power / power.sum()
        mean = np.sum(weights * self.delays)
        return float(np.sqrt(np.sum(weights * (self.delays - mean) ** 2)))

    @property
    def is_static(self) -> bool:
        return self.fading_depth == 0 and self.gain_step is None

    def fir(self) -> np.ndarray:
        h = np.zeros(int(self.delays[-1]) + 1, dtype=np.complex128)
        h[self.delays] = self.gains
        return h

    def time_variation(self, start: int, length: int, sample_rate: float) -> np.ndarray:
        n = np.arange(start, start + length)
        g = 1.0 + self.fading_depth * np.sin(
            2 * np.pi * self.fading_rate_hz * n / sample_rate + self.fading_phase
        )
        if self.gain_step is not None:
            at, factor = self.gain_step
            g = np.where(n >= at, g * factor, g)
        return g

    def doppler_phasor(self, start: int, length: int, sample_rate: float) -> np.ndarray:
        n = np.arange(start, start + length)
        return np.exp(2j * np.pi * self.doppler_hz * n / sample_rate)

    def describe(self) -> dict:
        """Дескриптор для манифестов (JSON-совместимый)."""
        return {
            "env": self.env,
            "taps": [[int(d), [float(g.real), float(g.imag)]] for d, g in self.taps],
            "doppler_hz": self.doppler_hz,
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "fading_rate_hz": self.fading_rate_hz,
            "fading_depth": self.fading_depth,
        }


@dataclass(frozen=True, eq=False)
class CapturePair:
    """Два последовательных приёма одного устройства: high и low."""

    high: BasebandSignal
    low: BasebandSignal
    device_id: str
    claimed_id: str
    channel_meta: dict = field(default_factory=dict)
    capture_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.high) != len(self.low):
            raise DataError("high and low captures must have equal length")
        if self.high.sample_rate != self.low.sample_rate:
            raise DataError("high and low captures must share a sample rate")


@dataclass(frozen=True)
class EnvironmentPreset:
    """Распределения параметров канала для одной среды."""

    name: str
    tap_count: Tuple[int, int]
    max_delay: int
    delay_decay: float
    rayleigh: bool
    doppler_hz: Tuple[float, float]
    fading_rate_hz: Tuple[float, float]
    fading_depth: Tuple[float, float]
    snr_db: Tuple[float, float]

    def __post_init__(self) -> None:
        lo, hi = self.tap_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"{self.name}: bad tap_count range {self.tap_count}")
        if self.max_delay < hi - 1:
            raise ConfigError(f"{self.name}: max_delay {self.max_delay} cannot hold {hi} taps")
        if self.delay_decay <= 0:
            raise ConfigError(f"{self.name}: delay_decay must be positive")
        for name in ("doppler_hz", "fading_rate_hz", "fading_depth", "snr_db"):
            a, b = getattr(self, name)
            if a > b:
                raise ConfigError(f"{self.name}: {name} range is reversed")
        if self.fading_depth[1] >= 1:
            raise ConfigError(f"{self.name}: fading depth must stay below 1")

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "EnvironmentPreset":
        try:
            return cls(
                name=name,
                tap_count=tuple(int(v) for v in data["tap_count"]),
                max_delay=int(data["max_delay"]),
                delay_decay=float(data["delay_decay"]),
                rayleigh=bool(data["rayleigh"]),
                doppler_hz=tuple(float(v) for v in data["doppler_hz"]),
                fading_rate_hz=tuple(float(v) for v in data["fading_rate_hz"]),
                fading_depth=tuple(float(v) for v in data["fading_depth"]),
                snr_db=tuple(float(v) for v in data["snr_db"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"environment preset {name!r} is malformed: {e}") from e

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("name")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}


@functools.lru_cache(maxsize=4)
def _load_presets_cached(path: str) -> Dict[str, EnvironmentPreset]:
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    return {name: EnvironmentPreset.from_dict(name, body) for name, body in data.items()}


def load_environment_presets(path: Optional[str] = None) -> Dict[str, EnvironmentPreset]:
    """Читает пресеты сред из YAML (по умолчанию: presets.yaml рядом с модулем)."""
    return dict(_load_presets_cached(str(path or DEFAULT_PRESETS_PATH)))


@functools.lru_cache(maxsize=8)
def _preamble_samples(cfg: LoRaConfig) -> np.ndarray:
    sps = cfg.samples_per_symbol
    t = np.arange(sps) / cfg.sample_rate
    # скорость свипа B / T; частота идёт от -B/2 до +B/2 за символ
    rate = cfg.bandwidth / cfg.symbol_duration
    symbol = np.exp(2j * np.pi * (-cfg.bandwidth / 2 * t + 0.5 * rate * t**2))
    samples = np.tile(symbol, cfg.preamble_symbols)
    if cfg.carrier_offset:
        n = np.arange(samples.size)
        samples = samples * np.exp(2j * np.pi * cfg.carrier_offset * n / cfg.sample_rate)
    samples.setflags(write=False)
    return samples


def generate_preamble(cfg: LoRaConfig) -> BasebandSignal:
    """K одинаковых up-chirp'ов с единичной огибающей."""
    return BasebandSignal(_preamble_samples(cfg), cfg.sample_rate)


def apply_pa(signal: BasebandSignal, dev: DeviceProfile, power: PowerLevel) -> BasebandSignal:
    """
    Безынерционный PA по Saleh.

    Вход масштабируется до амплитуды, соответствующей tx_power_dbm,
    затем на каждый отсчёт: AM/AM усиление и AM/PM поворот.
    """
    x = power.drive_amplitude * signal.samples
    r = np.abs(x)
    p = dev.pa_params
    # A(r)/r, чтобы не делить на ноль при r = 0
    gain = p.alpha_a / (1 + p.beta_a * r**2)
    out = x * gain * np.exp(1j * p.am_pm(r))
    return BasebandSignal(out, signal.sample_rate)


def apply_channel(
    signal: BasebandSignal,
    ch: ChannelRealization,
    seed: int = 0,
    start: int = 0,
) -> BasebandSignal:
    """
    Канал: свёртка с отводами, вариация усиления, Доплер, AWGN.

    start: индекс первого отсчёта на общей временной оси пары;
    шум добавляется относительно мощности сигнала после канала.
    """
    x = signal.samples
    n = x.size
    fs = signal.sample_rate
    y = np.convolve(x, ch.fir())[:n]
    y = y * ch.time_variation(start, n, fs) * ch.doppler_phasor(start, n, fs)

    if math.isfinite(ch.snr_db):
        power = float(np.mean(np.abs(y) ** 2))
        noise_power = power / 10 ** (ch.snr_db / 10)
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        y = y + math.sqrt(noise_power / 2) * noise

    return BasebandSignal(y, fs)


def synthesize_capture(
    dev: DeviceProfile,
    ch: ChannelRealization,
    cfg: LoRaConfig,
    seed: int,
    levels: Tuple[PowerLevel, PowerLevel] = (HIGH_POWER, LOW_POWER),
    claimed_id: Optional[str] = None,
) -> CapturePair:
    """
    Пара high/low через одну и ту же реализацию канала.

    low идёт сразу после high: траектория вариации продолжается,
    шум у пакетов независимый (разные дочерние seed'ы).
    """
    high_level, low_level = levels
    preamble = generate_preamble(cfg)
    n = len(preamble)
    noise_seeds = np.random.SeedSequence(seed).generate_state(2)

    high = apply_channel(apply_pa(preamble, dev, high_level), ch, int(noise_seeds[0]), start=0)
    low = apply_channel(apply_pa(preamble, dev, low_level), ch, int(noise_seeds[1]), start=n)

    meta = ch.describe()
    meta["power_dbm"] = [high_level.tx_power_dbm, low_level.tx_power_dbm]
    return CapturePair(
        high=high,
        low=low,
        device_id=dev.device_id,
        claimed_id=claimed_id or dev.device_id,
        channel_meta=meta,
        capture_seed=seed,
    )


def sample_device_population(
    n: int,
    seed: int,
    prefix: str = "D",
    nominal: SalehParams = NOMINAL_SALEH,
    max_perturbation: float = MAX_PERTURBATION,
) -> List[DeviceProfile]:
    """
    n устройств вокруг общих номинальных параметров Saleh.

    Каждый коэффициент = номинал * (1 + delta), delta ~ U(-m, m).
    Метки: prefix + порядковый номер ("L01", "R02", ...).
    """
    if n < 1:
        raise ConfigError(f"population size must be at least 1, got {n}")
    if not 0 <= max_perturbation <= MAX_PERTURBATION:
        raise ConfigError(f"perturbation bound must be within ±{MAX_PERTURBATION}")

    rng = np.random.default_rng(seed)
    devices = []
    for i in range(n):
        pert_seed = int(rng.integers(0, 2**31 - 1))
        delta = np.random.default_rng(pert_seed).uniform(-max_perturbation, max_perturbation, 4)
        params = SalehParams(*(nominal.as_vector() * (1 + delta)))
        devices.append(
            DeviceProfile(
                device_id=f"{prefix}{i + 1:02d}",
                pa_params=params,
                perturbation_seed=pert_seed,
                perturbation=tuple(float(d) for d in delta),
            )
        )
    return devices


def sample_channel(
    env: str,
    seed: int,
    presets: Optional[Dict[str, EnvironmentPreset]] = None,
) -> ChannelRealization:
    """Случайная реализация канала по пресету среды."""
    presets = presets if presets is not None else load_environment_presets()
    if env not in presets:
        raise ConfigError(f"unknown environment {env!r}, expected one of {sorted(presets)}")
    preset = presets[env]
    rng = np.random.default_rng(seed)

    n_taps = int(rng.integers(preset.tap_count[0], preset.tap_count[1] + 1))
    delays = [0]
    if n_taps > 1:
        extra = rng.choice(np.arange(1, preset.max_delay + 1), size=n_taps - 1, replace=False)
        delays += sorted(int(d) for d in extra)
    delays_arr = np.array(delays, dtype=float)

    # экспоненциальный профиль мощности, нормированный на 1
    power = np.exp(-delays_arr / preset.delay_decay)
    power /= power.sum()
    if preset.rayleigh:
        gains = np.sqrt(power / 2) * (rng.standard_normal(n_taps) + 1j * rng.standard_normal(n_taps))
    else:
        gains = np.sqrt(power) + 0j

    def draw(bounds: Tuple[float, float]) -> float:
        return float(rng.uniform(bounds[0], bounds[1]))

    return ChannelRealization(
        taps=tuple((int(d), complex(g)) for d, g in zip(delays, gains)),
        doppler_hz=draw(preset.doppler_hz),
        snr_db=draw(preset.snr_db),
        fading_rate_hz=draw(preset.fading_rate_hz),
        fading_depth=draw(preset.fading_depth),
        fading_phase=float(rng.uniform(0, 2 * np.pi)),
        env=env,
    )


@dataclass(frozen=True)
class CaptureJob:
    """Задание на синтез одной пары: для пакетной генерации."""

    device: DeviceProfile
    env: str
    seed: int
    claimed_id: Optional[str] = None


def synthesize_batch(
    jobs: Sequence[CaptureJob],
    cfg: LoRaConfig,
    presets: Dict[str, EnvironmentPreset],
    workers: int = 1,
) -> List[CapturePair]:
    """
    Пакетный синтез. Порядок результата = порядок заданий.

    Канал для каждой пары берётся из того же seed'а, что и шум, поэтому
    задания независимы и могут идти параллельно.
    """

    def run(job: CaptureJob) -> CapturePair:
        ch = sample_channel(job.env, job.seed, presets)
        return synthesize_capture(job.device, ch, cfg, job.seed, claimed_id=job.claimed_id)

    if workers <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


def save_captures(pairs: Iterable[CapturePair], directory: Path, extra: Optional[dict] = None) -> Path:
    """
    Выгружает пары на диск.

    directory/manifest.jsonl: по строке на пару;
    directory/iq/<index>.iq : high, затем low, interleaved float32 LE.
    """
    directory = Path(directory)
    (directory / "iq").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w") as f:
        for i, pair in enumerate(pairs):
            payload = f"iq/{i:06d}.iq"
            write_iq(directory / payload, np.concatenate([pair.high.samples, pair.low.samples]))
            record = {
                "index": i,
                "device_id": pair.device_id,
                "claimed_id": pair.claimed_id,
                "seed": pair.capture_seed,
                "env": pair.channel_meta.get("env"),
                "power_dbm": pair.channel_meta.get("power_dbm"),
                "channel": pair.channel_meta,
                "sample_rate": pair.high.sample_rate,
                "length": len(pair.high),
                "payload": payload,
            }
            if extra:
                record.update(extra)
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def load_captures(directory: Path) -> List[CapturePair]:
    """Обратная операция к save_captures."""
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"capture manifest not found: {manifest}")
    pairs = []
    with open(manifest, "r") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            length = int(record["length"])
            samples = read_iq(directory / record["payload"])
            if samples.size != 2 * length:
                raise DataError(f"{record['payload']}: expected {2 * length} samples, got {samples.size}")
            fs = float(record["sample_rate"])
            pairs.append(
                CapturePair(
                    high=BasebandSignal(samples[:length], fs),
                    low=BasebandSignal(samples[length:], fs),
                    device_id=record["device_id"],
                    claimed_id=record["claimed_id"],
                    channel_meta=record.get("channel", {}),
                    capture_seed=int(record["seed"]),
                )
            )
    return pairs
