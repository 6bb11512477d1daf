"""
Признаки: спектрограммы, фильтр искажённых пар, PA nonlinearity quotient.

    CapturePair -> stft(high), stft(low)
                -> correlation_filter (отбрасываем пары, где канал "дёрнулся")
                -> quotient = S_h ./ S_l в dB (канал сокращается)
                -> rasterize -> FeatureImage для CNN
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window
from scipy.stats import pearsonr

from rffi.errors import ConfigError, DataError, UndefinedCorrelationError
from rffi.signal_sim import (
    CapturePair,
    BasebandSignal,
    DeviceProfile,
    LoRaConfig,
    sample_channel,
    synthesize_capture,
)

logger = logging.getLogger("rffi")

DEFAULT_GUARD_EPSILON = 1e-6
DEFAULT_THETA = 0.05
# запас на округление: scipy даёт 0.9999999999999998 для c*x
CORRELATION_ATOL = 1e-12


@dataclass(frozen=True)
class StftConfig:
    """Окно длины W, шаг R, размер FFT = W."""

    window_length: int = 1024
    hop: int = 512
    window: str = "hamming"

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ConfigError(f"window length must be positive, got {self.window_length}")
        if not 1 <= self.hop <= self.window_length:
            raise ConfigError(f"hop must be in [1, W], got {self.hop}")

    @property
    def fft_size(self) -> int:
        return self.window_length

    def coefficients(self) -> np.ndarray:
        return get_window(self.window, self.window_length, fftbins=True)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """W x M комплексная матрица; строки: частотные бины (0..W-1, как в FFT)."""

    bins: np.ndarray
    config: StftConfig
    power_tag: str = ""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bins.shape

    def db(self) -> np.ndarray:
        """10*log10(|S|^2), нули зажаты до наименьшего положительного float."""
        power = np.maximum(np.abs(self.bins) ** 2, np.finfo(float).tiny)
        return 10 * np.log10(power)


@dataclass(frozen=True, eq=False)
class QuotientFingerprint:
    """Q в dB; guarded: бины, где знаменатель почти ноль (там 0 dB)."""

    q_db: np.ndarray
    device_id: str
    claimed_id: str
    guarded: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """H x H, целые уровни в [0, 2^depth - 1]."""

    pixels: np.ndarray
    depth: int = 8
    source: str = "quotient"

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def as_float(self) -> np.ndarray:
        """Пиксели в [0, 1]: вход CNN."""
        return self.pixels.astype(np.float32) / float(2**self.depth - 1)


@dataclass(frozen=True)
class FilterDecision:
    """Решение фильтра по корреляции пиков."""

    accepted: bool
    rho: float
    rho_d: float


def frame_count(
    K: int, SF: int, B: float, f_S: float, W: int, R: int
) -> int:
    """M = floor((K * 2^SF / B * f_S - W) / R) + 1."""
    if min(K, SF, B, f_S, W, R) <= 0:
        raise DataError("frame_count arguments must all be positive")
    n = K * 2**SF / B * f_S
    if n < W:
        raise DataError(f"signal of {n:g} samples is shorter than one window ({W})")
    return int(math.floor((n - W) / R)) + 1


def stft(signal: BasebandSignal, cfg: StftConfig) -> Spectrogram:
    """
    S[w, m] = sum_n s[n + m*R] * g[n] * exp(-j*2*pi*w*n/W).

    Индексация с нуля; кадров ровно floor((N - W) / R) + 1, хвост отбрасывается.
    """
    samples = signal.samples if isinstance(signal, BasebandSignal) else np.asarray(signal)
    W, R = cfg.window_length, cfg.hop
    if samples.size < W:
        raise DataError(f"signal of {samples.size} samples is shorter than window {W}")

    frames = sliding_window_view(samples, W)[::R]
    spectrum = np.fft.fft(frames * cfg.coefficients(), n=cfg.fft_size, axis=1)
    return Spectrogram(bins=spectrum.T, config=cfg)


def peak_sequence(spec: Spectrogram) -> np.ndarray:
    """max_w |S[w, m]|: по одному значению на кадр."""
    return np.abs(spec.bins).max(axis=0)


def correlation(s_h: Spectrogram, s_l: Spectrogram) -> float:
    """Pearson между последовательностями пиков high и low."""
    if s_h.shape != s_l.shape:
        raise DataError(f"spectrogram shapes differ: {s_h.shape} vs {s_l.shape}")
    peaks_h = peak_sequence(s_h)
    peaks_l = peak_sequence(s_l)
    if peaks_h.size < 2 or np.ptp(peaks_h) == 0 or np.ptp(peaks_l) == 0:
        raise UndefinedCorrelationError("peak sequence has zero variance, correlation is undefined")
    rho, _ = pearsonr(peaks_h, peaks_l)
    return float(rho)


def correlation_filter(
    s_h: Spectrogram,
    s_l: Spectrogram,
    rho_ref: float,
    theta: float = DEFAULT_THETA,
) -> FilterDecision:
    """
    Отбраковка пар, искажённых изменением канала между/внутри пакетов.

    rho_d = |rho_ref - rho|; принимаем, если rho_d <= theta.
    """
    if not -1 <= rho_ref <= 1:
        raise DataError(f"reference correlation must be in [-1, 1], got {rho_ref}")
    rho = correlation(s_h, s_l)
    rho_d = abs(rho_ref - rho)
    return FilterDecision(accepted=rho_d <= theta + CORRELATION_ATOL, rho=rho, rho_d=rho_d)


def quotient(
    s_h: Spectrogram,
    s_l: Spectrogram,
    device_id: str = "",
    claimed_id: Optional[str] = None,
    epsilon: float = DEFAULT_GUARD_EPSILON,
) -> QuotientFingerprint:
    """
    Q = S_h ./ S_l, Q~ = 10*log10(|Q|^2).

    Бины с |S| <= epsilon * max|S| (в числителе или знаменателе) маскируются
    и получают 0 dB: вне мгновенной полосы чирпа там только утечка.
    """
    if s_h.shape != s_l.shape:
        raise DataError(f"spectrogram shapes differ: {s_h.shape} vs {s_l.shape}")
    mag_h = np.abs(s_h.bins)
    mag_l = np.abs(s_l.bins)
    guarded = (mag_l <= epsilon * mag_l.max()) | (mag_h <= epsilon * mag_h.max())

    ratio = mag_h / np.where(guarded, 1.0, mag_l)
    q_db = np.where(guarded, 0.0, 20 * np.log10(np.where(guarded, 1.0, ratio)))
    return QuotientFingerprint(
        q_db=q_db,
        device_id=device_id,
        claimed_id=claimed_id if claimed_id is not None else device_id,
        guarded=guarded,
    )


def band_rows(cfg: StftConfig, bandwidth: float, sample_rate: float) -> np.ndarray:
    """Индексы бинов занятой полосы |f| <= B/2 в порядке возрастания частоты."""
    freqs = np.fft.fftfreq(cfg.fft_size, d=1.0 / sample_rate)
    order = np.argsort(freqs, kind="stable")
    return order[np.abs(freqs[order]) <= bandwidth / 2]


def crop_to_band(matrix: np.ndarray, rows: Optional[np.ndarray]) -> np.ndarray:
    return matrix if rows is None else matrix[rows]


def corpus_clip_range(
    matrices: Iterable[np.ndarray], percentiles: Tuple[float, float] = (1.0, 99.0)
) -> Tuple[float, float]:
    """[p1, p99] по всем значениям обучающего корпуса: фиксируется на эксперимент."""
    values = [np.asarray(m, dtype=np.float64).ravel() for m in matrices]
    if not values:
        raise DataError("cannot compute a clip range from an empty corpus")
    lo, hi = np.percentile(np.concatenate(values), percentiles)
    return float(lo), float(hi)


def resample(matrix: np.ndarray, size: int) -> np.ndarray:
    """Билинейный ресэмплинг в size x size (с антиалиасингом при сжатии)."""
    tensor = torch.from_numpy(np.ascontiguousarray(matrix, dtype=np.float64))[None, None]
    out = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def rasterize(
    matrix: np.ndarray,
    size: int,
    depth: int = 8,
    clip_range: Optional[Tuple[float, float]] = None,
    source: str = "quotient",
) -> FeatureImage:
    """
    Вещественная матрица -> H x H картинка с 2^depth уровнями.

    Сначала клип в [p1, p99] корпуса, потом ресэмплинг, потом квантование.
    Без clip_range берётся [min, max] самой матрицы.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise DataError(f"expected a nonempty 2-D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise DataError("matrix contains non-finite values")
    if not 1 <= depth <= 16:
        raise ConfigError(f"bit depth must be in 1..16, got {depth}")

    lo, hi = clip_range if clip_range is not None else (float(matrix.min()), float(matrix.max()))
    if not hi > lo:
        raise DataError(f"degenerate dynamic range [{lo}, {hi}]")

    scaled = (np.clip(matrix, lo, hi) - lo) / (hi - lo)
    levels = 2**depth - 1
    pixels = np.rint(np.clip(resample(scaled, size), 0.0, 1.0) * levels)
    dtype = np.uint8 if depth <= 8 else np.uint16
    return FeatureImage(pixels=pixels.astype(dtype), depth=depth, source=source)


def spectrogram_feature(
    spec: Spectrogram,
    size: int,
    depth: int = 8,
    clip_range: Optional[Tuple[float, float]] = None,
    rows: Optional[np.ndarray] = None,
) -> FeatureImage:
    """Обычная спектрограмма в dB: признак для сравнительного классификатора."""
    return rasterize(crop_to_band(spec.db(), rows), size, depth, clip_range, source="spectrogram")


def reference_correlation(
    dev: DeviceProfile,
    cfg: LoRaConfig,
    stft_cfg: StftConfig,
    seed: int,
    presets=None,
) -> float:
    """rho_ref: корреляция пиков high/low на пресете безэховой камеры."""
    ch = sample_channel("chamber", seed, presets)
    pair = synthesize_capture(dev, ch, cfg, seed)
    return correlation(stft(pair.high, stft_cfg), stft(pair.low, stft_cfg))


@dataclass
class FeatureExtractor:
    """
    Сборка признаков из CapturePair по настройкам эксперимента.

    Держит rho_ref/theta для фильтра и строки полосы для кропа.
    """

    stft_config: StftConfig
    rho_ref: float
    theta: float = DEFAULT_THETA
    epsilon: float = DEFAULT_GUARD_EPSILON
    rows: Optional[np.ndarray] = None
    rejected: int = field(default=0, init=False)

    def matrices(self, pair: CapturePair) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """
        (quotient dB, спектрограмма high в dB) или None, если пара отбракована.

        Вырожденная корреляция тоже считается отбраковкой.
        """
        s_h = stft(pair.high, self.stft_config)
        s_l = stft(pair.low, self.stft_config)
        try:
            decision = correlation_filter(s_h, s_l, self.rho_ref, self.theta)
        except UndefinedCorrelationError:
            decision = FilterDecision(accepted=False, rho=float("nan"), rho_d=float("nan"))
        if not decision.accepted:
            self.rejected += 1
            logger.debug(f"{pair.device_id} seed={pair.capture_seed} rejected, rho_d={decision.rho_d:.4f}")
            return None
        q = quotient(s_h, s_l, pair.device_id, pair.claimed_id, self.epsilon)
        return crop_to_band(q.q_db, self.rows), crop_to_band(s_h.db(), self.rows)

