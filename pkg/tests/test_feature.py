"""STFT, фильтр пар, quotient, растеризация."""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rffi.errors import ConfigError, DataError, UndefinedCorrelationError
from rffi.feature import (
    FeatureExtractor,
    Spectrogram,
    StftConfig,
    band_rows,
    correlation,
    correlation_filter,
    corpus_clip_range,
    frame_count,
    quotient,
    rasterize,
    reference_correlation,
    spectrogram_feature,
    stft,
)
from rffi.signal_sim import (
    BasebandSignal,
    ChannelRealization,
    LoRaConfig,
    sample_channel,
    synthesize_capture,
)


@pytest.mark.parametrize(
    "args, expected",
    [
        ((10, 10, 62.5e3, 1e6, 1024, 512), 319),
        ((1, 7, 125e3, 128e3, 128, 128), 1),
        ((2, 8, 62.5e3, 250e3, 256, 128), 15),
    ],
)
def test_frame_count(args, expected):
    assert frame_count(*args) == expected


def test_frame_count_rejects_signal_shorter_than_window():
    with pytest.raises(DataError):
        frame_count(1, 7, 125e3, 125e3, 256, 128)


def test_stft_frame_count_matches_preamble_config():
    cfg = LoRaConfig(spreading_factor=10, bandwidth=62.5e3, sample_rate=1e6, preamble_symbols=10)
    spec = stft(BasebandSignal(np.ones(cfg.num_samples), cfg.sample_rate), StftConfig())
    assert spec.shape == (1024, 319)


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(0)
    cfg = StftConfig(window_length=64, hop=24)
    x = rng.standard_normal(400) + 1j * rng.standard_normal(400)
    spec = stft(BasebandSignal(x, 1.0), cfg)
    g = cfg.coefficients()
    n = np.arange(cfg.window_length)
    frames = (x.size - cfg.window_length) // cfg.hop + 1
    oracle = np.empty((cfg.window_length, frames), dtype=complex)
    for m in range(frames):
        segment = x[m * cfg.hop : m * cfg.hop + cfg.window_length] * g
        for w in range(cfg.window_length):
            oracle[w, m] = np.sum(segment * np.exp(-2j * np.pi * w * n / cfg.window_length))
    assert_allclose(spec.bins, oracle, rtol=1e-9, atol=1e-9 * np.abs(oracle).max())


def test_stft_of_zero_signal_is_zero():
    spec = stft(BasebandSignal(np.zeros(512), 1.0), StftConfig(128, 64))
    assert not np.any(spec.bins)


def test_stft_pure_tone_lands_in_its_bin():
    W, k = 64, 5
    x = np.exp(2j * np.pi * k * np.arange(W) / W)
    spec = stft(BasebandSignal(x, 1.0), StftConfig(window_length=W, hop=W, window="boxcar"))
    mags = np.abs(spec.bins[:, 0])
    assert np.argmax(mags) == k
    assert mags[k] == pytest.approx(W, rel=1e-9)


def test_stft_rejects_short_signal():
    with pytest.raises(DataError):
        stft(BasebandSignal(np.ones(10), 1.0), StftConfig(64, 32))


def test_stft_config_validation():
    with pytest.raises(ConfigError):
        StftConfig(window_length=64, hop=65)
    with pytest.raises(ConfigError):
        StftConfig(window_length=64, hop=0)


def test_hamming_window_range():
    g = StftConfig().coefficients()
    assert g.size == 1024
    assert g.min() > 0 and g.max() <= 1.08


def _random_spec(seed: int = 0, cfg: StftConfig = StftConfig(64, 32)) -> Spectrogram:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
    return stft(BasebandSignal(x, 1.0), cfg)


def test_scaled_spectrogram_is_perfectly_correlated():
    s_h = _random_spec()
    s_l = Spectrogram(bins=0.3 * s_h.bins, config=s_h.config)
    decision = correlation_filter(s_h, s_l, rho_ref=1.0, theta=0.0)
    assert decision.accepted
    assert decision.rho == pytest.approx(1.0)
    assert decision.rho_d == pytest.approx(0.0, abs=1e-12)


def test_constant_peaks_make_correlation_undefined():
    zero = stft(BasebandSignal(np.zeros(512), 1.0), StftConfig(64, 32))
    with pytest.raises(UndefinedCorrelationError):
        correlation(zero, zero)


def test_filter_rejects_bad_reference():
    s = _random_spec()
    with pytest.raises(DataError):
        correlation_filter(s, s, rho_ref=1.5)


def test_filter_accepts_static_pairs_and_rejects_gain_steps(device, small_lora, small_stft):
    rho_ref = reference_correlation(device, small_lora, small_stft, seed=0)
    n = small_lora.num_samples
    static = ChannelRealization(taps=((0, 1 + 0j),), snr_db=40.0)
    # скачок x5 посреди low-пакета
    stepped = ChannelRealization(taps=((0, 1 + 0j),), snr_db=40.0, gain_step=(n + n // 2, 5.0))

    accepted = []
    for seed in range(1, 21):
        pair = synthesize_capture(device, static, small_lora, seed)
        accepted.append(correlation_filter(stft(pair.high, small_stft), stft(pair.low, small_stft), rho_ref).accepted)
    assert np.mean(accepted) >= 0.95

    rejected = []
    for seed in range(1, 21):
        pair = synthesize_capture(device, stepped, small_lora, seed)
        decision = correlation_filter(stft(pair.high, small_stft), stft(pair.low, small_stft), rho_ref)
        rejected.append(not decision.accepted)
    assert np.mean(rejected) >= 0.95


def test_quotient_of_identical_spectrograms_is_zero_db():
    s = _random_spec()
    assert_array_equal(quotient(s, s).q_db, 0.0)


def test_quotient_of_scaled_spectrogram_is_20_db():
    s_l = _random_spec()
    s_h = Spectrogram(bins=10 * s_l.bins, config=s_l.config)
    q = quotient(s_h, s_l, device_id="L01")
    assert_allclose(q.q_db[~q.guarded], 20.0, atol=1e-9)
    assert q.claimed_id == "L01"


def test_quotient_guards_near_zero_denominator():
    s_l = _random_spec()
    bins = s_l.bins.copy()
    bins[3, 4] = 0.0
    q = quotient(s_l, Spectrogram(bins=bins, config=s_l.config))
    assert q.guarded[3, 4]
    assert q.q_db[3, 4] == 0.0
    assert np.all(np.isfinite(q.q_db))


def test_quotient_rejects_shape_mismatch():
    with pytest.raises(DataError):
        quotient(_random_spec(cfg=StftConfig(64, 32)), _random_spec(cfg=StftConfig(64, 16)))


def _noise_free_pair(dev, channel, lora, stft_cfg):
    pair = synthesize_capture(dev, channel, lora, seed=0)
    return stft(pair.high, stft_cfg), stft(pair.low, stft_cfg)


def test_quotient_cancels_static_channel_but_spectrogram_does_not(device, small_lora, small_stft):
    ch1 = ChannelRealization(taps=((0, 1 + 0j),))
    ch2 = ChannelRealization(taps=((0, 0.8 + 0j), (3, 0.5j)), doppler_hz=20.0)
    h1, l1 = _noise_free_pair(device, ch1, small_lora, small_stft)
    h2, l2 = _noise_free_pair(device, ch2, small_lora, small_stft)
    q1, q2 = quotient(h1, l1), quotient(h2, l2)
    unguarded = ~q1.guarded & ~q2.guarded
    assert unguarded.any()
    channel_dev = np.max(np.abs(q1.q_db - q2.q_db)[unguarded])
    assert channel_dev < 1e-6
    assert np.mean(np.abs(h1.db() - h2.db())) > 0.1


def test_quotient_separates_devices(device, other_device, small_lora, small_stft):
    ch = ChannelRealization(taps=((0, 1 + 0j),))
    qa = quotient(*_noise_free_pair(device, ch, small_lora, small_stft))
    qb = quotient(*_noise_free_pair(other_device, ch, small_lora, small_stft))
    both = ~qa.guarded & ~qb.guarded
    assert np.mean(np.abs(qa.q_db - qb.q_db)[both]) > 1e-3


def test_rasterize_saturates_at_upper_clip():
    image = rasterize(np.full((6, 6), 5.0), size=8, depth=8, clip_range=(1.0, 5.0))
    assert image.pixels.dtype == np.uint8
    assert image.size == 8
    assert_array_equal(image.pixels, 255)


def test_rasterize_ramp_interpolates_monotonically():
    image = rasterize(np.array([[0.0, 1.0], [0.0, 1.0]]), size=4, depth=8)
    row = image.pixels[0].astype(int)
    assert row[0] == 0 and row[-1] == 255
    assert np.all(np.diff(row) > 0)
    assert_array_equal(image.pixels, np.tile(image.pixels[0], (4, 1)))


def test_rasterize_preserves_rank_order_at_native_size():
    rng = np.random.default_rng(4)
    matrix = rng.standard_normal((16, 16))
    pixels = rasterize(matrix, size=16, depth=8).pixels.astype(int).ravel()
    lo, hi = matrix.min(), matrix.max()
    scaled = ((matrix - lo) / (hi - lo)).ravel()
    step = 1 / 255
    for i in range(scaled.size):
        wider = scaled - scaled[i] > 2 * step
        assert np.all(pixels[wider] > pixels[i])


def test_rasterize_sixteen_bit_depth():
    image = rasterize(np.array([[0.0, 1.0], [2.0, 3.0]]), size=2, depth=16)
    assert image.pixels.dtype == np.uint16
    assert image.pixels.max() == 65535
    assert_allclose(image.as_float().max(), 1.0)


def test_rasterize_rejects_degenerate_input():
    with pytest.raises(DataError):
        rasterize(np.ones((4, 4)), size=4)
    with pytest.raises(DataError):
        rasterize(np.array([[0.0, np.inf]]), size=4)
    with pytest.raises(DataError):
        rasterize(np.ones((4, 4)), size=4, clip_range=(1.0, 1.0))
    with pytest.raises(ConfigError):
        rasterize(np.eye(4), size=4, depth=0)


def test_corpus_clip_range():
    lo, hi = corpus_clip_range([np.arange(50.0), np.arange(50.0, 101.0)], (1.0, 99.0))
    assert lo == pytest.approx(1.0)
    assert hi == pytest.approx(99.0)
    with pytest.raises(DataError):
        corpus_clip_range([])


def test_spectrogram_feature_of_zero_spectrogram_is_uniform():
    zero = stft(BasebandSignal(np.zeros(512), 1.0), StftConfig(64, 32))
    image = spectrogram_feature(zero, size=8, clip_range=(-100.0, 0.0))
    assert image.source == "spectrogram"
    assert len(np.unique(image.pixels)) == 1


def test_spectrogram_feature_sees_the_channel(device, small_lora, small_stft):
    rows = band_rows(small_stft, small_lora.bandwidth, small_lora.sample_rate)
    images = []
    for env in ("chamber", "outdoor"):
        pair = synthesize_capture(device, sample_channel(env, 3), small_lora, seed=3)
        images.append(spectrogram_feature(stft(pair.high, small_stft), 24, clip_range=(-40.0, 60.0), rows=rows))
    assert np.mean(np.abs(images[0].pixels.astype(int) - images[1].pixels.astype(int))) > 0

    pair = synthesize_capture(device, sample_channel("indoor", 5), small_lora, seed=5)
    a = spectrogram_feature(stft(pair.high, small_stft), 24, clip_range=(-40.0, 60.0), rows=rows)
    b = spectrogram_feature(stft(pair.high, small_stft), 24, clip_range=(-40.0, 60.0), rows=rows)
    assert_array_equal(a.pixels, b.pixels)


def test_band_rows_cover_occupied_band_in_frequency_order(small_lora, small_stft):
    rows = band_rows(small_stft, small_lora.bandwidth, small_lora.sample_rate)
    freqs = np.fft.fftfreq(small_stft.fft_size, d=1 / small_lora.sample_rate)[rows]
    assert np.all(np.diff(freqs) > 0)
    assert np.all(np.abs(freqs) <= small_lora.bandwidth / 2)
    # 500 кГц / 128 бинов, полоса 125 кГц -> 33 бина
    assert rows.size == 33


def test_extractor_returns_cropped_matrices_and_counts_rejections(device, small_lora, small_stft):
    rows = band_rows(small_stft, small_lora.bandwidth, small_lora.sample_rate)
    pair = synthesize_capture(device, sample_channel("chamber", 1), small_lora, seed=1)

    accepting = FeatureExtractor(small_stft, rho_ref=0.0, theta=2.0, rows=rows)
    q_db, s_db = accepting.matrices(pair)
    frames = frame_count(4, 7, 125e3, 500e3, 128, 64)
    assert q_db.shape == s_db.shape == (33, frames)
    assert accepting.rejected == 0

    strict = FeatureExtractor(small_stft, rho_ref=-1.0, theta=0.0, rows=rows)
    assert strict.matrices(pair) is None
    assert strict.rejected == 1
