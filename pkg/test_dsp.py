"""
Tests for WAV I/O, resampling, log-Mel features and normalisation.
"""
import numpy as np
import pytest
import soundfile as sf

from project_tools.dsp import (
    HOP_LENGTH,
    LOG_FLOOR,
    N_FFT,
    SAMPLE_RATE,
    FeatureStats,
    Waveform,
    WavFormatError,
    denormalize,
    load_wav,
    log_mel,
    mel_filterbank,
    n_frames,
    normalize,
    resample,
    spec_mae,
    write_wav,
)
from project_tools.numgrad import Rng


def _noise(n, seed=0, level=0.5):
    return Waveform(Rng(seed).uniform(n, -level, level), SAMPLE_RATE)


def _sine(freq, rate, seconds=1.0, amplitude=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), rate)


# --- WAV I/O ------------------------------------------------------------------


def test_zero_file_loads_as_zeros(tmp_path):
    path = tmp_path / "zeros.wav"
    sf.write(path, np.zeros(100, dtype=np.int16), SAMPLE_RATE, subtype="PCM_16")
    wave = load_wav(path)
    assert wave.sample_rate_hz == SAMPLE_RATE
    assert np.array_equal(wave.samples, np.zeros(100))


def test_sample_scale_law(tmp_path):
    path = tmp_path / "half.wav"
    sf.write(path, np.array([16384, -16384, 0], dtype=np.int16), SAMPLE_RATE, subtype="PCM_16")
    assert load_wav(path).samples.tolist() == [0.5, -0.5, 0.0]


def test_write_then_load_within_one_quantisation_step(tmp_path):
    wave = _noise(4000, seed=3, level=0.9)
    path = tmp_path / "noise.wav"
    write_wav(path, wave)
    assert np.max(np.abs(load_wav(path).samples - wave.samples)) <= 1 / 32768


def test_stereo_file_is_rejected(tmp_path):
    path = tmp_path / "stereo.wav"
    sf.write(path, np.zeros((50, 2), dtype=np.int16), SAMPLE_RATE, subtype="PCM_16")
    with pytest.raises(WavFormatError, match="channels"):
        load_wav(path)


def test_float_codec_is_rejected(tmp_path):
    path = tmp_path / "float.wav"
    sf.write(path, np.zeros(50, dtype=np.float32), SAMPLE_RATE, subtype="FLOAT")
    with pytest.raises(WavFormatError, match="codec"):
        load_wav(path)


def test_garbage_and_missing_files_are_rejected(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"RIFF\x00\x00")
    with pytest.raises(WavFormatError):
        load_wav(path)
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "missing.wav")


def test_file_cut_mid_payload_is_rejected(tmp_path):
    path = tmp_path / "cut.wav"
    write_wav(path, _noise(1000, seed=2))
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(WavFormatError, match="truncated"):
        load_wav(path)


# --- resampling ---------------------------------------------------------------


def test_resample_length():
    out = resample(Waveform(np.zeros(48000), 48000), 16000)
    assert len(out) == 16000
    assert out.sample_rate_hz == 16000


@pytest.mark.parametrize("rate", [8000, 22050, 44100, 48000])
def test_resample_preserves_dc(rate):
    out = resample(Waveform(np.full(rate // 2, 0.7), rate), 16000)
    assert len(out) == 8000
    interior = out.samples[400:-400]
    assert np.max(np.abs(interior - 0.7)) < 1e-3


def test_upsampled_sine_keeps_its_amplitude():
    out = resample(_sine(1000.0, 8000), 16000)
    expected = _sine(1000.0, 16000).samples
    interior = slice(200, -200)
    np.testing.assert_allclose(out.samples[interior], expected[interior], atol=5e-3)


def test_resample_preserves_sine():
    out = resample(_sine(1000.0, 48000), 16000)
    expected = _sine(1000.0, 16000).samples
    interior = slice(200, -200)
    corr = np.corrcoef(out.samples[interior], expected[interior])[0, 1]
    assert corr >= 0.999


def test_resample_rejects_bad_rate():
    with pytest.raises(ValueError):
        resample(_noise(100), 0)


# --- log-Mel ------------------------------------------------------------------


def test_one_second_gives_98_frames():
    assert log_mel(_noise(16000)).shape == (98, 80)


@pytest.mark.parametrize("n", [400, 401, 559, 560, 561, 1000, 4321])
def test_frame_count_formula(n):
    assert log_mel(_noise(n, seed=n)).shape[0] == (n - 400) // 160 + 1 == n_frames(n)


def test_silence_hits_the_floor():
    spec = log_mel(Waveform(np.zeros(2000), SAMPLE_RATE))
    assert np.all(spec == LOG_FLOOR)


def test_short_input_is_rejected():
    with pytest.raises(ValueError, match="shorter than one window"):
        log_mel(_noise(399))


def test_tone_peak_bin_is_stable():
    spec = log_mel(_sine(1000.0, SAMPLE_RATE))
    peaks = np.argmax(spec, axis=1)
    assert np.all(peaks == peaks[0])


def test_hop_shift_shifts_frames():
    wave = _noise(6000, seed=9)
    shifted = Waveform(wave.samples[HOP_LENGTH:], SAMPLE_RATE)
    a, b = log_mel(wave), log_mel(shifted)
    np.testing.assert_allclose(b, a[1 : 1 + b.shape[0]], rtol=0, atol=1e-12)


def test_filterbank_covers_the_open_band():
    fb = mel_filterbank()
    assert fb.shape == (80, N_FFT // 2 + 1)
    assert np.all(fb >= 0)
    weights = fb.sum(axis=0)
    # bins strictly between 0 Hz and Nyquist
    assert np.all(weights[1:-1] > 0)


# --- MAE and normalisation ----------------------------------------------------


def test_spec_mae_basics():
    a = Rng(1).normal(40 * 80).reshape(40, 80)
    assert spec_mae(a, a) == 0.0
    assert spec_mae(a, a + 1.0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        spec_mae(a, a[:-1])


def test_spec_mae_matches_loop_oracle():
    rng = Rng(2)
    a = rng.normal(7 * 80).reshape(7, 80)
    b = rng.normal(7 * 80).reshape(7, 80)
    total = 0.0
    for t in range(7):
        for f in range(80):
            total += abs(a[t, f] - b[t, f])
    assert spec_mae(a, b) == pytest.approx(total / (7 * 80), abs=1e-12)


def test_spec_mae_is_a_metric_on_random_triples():
    rng = Rng(3)
    for _ in range(20):
        a, b, c = (rng.normal(5 * 80).reshape(5, 80) for _ in range(3))
        assert spec_mae(a, b) == pytest.approx(spec_mae(b, a), abs=1e-15)
        assert spec_mae(a, c) <= spec_mae(a, b) + spec_mae(b, c) + 1e-12


def test_normalize_round_trip_and_zero_mean():
    rng = Rng(4)
    specs = [rng.normal(n * 80).reshape(n, 80) * 3.0 - 7.0 for n in (10, 20, 13)]
    stats = FeatureStats.from_specs(specs)
    stacked = np.concatenate([normalize(s, stats) for s in specs])
    assert np.max(np.abs(stacked.mean(axis=0))) <= 1e-6
    np.testing.assert_allclose(denormalize(normalize(specs[0], stats), stats), specs[0], atol=1e-9)


def test_constant_bin_uses_std_floor():
    spec = np.zeros((5, 80))
    spec[:, 3] = 4.0
    stats = FeatureStats.from_specs([spec])
    assert np.all(normalize(spec, stats)[:, 3] == 0.0)


def test_stats_need_80_bins():
    with pytest.raises(ValueError):
        FeatureStats(np.zeros(79), np.ones(79))


def test_stats_tensor_names():
    stats = FeatureStats(np.zeros(80), np.ones(80))
    tensors = stats.to_tensors()
    assert list(tensors) == ["stats.mean", "stats.std"]
    restored = FeatureStats.from_tensors(tensors)
    assert np.array_equal(restored.std, stats.std)
