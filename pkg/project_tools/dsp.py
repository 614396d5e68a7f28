"""
Waveform I/O, resampling and the log-Mel front end.

Feature configuration: 16 kHz input, 25 ms Hann window (400 samples),
10 ms hop (160 samples), no padding, 512-point real FFT, 80 Slaney-style
area-normalised Mel filters over 0-8000 Hz, ln(max(energy, 1e-10)).
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_MELS = 80
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
LOG_FLOOR_ENERGY = 1e-10
LOG_FLOOR = float(np.log(LOG_FLOOR_ENERGY))
STD_FLOOR = 1e-5

KAISER_BETA = 8.0
TAPS_PER_PHASE = 32
UNKNOWN_CHUNK_SIZE = 0xFFFFFFFF


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError(f"waveform must be mono with at least one sample, got {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.samples.size


# --- WAV I/O -----------------------------------------------------------------


def load_wav(path: str | Path) -> Waveform:
    """Read a PCM16 mono WAV, scaling samples by 1/32768."""
    try:
        info = sf.info(str(path))
    except (sf.LibsndfileError, RuntimeError) as exc:
        raise WavFormatError(f"{path}: unreadable or truncated WAV ({exc})") from exc
    if info.format != "WAV":
        raise WavFormatError(f"{path}: container is {info.format}, expected WAV")
    if info.subtype != "PCM_16":
        raise WavFormatError(f"{path}: codec is {info.subtype}, expected PCM_16")
    if info.channels != 1:
        raise WavFormatError(f"{path}: channels is {info.channels}, expected 1")
    declared, present = _data_chunk_bytes(path)
    if present < declared:
        raise WavFormatError(f"{path}: truncated WAV ({present} of {declared} data bytes)")
    data, rate = sf.read(str(path), dtype="int16", always_2d=False)
    if data.size == 0:
        raise WavFormatError(f"{path}: empty WAV")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def _data_chunk_bytes(path: str | Path) -> tuple[int, int]:
    """Declared and actually present byte counts of the RIFF `data` chunk."""
    with open(path, "rb") as fh:
        header = fh.read(12)
        if header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                raise WavFormatError(f"{path}: no data chunk")
            (size,) = struct.unpack("<I", chunk[4:])
            if chunk[:4] == b"data":
                start = fh.tell()
                present = fh.seek(0, os.SEEK_END) - start
                # streamed writers leave the size unset
                return (present if size == UNKNOWN_CHUNK_SIZE else size), present
            fh.seek(size + (size & 1), os.SEEK_CUR)


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write PCM16 mono; samples are rounded to the nearest 1/32768 step and clipped."""
    quantised = np.clip(np.rint(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), quantised, wave.sample_rate_hz, subtype="PCM_16", format="WAV")


def quantise(wave: Waveform) -> Waveform:
    """The waveform exactly as it will read back from a PCM16 file."""
    q = np.clip(np.rint(wave.samples * 32768.0), -32768, 32767) / 32768.0
    return Waveform(q, wave.sample_rate_hz)


# --- resampling --------------------------------------------------------------


@lru_cache(maxsize=16)
def _polyphase_filter(up: int, down: int) -> np.ndarray:
    numtaps = TAPS_PER_PHASE * up + 1  # odd length keeps the filter delay integral
    taps = signal.firwin(numtaps, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    return taps  # resample_poly scales by up


def resample(wave: Waveform, target_hz: int) -> Waveform:
    """Polyphase windowed-sinc resampling; output length is round(len * target / source)."""
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if target_hz == wave.sample_rate_hz:
        return Waveform(wave.samples.copy(), target_hz)
    ratio = Fraction(target_hz, wave.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    out = signal.resample_poly(wave.samples, up, down, window=_polyphase_filter(up, down))
    length = max(1, round(len(wave) * target_hz / wave.sample_rate_hz))
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return Waveform(out[:length], target_hz)


# --- log-Mel -----------------------------------------------------------------


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """(80, 257) Slaney Mel filters, area-normalised."""
    return librosa.filters.mel(
        sr=SAMPLE_RATE,
        n_fft=N_FFT,
        n_mels=N_MELS,
        fmin=0.0,
        fmax=SAMPLE_RATE / 2,
        htk=False,
        norm="slaney",
        dtype=np.float64,
    )


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    return signal.get_window("hann", WIN_LENGTH, fftbins=True)


def n_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def log_mel(wave: Waveform) -> np.ndarray:
    """(T, 80) log-Mel energies with T = floor((N - 400) / 160) + 1."""
    if wave.sample_rate_hz != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {wave.sample_rate_hz}")
    if len(wave) < WIN_LENGTH:
        raise ValueError("utterance shorter than one window")
    frames = sliding_window_view(wave.samples, WIN_LENGTH)[::HOP_LENGTH]
    spectrum = np.fft.rfft(frames * _hann(), n=N_FFT, axis=-1)
    power = spectrum.real**2 + spectrum.imag**2
    energy = power @ mel_filterbank().T
    return np.log(np.maximum(energy, LOG_FLOOR_ENERGY))


def spec_mae(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


# --- normalisation -----------------------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_MELS,) or self.std.shape != (N_MELS,):
            raise ValueError(
                f"stats must have {N_MELS} bins, got mean {self.mean.shape} / std {self.std.shape}"
            )

    @classmethod
    def from_specs(cls, specs: list[np.ndarray]) -> "FeatureStats":
        stacked = np.concatenate(specs, axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {"stats.mean": self.mean.astype(np.float32), "stats.std": self.std.astype(np.float32)}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "FeatureStats":
        return cls(tensors["stats.mean"], tensors["stats.std"])


def normalize(spec: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (spec - stats.mean) / np.maximum(stats.std, STD_FLOOR)


def denormalize(spec: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return spec * np.maximum(stats.std, STD_FLOOR) + stats.mean
