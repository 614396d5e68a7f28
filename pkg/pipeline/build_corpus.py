"""
Synthetic paired noisy/clean corpus.

Each utterance is a sequence of harmonic "symbols" (one 120 ms tone complex
per symbol), mixed with white or babble noise at a grid SNR. The output
layout is out_dir/{wav_clean,wav_noisy,manifests} with one JSONL manifest
per split, so real NSD/LibriSpeech rows can be dropped in as long as they
follow the same row schema.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import signal

from pipeline.config import CorpusSection, eval_threads
from project_tools.checkpoint import load_checkpoint, save_checkpoint
from project_tools.dsp import (
    SAMPLE_RATE,
    FeatureStats,
    Waveform,
    log_mel,
    quantise,
    write_wav,
)
from project_tools.numgrad import Rng

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = "abcdefghijkl"
SYMBOL_SECONDS = 0.12
BASE_FREQUENCY_HZ = 110.0
HARMONIC_AMPLITUDES = (1.0, 0.5, 0.25)
PEAK_LEVEL = 0.3
NOISE_RMS = 0.1
BABBLE_STREAMS = 8
SPEAKER_SPREAD_SEMITONES = 0.5
CLIP_WARN_FRACTION = 0.001
SPLITS = ("train", "val", "test")
_SPLIT_SEED_OFFSET = {"train": 0, "val": 10_000, "test": 20_000}


class CorpusError(RuntimeError):
    pass


class ManifestRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    noisy_path: str
    clean_path: str
    text: str
    snr_db: float
    noise_type: str
    speaker: str


# --- synthesis ----------------------------------------------------------------


def speaker_offset(speaker_seed: int) -> float:
    """Per-speaker fundamental offset in semitones."""
    return float(Rng(speaker_seed).uniform(1, -SPEAKER_SPREAD_SEMITONES, SPEAKER_SPREAD_SEMITONES)[0])


def synth_utterance(
    text: str, speaker_seed: int, alphabet: str = DEFAULT_ALPHABET, sample_rate: int = SAMPLE_RATE
) -> Waveform:
    """Render every symbol of `text` (spaces separate words and are not rendered)."""
    symbols = [c for c in text if not c.isspace()]
    if not symbols:
        raise CorpusError("cannot synthesise an empty text")
    unknown = sorted({c for c in symbols if c not in alphabet})
    if unknown:
        raise CorpusError(f"symbols {unknown} are not in the alphabet '{alphabet}'")

    offset = speaker_offset(speaker_seed)
    seg_len = round(SYMBOL_SECONDS * sample_rate)
    t = np.arange(seg_len) / sample_rate
    envelope = signal.get_window("hann", seg_len, fftbins=False)
    segments = []
    for symbol in symbols:
        f0 = BASE_FREQUENCY_HZ * 2.0 ** ((alphabet.index(symbol) + offset) / 12.0)
        tone = sum(
            amp * np.sin(2 * np.pi * (h + 1) * f0 * t) for h, amp in enumerate(HARMONIC_AMPLITUDES)
        )
        segments.append(tone * envelope)
    samples = np.concatenate(segments)
    samples *= PEAK_LEVEL / np.max(np.abs(samples))
    return Waveform(samples, sample_rate)


def _rms_normalise(samples: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(samples**2))
    return samples * (NOISE_RMS / rms) if rms > 0 else samples


def gen_noise(
    kind: str, n_samples: int, seed: int, alphabet: str = DEFAULT_ALPHABET, sample_rate: int = SAMPLE_RATE
) -> Waveform:
    """White (iid uniform) or babble (8 overlapping symbol streams) noise at RMS 0.1."""
    if n_samples < 1:
        raise CorpusError(f"noise length must be positive, got {n_samples}")
    rng = Rng(seed)
    if kind == "white":
        samples = rng.uniform(n_samples, -1.0, 1.0)
    elif kind == "babble":
        seg_len = round(SYMBOL_SECONDS * sample_rate)
        n_symbols = math.ceil(n_samples / seg_len) + 1
        samples = np.zeros(n_samples)
        for _ in range(BABBLE_STREAMS):
            text = "".join(alphabet[i] for i in rng.integers(n_symbols, len(alphabet)))
            stream = synth_utterance(text, rng.next(), alphabet, sample_rate).samples
            start = int(rng.integers(1, seg_len)[0])
            samples += stream[start : start + n_samples]
    else:
        raise CorpusError(f"unknown noise kind '{kind}' (expected white or babble)")
    return Waveform(_rms_normalise(samples), sample_rate)


def scale_noise(clean: Waveform, noise: Waveform, snr_db: float) -> np.ndarray:
    """Noise tiled/truncated to the clean length and scaled to the requested SNR."""
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise CorpusError(
            f"sample rates differ: clean {clean.sample_rate_hz} Hz, noise {noise.sample_rate_hz} Hz"
        )
    tiled = np.resize(noise.samples, len(clean))
    p_clean = np.mean(clean.samples**2)
    p_noise = np.mean(tiled**2)
    if p_clean == 0:
        raise CorpusError("clean signal is silent; SNR is undefined")
    if p_noise == 0:
        raise CorpusError("noise signal is silent; SNR is undefined")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return alpha * tiled


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    mixture = clean.samples + scale_noise(clean, noise, snr_db)
    clipped = int(np.count_nonzero(np.abs(mixture) > 1.0))
    if clipped > CLIP_WARN_FRACTION * len(mixture):
        logger.warning(
            "clipping %d of %d samples (%.2f%%) at %.1f dB SNR",
            clipped,
            len(mixture),
            100.0 * clipped / len(mixture),
            snr_db,
        )
    return Waveform(np.clip(mixture, -1.0, 1.0), clean.sample_rate_hz)


# --- manifests ----------------------------------------------------------------


def write_manifest(path: Path, rows: list[ManifestRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(row.model_dump_json() + "\n")


def load_manifest(path: str | Path) -> list[ManifestRow]:
    """
    Read a JSONL manifest. Relative audio paths resolve against the corpus
    root (the parent of the manifests/ directory); absolute paths are kept.
    """
    path = Path(path)
    root = path.resolve().parent.parent
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = ManifestRow.model_validate_json(line)
            except ValueError as e:
                raise CorpusError(f"{path}:{line_no}: invalid manifest row: {e}")
            for key in ("noisy_path", "clean_path"):
                value = getattr(row, key)
                if value and not Path(value).is_absolute():
                    setattr(row, key, str(root / value))
            rows.append(row)
    return rows


# --- corpus build -------------------------------------------------------------


@dataclass(frozen=True)
class _RowPlan:
    row_id: str
    text: str
    speaker_seed: int
    snr_db: float
    noise_type: str
    noise_seed: int


def _random_text(rng: Rng, cfg: CorpusSection) -> str:
    n_words = cfg.words_min + int(rng.integers(1, cfg.words_max - cfg.words_min + 1)[0])
    words = []
    for _ in range(n_words):
        ids = rng.integers(cfg.word_length, len(cfg.alphabet))
        words.append("".join(cfg.alphabet[i] for i in ids))
    return " ".join(words)


def speaker_seeds(split: str, cfg: CorpusSection, seed: int) -> list[int]:
    """Disjoint per-split speaker seeds."""
    base = seed * 100_000 + _SPLIT_SEED_OFFSET[split]
    return [base + j for j in range(cfg.speakers_per_split[split])]


def _plan_split(split: str, count: int, cfg: CorpusSection, seed: int, rng: Rng) -> list[_RowPlan]:
    speakers = speaker_seeds(split, cfg, seed)
    grid, kinds = cfg.snr_grid, cfg.noise_kinds
    plans = []
    for i in range(count):
        if split == "test":
            # stratified: every (snr, kind) cell gets count / cells rows
            snr = grid[i % len(grid)]
            kind = kinds[(i // len(grid)) % len(kinds)]
        else:
            snr = grid[int(rng.integers(1, len(grid))[0])]
            kind = kinds[int(rng.integers(1, len(kinds))[0])]
        plans.append(
            _RowPlan(
                row_id=f"{split}-{i:04d}",
                text=_random_text(rng, cfg),
                speaker_seed=speakers[int(rng.integers(1, len(speakers))[0])],
                snr_db=float(snr),
                noise_type=kind,
                noise_seed=rng.next(),
            )
        )
    return plans


def _render_row(plan: _RowPlan, out_dir: Path, alphabet: str) -> tuple[ManifestRow, np.ndarray]:
    clean = quantise(synth_utterance(plan.text, plan.speaker_seed, alphabet))
    noise = gen_noise(plan.noise_type, len(clean), plan.noise_seed, alphabet)
    noisy = mix_at_snr(clean, noise, plan.snr_db)
    clean_rel = f"wav_clean/{plan.row_id}.wav"
    noisy_rel = f"wav_noisy/{plan.row_id}.wav"
    write_wav(out_dir / clean_rel, clean)
    write_wav(out_dir / noisy_rel, noisy)
    row = ManifestRow(
        id=plan.row_id,
        noisy_path=noisy_rel,
        clean_path=clean_rel,
        text=plan.text,
        snr_db=plan.snr_db,
        noise_type=plan.noise_type,
        speaker=f"spk{plan.speaker_seed}",
    )
    return row, log_mel(clean)


def build_corpus(cfg: CorpusSection, out_dir: str | Path, seed: int = 0) -> dict[str, Path]:
    """
    Generate WAVs and train/val/test manifests under out_dir.

    Also writes manifests/stats.ckpt: per-bin feature stats of the clean
    training split. Returns the manifest path per split.
    """
    out_dir = Path(out_dir)
    counts = {"train": cfg.train, "val": cfg.val, "test": cfg.test}
    for split, count in counts.items():
        if count < 1:
            raise CorpusError(f"{split} count must be at least 1, got {count}")
    try:
        for sub in ("wav_clean", "wav_noisy", "manifests"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {out_dir}: {e}")

    rng = Rng(seed)
    plans = {split: _plan_split(split, counts[split], cfg, seed, rng) for split in SPLITS}

    manifests: dict[str, Path] = {}
    train_specs: list[np.ndarray] = []
    with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
        for split in SPLITS:
            logger.info("rendering %d %s utterances", counts[split], split)
            results = list(pool.map(lambda p: _render_row(p, out_dir, cfg.alphabet), plans[split]))
            rows = [row for row, _ in results]
            if split == "train":
                train_specs = [spec for _, spec in results]
            manifests[split] = out_dir / "manifests" / f"{split}.jsonl"
            write_manifest(manifests[split], rows)

    stats = FeatureStats.from_specs(train_specs)
    save_checkpoint(out_dir / "manifests" / "stats.ckpt", stats.to_tensors(), {"kind": "stats"})
    return manifests


def load_stats(manifest_path: str | Path) -> FeatureStats:
    """Stats file written next to the manifests by build_corpus."""
    path = Path(manifest_path).parent / "stats.ckpt"
    if not path.exists():
        raise CorpusError(f"feature stats missing: {path} (run gen-corpus first)")
    tensors, _ = load_checkpoint(path)
    return FeatureStats.from_tensors(tensors)
