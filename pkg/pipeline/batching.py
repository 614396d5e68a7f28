"""
Feature caching, tokenisation and padded batching.
"""
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from pipeline.build_corpus import (
    DEFAULT_ALPHABET,
    SPLITS,
    CorpusError,
    ManifestRow,
    load_manifest,
    load_stats,
)
from project_tools.dsp import (
    LOG_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    FeatureStats,
    load_wav,
    log_mel,
    normalize,
    resample,
)
from project_tools.numgrad import Rng

logger = logging.getLogger(__name__)

FeatureFn = Callable[[ManifestRow], np.ndarray]


def tokenize(text: str, alphabet: str = DEFAULT_ALPHABET) -> list[int]:
    """Symbol ids 1..K; id 0 is reserved for the CTC blank. Spaces are dropped."""
    ids = []
    for c in text:
        if c.isspace():
            continue
        if c not in alphabet:
            raise ValueError(f"symbol '{c}' is not in the alphabet '{alphabet}'")
        ids.append(alphabet.index(c) + 1)
    return ids


def to_words(symbols: str, word_length: int = 3) -> list[str]:
    """Re-segment a decoded symbol string into fixed-length words for WER."""
    symbols = "".join(symbols.split())
    return [symbols[i : i + word_length] for i in range(0, len(symbols), word_length)]


class FeatureStore:
    """
    Caches raw log-Mel features per audio path.

    Unbounded by default; with `max_items` the least recently used entries
    are evicted. Safe to share between evaluation threads.
    """

    def __init__(self, max_items: int | None = None):
        if max_items is not None and max_items < 1:
            raise ValueError(f"max_items must be positive, got {max_items}")
        self.max_items = max_items
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._cache)

    def features(self, path: str | Path) -> np.ndarray:
        key = str(path)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        wave = load_wav(key)
        if wave.sample_rate_hz != SAMPLE_RATE:
            wave = resample(wave, SAMPLE_RATE)
        spec = log_mel(wave)
        with self._lock:
            self._cache[key] = spec
            if self.max_items is not None:
                while len(self._cache) > self.max_items:
                    self._cache.popitem(last=False)
        return spec

    def noisy(self, row: ManifestRow) -> np.ndarray:
        return self.features(row.noisy_path)

    def clean(self, row: ManifestRow) -> np.ndarray:
        return self.features(row.clean_path)


@dataclass
class Batch:
    ids: list[str]
    specs: np.ndarray  # (N, T_max, 80), normalised
    lengths: np.ndarray  # (N,) true frame counts
    texts: list[list[int]]
    pad_mask: np.ndarray  # (N, T_max), 1.0 on real frames
    targets: np.ndarray | None = None  # (N, T_max, 80), normalised clean features

    @property
    def size(self) -> int:
        return len(self.ids)


def _pad(specs: list[np.ndarray], t_max: int, pad_row: np.ndarray) -> np.ndarray:
    out = np.tile(pad_row, (len(specs), t_max, 1))
    for i, spec in enumerate(specs):
        out[i, : spec.shape[0]] = spec
    return out


def make_batches(
    rows: list[ManifestRow],
    batch_size: int,
    stats: FeatureStats,
    shuffle_seed: int | None,
    inputs: FeatureFn,
    targets: FeatureFn | None = None,
    alphabet: str = DEFAULT_ALPHABET,
    max_frames: int | None = None,
) -> Iterator[Batch]:
    """
    Yield padded batches in a deterministic order.

    `inputs` (and optionally `targets`) map a row to its raw log-Mel features.
    Padding uses the normalised log floor; pad_mask marks the real frames.
    A shuffle_seed of None keeps manifest order.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    kept = []
    for row in rows:
        spec = inputs(row)
        if max_frames is not None and spec.shape[0] > max_frames:
            logger.warning("skipping %s: %d frames exceeds cap %d", row.id, spec.shape[0], max_frames)
            continue
        kept.append(row)
    order = Rng(shuffle_seed).permutation(len(kept)) if shuffle_seed is not None else range(len(kept))
    ordered = [kept[i] for i in order]
    pad_row = normalize(np.full(N_MELS, LOG_FLOOR), stats)

    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start : start + batch_size]
        specs = [normalize(inputs(row), stats) for row in chunk]
        lengths = np.array([s.shape[0] for s in specs])
        t_max = int(lengths.max())
        pad_mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
        target_specs = None
        if targets is not None:
            clean = [normalize(targets(row), stats) for row in chunk]
            for row, noisy, target in zip(chunk, specs, clean):
                if noisy.shape != target.shape:
                    raise ValueError(f"{row.id}: noisy {noisy.shape} and clean {target.shape} differ")
            target_specs = _pad(clean, t_max, pad_row)
        yield Batch(
            ids=[row.id for row in chunk],
            specs=_pad(specs, t_max, pad_row),
            lengths=lengths,
            texts=[tokenize(row.text, alphabet) for row in chunk],
            pad_mask=pad_mask,
            targets=target_specs,
        )


@dataclass
class Corpus:
    """Loaded manifests of one corpus directory plus its feature stats."""

    root: Path
    splits: dict[str, list[ManifestRow]]
    stats: FeatureStats
    store: FeatureStore
    alphabet: str = DEFAULT_ALPHABET
    word_length: int = 3

    def rows(self, split: str) -> list[ManifestRow]:
        if split not in self.splits:
            raise CorpusError(f"corpus at {self.root} has no '{split}' manifest")
        return self.splits[split]


def load_corpus(root: str | Path, alphabet: str = DEFAULT_ALPHABET, word_length: int = 3) -> Corpus:
    root = Path(root)
    manifests = root / "manifests"
    if not (manifests / "train.jsonl").exists():
        raise CorpusError(f"no corpus at {root}: {manifests / 'train.jsonl'} is missing (run gen-corpus first)")
    splits = {
        split: load_manifest(manifests / f"{split}.jsonl")
        for split in SPLITS
        if (manifests / f"{split}.jsonl").exists()
    }
    return Corpus(
        root=root,
        splits=splits,
        stats=load_stats(manifests / "train.jsonl"),
        store=FeatureStore(),
        alphabet=alphabet,
        word_length=word_length,
    )
