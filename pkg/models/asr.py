"""
CTC acoustic model: the Conformer encoder topped by a linear CTC head.
"""
from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Any

import numpy as np

from models.encoder import (
    MIN_FRAMES,
    ConformerEncoder,
    EncoderConfig,
    EncoderInputs,
    encoder_feeds,
    encoder_placeholders,
)
from project_tools.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from project_tools.dsp import FeatureStats
from project_tools.numgrad import Graph, Rng, forward_eval

logger = logging.getLogger(__name__)


class CtcHead:
    """Linear D -> V projection; V = alphabet size + 1 with the blank at id 0."""

    def __init__(self, d_model: int, vocab_size: int, rng: Rng, dtype=np.float64):
        limit = np.sqrt(6.0 / (d_model + vocab_size))
        self.vocab_size = vocab_size
        self.params = {
            "ctc.W": rng.uniform(d_model * vocab_size, -limit, limit).reshape(d_model, vocab_size).astype(dtype),
            "ctc.b": np.zeros(vocab_size, dtype=dtype),
        }

    def build(self, graph: Graph, x: int) -> int:
        w = graph.parameter("ctc.W", self.params["ctc.W"])
        b = graph.parameter("ctc.b", self.params["ctc.b"])
        return graph.op("log_softmax", graph.linear(x, w, b), name="log_probs")


class AsrModel:
    def __init__(self, encoder: ConformerEncoder, stats: FeatureStats, alphabet: str, seed: int = 0):
        self.encoder = encoder
        self.stats = stats
        self.alphabet = alphabet
        self.head = CtcHead(encoder.config.d_model, len(alphabet) + 1, Rng(seed).fork(), encoder.dtype)
        self._local = threading.local()

    @property
    def vocab_size(self) -> int:
        return self.head.vocab_size

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.encoder.params, **self.head.params}

    def build(self, graph: Graph, inputs: EncoderInputs) -> tuple[list[int], int]:
        """Returns (tap nodes, log-prob node); the head reads the last tap."""
        taps = self.encoder.build(graph, inputs)
        return taps, self.head.build(graph, taps[-1])

    def training_graph(self) -> tuple[Graph, int]:
        """Adds placeholders targets, input_lengths, target_lengths and the batch-mean CTC loss."""
        graph = Graph(self.encoder.dtype)
        inputs = encoder_placeholders(graph)
        _, log_probs = self.build(graph, inputs)
        loss = graph.op(
            "ctc",
            log_probs,
            graph.placeholder("targets"),
            graph.placeholder("input_lengths"),
            graph.placeholder("target_lengths"),
            name="loss",
        )
        return graph, loss

    def _inference_graph(self) -> Graph:
        graph = getattr(self._local, "graph", None)
        if graph is None:
            graph = Graph(self.encoder.dtype)
            self.build(graph, encoder_placeholders(graph))
            self._local.graph = graph
        return graph

    def log_probs(self, spec: np.ndarray) -> np.ndarray:
        """(T', V) log-softmax rows for one normalised (T, 80) spectrogram."""
        t = spec.shape[0]
        if t < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {t}")
        feeds = encoder_feeds(np.array([t]), t)
        feeds["features"] = spec[None]
        return forward_eval(self._inference_graph(), feeds)["log_probs"][0]

    # --- checkpoint adapters ------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.stats.to_tensors()}

    def meta(self) -> dict[str, Any]:
        return {"kind": "asr", "alphabet": self.alphabet, "encoder": self.encoder.config.to_dict()}

    def save(self, path: str | Path, extra_meta: dict[str, Any] | None = None) -> None:
        save_checkpoint(path, self.to_tensors(), {**self.meta(), **(extra_meta or {})})

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        self.encoder.load_params(tensors)
        for name, param in self.head.params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks head tensor '{name}'")
            param[...] = tensors[name]

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], meta: dict[str, Any], dtype=np.float32) -> "AsrModel":
        if meta.get("kind") != "asr":
            raise CheckpointError(f"expected an asr checkpoint, got kind '{meta.get('kind')}'")
        encoder = ConformerEncoder(EncoderConfig(**meta["encoder"]), dtype=dtype)
        model = cls(encoder, FeatureStats.from_tensors(tensors), meta["alphabet"])
        model.load_params(tensors)
        return model

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "AsrModel":
        tensors, meta = load_checkpoint(path)
        return cls.from_tensors(tensors, meta, dtype)
