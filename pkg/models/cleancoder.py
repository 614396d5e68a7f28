"""
Cleancoder denoising frontend.

A Parallel Weighted Sum collapses the taps of a frozen encoder into one
latent sequence; four Highway networks each reconstruct one of every four
output frames, and their outputs are interleaved back to the input rate.
All reconstruction happens in the normalised feature domain.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from models.encoder import (
    MIN_FRAMES,
    ConformerEncoder,
    EncoderConfig,
    EncoderInputs,
    LatentTapStack,
    encoder_feeds,
    encoder_placeholders,
)
from pipeline.batching import FeatureStore
from pipeline.build_corpus import ManifestRow
from project_tools.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from project_tools.dsp import N_MELS, FeatureStats, denormalize, normalize
from project_tools.numgrad import Graph, Rng, forward_eval, freeze

logger = logging.getLogger(__name__)

N_NETS = 4
HIGHWAY_LAYERS = 4
GATE_BIAS_INIT = -1.0
PWS_INIT_NOISE = 1e-3


class ParallelWeightedSum:
    """One affine projection per tap, summed: out[t] = sum_b tap_b[t] @ W_b + c_b."""

    def __init__(self, n_blocks: int, d_model: int, rng: Rng, dtype=np.float64):
        self.n_blocks = n_blocks
        self.params: dict[str, np.ndarray] = {}
        for b in range(1, n_blocks + 1):
            noise = PWS_INIT_NOISE * rng.normal(d_model * d_model).reshape(d_model, d_model)
            self.params[f"pws.W.{b}"] = (np.eye(d_model) / n_blocks + noise).astype(dtype)
            self.params[f"pws.c.{b}"] = np.zeros(d_model, dtype=dtype)

    def weights(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"pws.W.{b}"], self.params[f"pws.c.{b}"]

    def build(self, graph: Graph, taps: Sequence[int]) -> int:
        if len(taps) != self.n_blocks:
            raise ValueError(f"got {len(taps)} taps for {self.n_blocks} projections")
        out = None
        for b, tap in enumerate(taps, 1):
            w = graph.parameter(f"pws.W.{b}", self.params[f"pws.W.{b}"])
            c = graph.parameter(f"pws.c.{b}", self.params[f"pws.c.{b}"])
            projected = graph.linear(tap, w, c)
            out = projected if out is None else graph.add(out, projected)
        return out


class HighwayNet:
    """Input projection D -> 80 followed by four gated layers at width 80."""

    def __init__(self, index: int, d_model: int, rng: Rng, dtype=np.float64):
        self.index = index
        self.prefix = f"hw{index}"
        p = self.prefix
        self.params: dict[str, np.ndarray] = {
            f"{p}.P": _glorot(rng, d_model, N_MELS, dtype),
            f"{p}.Pb": np.zeros(N_MELS, dtype=dtype),
        }
        for j in range(1, HIGHWAY_LAYERS + 1):
            self.params[f"{p}.layer{j}.WH"] = _glorot(rng, N_MELS, N_MELS, dtype)
            self.params[f"{p}.layer{j}.bH"] = np.zeros(N_MELS, dtype=dtype)
            self.params[f"{p}.layer{j}.WG"] = _glorot(rng, N_MELS, N_MELS, dtype)
            self.params[f"{p}.layer{j}.bG"] = np.full(N_MELS, GATE_BIAS_INIT, dtype=dtype)

    def layer(self, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        p = f"{self.prefix}.layer{j}"
        return (
            self.params[f"{p}.WH"],
            self.params[f"{p}.bH"],
            self.params[f"{p}.WG"],
            self.params[f"{p}.bG"],
        )

    def build(self, graph: Graph, s: int) -> int:
        def param(name: str) -> int:
            full = f"{self.prefix}.{name}"
            return graph.parameter(full, self.params[full])

        x = graph.linear(s, param("P"), param("Pb"))
        for j in range(1, HIGHWAY_LAYERS + 1):
            h = graph.swish(graph.linear(x, param(f"layer{j}.WH"), param(f"layer{j}.bH")))
            gate = graph.sigmoid(graph.linear(x, param(f"layer{j}.WG"), param(f"layer{j}.bG")))
            # x + g * (H - x) == g*H + (1-g)*x
            x = graph.add(x, graph.mul(gate, graph.sub(h, x)))
        return x


def _glorot(rng: Rng, n_in: int, n_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(n_in * n_out, -limit, limit).reshape(n_in, n_out).astype(dtype)


# --- reference computations on plain arrays ----------------------------------


def parallel_weighted_sum(pws: ParallelWeightedSum, taps: LatentTapStack | Sequence[np.ndarray]) -> np.ndarray:
    seqs = taps.taps if isinstance(taps, LatentTapStack) else list(taps)
    if len(seqs) != pws.n_blocks:
        raise ValueError(f"got {len(seqs)} taps for {pws.n_blocks} projections")
    out = 0.0
    for b, tap in enumerate(seqs, 1):
        w, c = pws.weights(b)
        out = out + tap @ w + c
    return out


def highway_forward(net: HighwayNet, s: np.ndarray) -> np.ndarray:
    """(..., D) latent vectors -> (..., 80) frames."""
    x = s @ net.params[f"{net.prefix}.P"] + net.params[f"{net.prefix}.Pb"]
    for j in range(1, HIGHWAY_LAYERS + 1):
        wh, bh, wg, bg = net.layer(j)
        pre = x @ wh + bh
        h = pre * expit(pre)
        gate = expit(x @ wg + bg)
        x = gate * h + (1.0 - gate) * x
    return x


def decode_frames(nets: Sequence[HighwayNet], latent: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """Frame 4i + k - 1 is N_k(s_i); the 4T' result is trimmed to n_frames when given."""
    if len(nets) != N_NETS:
        raise ValueError(f"decoder needs {N_NETS} highway nets, got {len(nets)}")
    outputs = np.stack([highway_forward(net, latent) for net in nets], axis=1)  # (T', 4, 80)
    frames = outputs.reshape(-1, outputs.shape[-1])
    if n_frames is not None:
        if n_frames > frames.shape[0]:
            raise ValueError(f"cannot trim {frames.shape[0]} frames to {n_frames}")
        frames = frames[:n_frames]
    return frames


def l1_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute error over the frames selected by mask (last axis is the Mel axis)."""
    if pred.shape != target.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1])
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], pred.shape)
    total = weights.sum()
    if total <= 0:
        raise ValueError("mask selects no frames")
    return float((np.abs(pred - target) * weights).sum() / total)


# --- model --------------------------------------------------------------------


class CleancoderModel:
    def __init__(self, encoder: ConformerEncoder, stats: FeatureStats, seed: int = 0):
        self.encoder = encoder
        self.stats = stats
        dtype = encoder.dtype
        rng = Rng(seed)
        cfg = encoder.config
        self.pws = ParallelWeightedSum(cfg.n_blocks, cfg.d_model, rng, dtype)
        self.nets = [HighwayNet(k, cfg.d_model, rng, dtype) for k in range(1, N_NETS + 1)]
        self._local = threading.local()

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors in registration order."""
        out = dict(self.pws.params)
        for net in self.nets:
            out.update(net.params)
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def build(self, graph: Graph, inputs: EncoderInputs) -> int:
        taps = self.encoder.build(graph, inputs)
        freeze(graph, self.encoder.params)
        latent = self.pws.build(graph, taps)
        frames = [net.build(graph, latent) for net in self.nets]
        interleaved = graph.op("interleave", *frames)
        return graph.op("trim_like", interleaved, inputs.features, name="denoised")

    def training_graph(self) -> tuple[Graph, int]:
        """Graph with placeholders features/masks/target/loss_mask; returns (graph, loss node)."""
        graph = Graph(self.encoder.dtype)
        inputs = encoder_placeholders(graph)
        pred = self.build(graph, inputs)
        target = graph.placeholder("target")
        loss_mask = graph.placeholder("loss_mask")
        loss = graph.op("masked_mean_abs", graph.sub(pred, target), loss_mask, name="loss")
        return graph, loss

    def _inference_graph(self) -> Graph:
        graph = getattr(self._local, "graph", None)
        if graph is None:
            graph = Graph(self.encoder.dtype)
            self.build(graph, encoder_placeholders(graph))
            self._local.graph = graph
        return graph

    def denoise_normalized(self, spec: np.ndarray) -> np.ndarray:
        t = spec.shape[0]
        if t < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {t}")
        feeds = encoder_feeds(np.array([t]), t)
        feeds["features"] = spec[None]
        return forward_eval(self._inference_graph(), feeds)["denoised"][0]

    # --- checkpoint adapters ------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(self.encoder.params)
        tensors.update(self.params)
        tensors.update(self.stats.to_tensors())
        return tensors

    def meta(self) -> dict[str, Any]:
        return {"kind": "cleancoder", "encoder": self.encoder.config.to_dict()}

    def save(self, path: str | Path, extra_meta: dict[str, Any] | None = None) -> None:
        save_checkpoint(path, self.to_tensors(), {**self.meta(), **(extra_meta or {})})

    def load_trainable(self, tensors: dict[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks cleancoder tensor '{name}'")
            param[...] = tensors[name]

    @classmethod
    def from_tensors(
        cls, tensors: dict[str, np.ndarray], meta: dict[str, Any], dtype=np.float32
    ) -> "CleancoderModel":
        if meta.get("kind") != "cleancoder":
            raise CheckpointError(f"expected a cleancoder checkpoint, got kind '{meta.get('kind')}'")
        encoder = ConformerEncoder(EncoderConfig(**meta["encoder"]), dtype=dtype)
        encoder.load_params(tensors)
        model = cls(encoder, FeatureStats.from_tensors(tensors))
        model.load_trainable(tensors)
        return model

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "CleancoderModel":
        tensors, meta = load_checkpoint(path)
        return cls.from_tensors(tensors, meta, dtype)


def cleancoder_forward(model: CleancoderModel, noisy: np.ndarray) -> np.ndarray:
    """Raw (T, 80) log-Mel in, denoised raw (T, 80) log-Mel out."""
    if noisy.ndim != 2 or noisy.shape[1] != N_MELS:
        raise ValueError(f"expected (T, {N_MELS}) features, got {noisy.shape}")
    denoised = model.denoise_normalized(normalize(noisy, model.stats))
    return denormalize(denoised, model.stats)


def denoise_manifest(
    model: CleancoderModel, rows: Sequence[ManifestRow], store: FeatureStore, threads: int = 1
) -> dict[str, np.ndarray]:
    """Denoised raw log-Mel features of every row's noisy audio, keyed by row id."""

    def one(row: ManifestRow) -> tuple[str, np.ndarray]:
        return row.id, cleancoder_forward(model, store.noisy(row))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return dict(pool.map(one, rows))
