"""
Miniature Conformer encoder with x4 temporal subsampling.

Every block output is exposed as a tap. The same encoder serves as the
frozen backbone of the Cleancoder and, with a CTC head, as the ASR body.
Activations are (N, T, C) channels-last; matrices act on row vectors.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from project_tools.checkpoint import CheckpointError
from project_tools.dsp import N_MELS
from project_tools.numgrad import Graph, Rng, forward_eval

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
MIN_FRAMES = 4


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    conv_kernel: int = 15
    ffn_expansion: int = 4
    dropout: float = 0.0
    max_rel_distance: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported (determinism)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_section(cls, section) -> "EncoderConfig":
        return cls(
            d_model=section.d_model,
            n_blocks=section.n_blocks,
            n_heads=section.n_heads,
            conv_kernel=section.conv_kernel,
            ffn_expansion=section.ffn_expansion,
            max_rel_distance=section.max_rel_distance,
        )


@dataclass
class LatentTapStack:
    taps: list[np.ndarray]  # B arrays of (T', D)
    t_prime: int


@dataclass(frozen=True)
class EncoderInputs:
    """Placeholder node ids the encoder subgraph reads."""

    features: int
    frame_mask: int
    half_mask: int
    sub_mask: int
    attn_bias: int


def half_length(t: int) -> int:
    return (t + 1) // 2


def subsampled_length(t: int) -> int:
    """T' of two kernel-3 / stride-2 / pad-1 convolutions, i.e. ceil(T / 4)."""
    return half_length(half_length(t))


def encoder_feeds(lengths: np.ndarray, t_max: int) -> dict[str, np.ndarray]:
    """Frame masks at T, ceil(T/2), ceil(T/4) and the additive key-padding bias."""
    lengths = np.asarray(lengths)
    if t_max < MIN_FRAMES:
        raise ValueError(f"need at least {MIN_FRAMES} frames, got {t_max}")

    def mask(lens, extent):
        return (np.arange(extent)[None, :] < np.asarray(lens)[:, None]).astype(np.float64)

    t_half, t_sub = half_length(t_max), subsampled_length(t_max)
    sub = mask([subsampled_length(int(t)) for t in lengths], t_sub)
    return {
        "frame_mask": mask(lengths, t_max)[:, :, None],
        "half_mask": mask([half_length(int(t)) for t in lengths], t_half)[:, :, None],
        "sub_mask": sub[:, :, None],
        "attn_bias": np.where(sub > 0, 0.0, MASK_VALUE)[:, None, None, :],
    }


def encoder_placeholders(graph: Graph) -> EncoderInputs:
    return EncoderInputs(
        features=graph.placeholder("features"),
        frame_mask=graph.placeholder("frame_mask"),
        half_mask=graph.placeholder("half_mask"),
        sub_mask=graph.placeholder("sub_mask"),
        attn_bias=graph.placeholder("attn_bias"),
    )


def _glorot(rng: Rng, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(int(np.prod(shape)), -limit, limit).reshape(shape).astype(dtype)


class ConformerEncoder:
    """Parameters live in `self.params` (registration order) and are shared by every graph built."""

    PREFIX = "enc."

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._local = threading.local()
        self._init_params(Rng(seed))

    # --- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[self.PREFIX + name] = value

    def _linear(self, rng: Rng, name: str, n_in: int, n_out: int) -> None:
        self._add(f"{name}.w", _glorot(rng, (n_in, n_out), n_in, n_out, self.dtype))
        self._add(f"{name}.b", np.zeros(n_out, dtype=self.dtype))

    def _norm(self, name: str, width: int) -> None:
        self._add(f"{name}.g", np.ones(width, dtype=self.dtype))
        self._add(f"{name}.b", np.zeros(width, dtype=self.dtype))

    def _init_params(self, rng: Rng) -> None:
        cfg = self.config
        d, hidden, k = cfg.d_model, cfg.d_model * cfg.ffn_expansion, cfg.conv_kernel
        self._add("sub.conv1.w", _glorot(rng, (d, N_MELS, 3), N_MELS * 3, d * 3, self.dtype))
        self._add("sub.conv1.b", np.zeros(d, dtype=self.dtype))
        self._add("sub.conv2.w", _glorot(rng, (d, d, 3), d * 3, d * 3, self.dtype))
        self._add("sub.conv2.b", np.zeros(d, dtype=self.dtype))
        for b in range(1, cfg.n_blocks + 1):
            p = f"block{b}"
            for ffn in ("ff1", "ff2"):
                self._norm(f"{p}.{ffn}.ln", d)
                self._linear(rng, f"{p}.{ffn}.up", d, hidden)
                self._linear(rng, f"{p}.{ffn}.down", hidden, d)
            self._norm(f"{p}.att.ln", d)
            for proj in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.att.{proj}", d, d)
            self._add(
                f"{p}.att.rel",
                np.zeros((cfg.n_heads, 2 * cfg.max_rel_distance + 1), dtype=self.dtype),
            )
            self._norm(f"{p}.conv.ln", d)
            self._linear(rng, f"{p}.conv.pw1", d, 2 * d)
            self._add(f"{p}.conv.dw.w", _glorot(rng, (d, k), k, k, self.dtype))
            self._add(f"{p}.conv.dw.b", np.zeros(d, dtype=self.dtype))
            self._norm(f"{p}.conv.norm", d)
            self._linear(rng, f"{p}.conv.pw2", d, d)
            self._norm(f"{p}.out.ln", d)

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        """Copy checkpoint tensors into the existing arrays (keeps graph references valid)."""
        for name, param in self.params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks encoder tensor '{name}'")
            if tensors[name].shape != param.shape:
                raise CheckpointError(f"'{name}': checkpoint {tensors[name].shape} vs model {param.shape}")
            param[...] = tensors[name]

    # --- graph construction -------------------------------------------------

    def _p(self, graph: Graph, name: str) -> int:
        full = self.PREFIX + name
        if full in graph.names:
            return graph.names[full]
        return graph.parameter(full, self.params[full])

    def _linear_node(self, graph: Graph, x: int, name: str) -> int:
        return graph.linear(x, self._p(graph, f"{name}.w"), self._p(graph, f"{name}.b"))

    def _norm_node(self, graph: Graph, x: int, name: str) -> int:
        return graph.layer_norm(x, self._p(graph, f"{name}.g"), self._p(graph, f"{name}.b"))

    def build_subsample(self, graph: Graph, inputs: EncoderInputs) -> int:
        x = graph.mul(inputs.features, inputs.frame_mask)
        x = graph.conv1d(x, self._p(graph, "sub.conv1.w"), stride=2, padding=1)
        x = graph.swish(graph.add(x, self._p(graph, "sub.conv1.b")))
        x = graph.mul(x, inputs.half_mask)
        x = graph.conv1d(x, self._p(graph, "sub.conv2.w"), stride=2, padding=1)
        x = graph.swish(graph.add(x, self._p(graph, "sub.conv2.b")))
        return graph.mul(x, inputs.sub_mask)

    def _feed_forward(self, graph: Graph, x: int, name: str) -> int:
        h = self._norm_node(graph, x, f"{name}.ln")
        h = graph.swish(self._linear_node(graph, h, f"{name}.up"))
        h = self._linear_node(graph, h, f"{name}.down")
        return graph.add(x, graph.scale(h, 0.5))

    def _attention(self, graph: Graph, x: int, name: str, attn_bias: int, tag: str) -> int:
        heads = self.config.n_heads
        d_head = self.config.d_model // heads
        h = self._norm_node(graph, x, f"{name}.ln")

        def project(proj: str, axes: tuple[int, ...]) -> int:
            node = self._linear_node(graph, h, f"{name}.{proj}")
            node = graph.op("split_last", node, parts=heads)  # (N, T, H, dh)
            return graph.op("transpose", node, axes=axes)

        q = project("q", (0, 2, 1, 3))  # (N, H, T, dh)
        k = project("k", (0, 2, 3, 1))  # (N, H, dh, T)
        v = project("v", (0, 2, 1, 3))
        scores = graph.scale(graph.matmul(q, k), 1.0 / math.sqrt(d_head))
        rel = graph.op("rel_bias", self._p(graph, f"{name}.rel"), scores, clip=self.config.max_rel_distance)
        scores = graph.add(graph.add(scores, rel), attn_bias)
        probs = graph.op("softmax", scores, name=f"{tag}.attn")
        ctx = graph.op("transpose", graph.matmul(probs, v), axes=(0, 2, 1, 3))
        ctx = graph.op("merge_last", ctx)
        return graph.add(x, self._linear_node(graph, ctx, f"{name}.o"))

    def _convolution(self, graph: Graph, x: int, name: str, sub_mask: int) -> int:
        h = self._norm_node(graph, x, f"{name}.ln")
        h = graph.op("glu", self._linear_node(graph, h, f"{name}.pw1"))
        h = graph.mul(h, sub_mask)
        h = graph.conv1d(
            h, self._p(graph, f"{name}.dw.w"), padding=self.config.conv_kernel // 2, depthwise=True
        )
        h = graph.add(h, self._p(graph, f"{name}.dw.b"))
        h = graph.swish(self._norm_node(graph, h, f"{name}.norm"))
        return graph.add(x, self._linear_node(graph, h, f"{name}.pw2"))

    def build_block(self, graph: Graph, b: int, x: int, sub_mask: int, attn_bias: int) -> int:
        p = f"block{b}"
        x = self._feed_forward(graph, x, f"{p}.ff1")
        x = self._attention(graph, x, f"{p}.att", attn_bias, tag=p)
        x = self._convolution(graph, x, f"{p}.conv", sub_mask)
        x = self._feed_forward(graph, x, f"{p}.ff2")
        return self._norm_node(graph, x, f"{p}.out.ln")

    def build(self, graph: Graph, inputs: EncoderInputs) -> list[int]:
        """Subsampling plus all blocks; returns the tap node of every block."""
        x = self.build_subsample(graph, inputs)
        taps = []
        for b in range(1, self.config.n_blocks + 1):
            x = self.build_block(graph, b, x, inputs.sub_mask, inputs.attn_bias)
            taps.append(x)
        return taps

    # --- single-utterance inference -----------------------------------------

    def _cached(self, key: str, builder):
        graphs = getattr(self._local, "graphs", None)
        if graphs is None:
            graphs = self._local.graphs = {}
        if key not in graphs:
            graphs[key] = builder()
        return graphs[key]

    def _tap_graph(self) -> Graph:
        graph = Graph(self.dtype)
        taps = self.build(graph, encoder_placeholders(graph))
        for b, tap in enumerate(taps, 1):
            graph.alias(tap, f"tap{b}")
        return graph

    def run(self, spec: np.ndarray) -> dict[str, np.ndarray]:
        """Evaluate the tap graph on one normalised (T, 80) spectrogram; all named outputs."""
        t = spec.shape[0]
        if t < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {t}")
        graph = self._cached("taps", self._tap_graph)
        feeds = encoder_feeds(np.array([t]), t)
        feeds["features"] = spec[None]
        return forward_eval(graph, feeds)


def _single(x: np.ndarray) -> np.ndarray:
    return x[0]


def subsample(encoder: ConformerEncoder, spec: np.ndarray) -> np.ndarray:
    """(T, 80) normalised features -> (ceil(T/4), D)."""
    t = spec.shape[0]
    if t < MIN_FRAMES:
        raise ValueError(f"need at least {MIN_FRAMES} frames, got {t}")

    def builder():
        graph = Graph(encoder.dtype)
        out = encoder.build_subsample(graph, encoder_placeholders(graph))
        graph.alias(out, "subsampled")
        return graph

    graph = encoder._cached("subsample", builder)
    feeds = encoder_feeds(np.array([t]), t)
    feeds["features"] = spec[None]
    return _single(forward_eval(graph, feeds)["subsampled"])


def conformer_block(encoder: ConformerEncoder, b: int, seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run block b (1-based) on one (T', D) sequence; returns (output, attention probs (H, T', T'))."""
    if seq.ndim != 2 or seq.shape[1] != encoder.config.d_model:
        raise ValueError(f"block expects (T', {encoder.config.d_model}), got {seq.shape}")

    def builder():
        graph = Graph(encoder.dtype)
        x = graph.placeholder("seq")
        sub_mask = graph.placeholder("sub_mask")
        attn_bias = graph.placeholder("attn_bias")
        out = encoder.build_block(graph, b, x, sub_mask, attn_bias)
        graph.alias(out, "out")
        return graph

    graph = encoder._cached(f"block{b}", builder)
    t = seq.shape[0]
    outputs = forward_eval(
        graph,
        {
            "seq": seq[None],
            "sub_mask": np.ones((1, t, 1)),
            "attn_bias": np.zeros((1, 1, 1, t)),
        },
    )
    return _single(outputs["out"]), _single(outputs[f"block{b}.attn"])


def encode_with_taps(encoder: ConformerEncoder, spec: np.ndarray) -> LatentTapStack:
    """Subsampling then every block, recording each block output as a tap."""
    outputs = encoder.run(spec)
    taps = [_single(outputs[f"tap{b}"]) for b in range(1, encoder.config.n_blocks + 1)]
    return LatentTapStack(taps=taps, t_prime=taps[0].shape[0])
