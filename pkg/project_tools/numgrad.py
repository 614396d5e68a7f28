"""
Minimal dense-tensor graph with reverse-mode differentiation.

A Graph is built once (placeholders, parameters, ops in insertion order) and
then evaluated with `forward_eval` for any feeds whose shapes agree with the
op contracts. `backward` walks the nodes in reverse insertion order and
returns gradients for every parameter that is not frozen.

Tensors are plain numpy arrays. Oracle tests run the graph in float64,
training loops in float32.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

logger = logging.getLogger(__name__)

Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class NumgradError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(NumgradError, ValueError):
    pass


class NonFiniteError(NumgradError, ArithmeticError):
    def __init__(self, node_label: str, message: str):
        super().__init__(message)
        self.node_label = node_label


class GraphStateError(NumgradError, RuntimeError):
    pass


# -----------------------------------------------------------------------------
# Rng
# -----------------------------------------------------------------------------


class Rng:
    """SplitMix64 stream. Identical seeds give identical streams everywhere."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_block(self, n: int) -> np.ndarray:
        """The next n outputs as uint64, equal to n calls of next()."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        # top 53 bits -> [0, 1)
        unit = (self.next_block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * unit

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller on pairs of uniforms."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return (self.next_block(n) % np.uint64(high)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        order = np.arange(n)
        draws = self.next_block(max(n - 1, 0))
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def fork(self) -> "Rng":
        return Rng(self.next())


# -----------------------------------------------------------------------------
# Op registry
# -----------------------------------------------------------------------------

ForwardFn = Callable[[list[Tensor], dict[str, Any]], tuple[Tensor, Any]]
BackwardFn = Callable[
    [Tensor, list[Tensor], Tensor, Any, dict[str, Any], list[bool]], list[Tensor | None]
]


@dataclass(frozen=True)
class OpDef:
    forward: ForwardFn
    backward: BackwardFn


OPS: dict[str, OpDef] = {}


def register_op(kind: str, forward: ForwardFn, backward: BackwardFn) -> None:
    OPS[kind] = OpDef(forward, backward)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x: Tensor) -> Tensor:
    return np.swapaxes(x, -1, -2)


def _matmul_fwd(ins, attrs):
    a, b = ins
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, ins, out, cache, attrs, needs):
    a, b = ins
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ _swap(b), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(_swap(a) @ g, b.shape)
    return [ga, gb]


def _add_bwd(g, ins, out, cache, attrs, needs):
    return [_unbroadcast(g, x.shape) if need else None for x, need in zip(ins, needs)]


def _sub_bwd(g, ins, out, cache, attrs, needs):
    a, b = ins
    return [
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    ]


def _mul_bwd(g, ins, out, cache, attrs, needs):
    a, b = ins
    return [
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ]


def _sigmoid_fwd(ins, attrs):
    return expit(ins[0]), None


def _sigmoid_bwd(g, ins, out, cache, attrs, needs):
    return [g * out * (1.0 - out)]


def _swish_fwd(ins, attrs):
    sig = expit(ins[0])
    return ins[0] * sig, sig


def _swish_bwd(g, ins, out, sig, attrs, needs):
    x = ins[0]
    return [g * (sig + x * sig * (1.0 - sig))]


def _relu_bwd(g, ins, out, cache, attrs, needs):
    return [g * (ins[0] > 0)]


def _tanh_bwd(g, ins, out, cache, attrs, needs):
    return [g * (1.0 - out * out)]


def _layer_norm_fwd(ins, attrs):
    x, gain, bias = ins
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    rstd = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_bwd(g, ins, out, cache, attrs, needs):
    x, gain, bias = ins
    xhat, rstd = cache
    gx = gg = gb = None
    if needs[0]:
        dxhat = g * gain
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
    if needs[1]:
        gg = _unbroadcast(g * xhat, gain.shape)
    if needs[2]:
        gb = _unbroadcast(g, bias.shape)
    return [gx, gg, gb]


def _conv_windows(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    # (N, T_out, C, K)
    return sliding_window_view(xp, kernel, axis=1)[:, ::stride]


def _conv1d_fwd(ins, attrs):
    x, w = ins
    depthwise = attrs.get("depthwise", False)
    kernel = w.shape[-1]
    if x.ndim != 3:
        raise ValueError(f"conv1d expects (N, T, C) input, got {x.shape}")
    channels = w.shape[0] if depthwise else w.shape[1]
    if x.shape[-1] != channels:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    windows = _conv_windows(x, kernel, attrs.get("stride", 1), attrs.get("padding", 0))
    if windows.shape[1] < 1:
        raise ValueError(f"input of length {x.shape[1]} too short for kernel {kernel}")
    if depthwise:
        out = np.einsum("ntck,ck->ntc", windows, w)
    else:
        out = np.einsum("ntck,ock->nto", windows, w)
    return out, windows


def _conv1d_bwd(g, ins, out, windows, attrs, needs):
    x, w = ins
    depthwise = attrs.get("depthwise", False)
    stride = attrs.get("stride", 1)
    padding = attrs.get("padding", 0)
    kernel = w.shape[-1]
    gx = gw = None
    if needs[1]:
        if depthwise:
            gw = np.einsum("ntck,ntc->ck", windows, g)
        else:
            gw = np.einsum("ntck,nto->ock", windows, g)
    if needs[0]:
        n, t_out = g.shape[0], g.shape[1]
        gxp = np.zeros((n, x.shape[1] + 2 * padding, x.shape[2]), dtype=g.dtype)
        span = stride * (t_out - 1) + 1
        for k in range(kernel):
            if depthwise:
                gxp[:, k : k + span : stride] += g * w[:, k]
            else:
                gxp[:, k : k + span : stride] += g @ w[:, :, k]
        gx = gxp[:, padding : padding + x.shape[1]]
    return [gx, gw]


def _softmax_fwd(ins, attrs):
    x = ins[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, ins, out, cache, attrs, needs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_softmax_fwd(ins, attrs):
    x = ins[0]
    return x - logsumexp(x, axis=-1, keepdims=True), None


def _log_softmax_bwd(g, ins, out, cache, attrs, needs):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


def _log_fwd(ins, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(ins[0]), None


def _mean_abs_fwd(ins, attrs):
    x = ins[0]
    return np.asarray(np.abs(x).mean(), dtype=x.dtype), None


def _mean_abs_bwd(g, ins, out, cache, attrs, needs):
    x = ins[0]
    return [g * np.sign(x) / x.size]


def _masked_mean_abs_fwd(ins, attrs):
    x, mask = ins
    weights = np.broadcast_to(mask, x.shape)
    denom = weights.sum()
    if denom <= 0:
        raise ValueError("mask selects no cells")
    return np.asarray((np.abs(x) * weights).sum() / denom, dtype=x.dtype), denom


def _masked_mean_abs_bwd(g, ins, out, denom, attrs, needs):
    x, mask = ins
    return [g * np.sign(x) * np.broadcast_to(mask, x.shape) / denom, None]


def _transpose_fwd(ins, attrs):
    return np.transpose(ins[0], attrs["axes"]), None


def _transpose_bwd(g, ins, out, cache, attrs, needs):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _split_last_fwd(ins, attrs):
    x = ins[0]
    parts = attrs["parts"]
    if x.shape[-1] % parts:
        raise ValueError(f"last extent {x.shape[-1]} not divisible by {parts}")
    return x.reshape(*x.shape[:-1], parts, x.shape[-1] // parts), None


def _merge_last_fwd(ins, attrs):
    x = ins[0]
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1]), None


def _reshape_back_bwd(g, ins, out, cache, attrs, needs):
    return [g.reshape(ins[0].shape)]


def _glu_fwd(ins, attrs):
    x = ins[0]
    half = x.shape[-1] // 2
    if x.shape[-1] % 2:
        raise ValueError(f"glu needs an even last extent, got {x.shape[-1]}")
    gate = expit(x[..., half:])
    return x[..., :half] * gate, gate


def _glu_bwd(g, ins, out, gate, attrs, needs):
    x = ins[0]
    half = x.shape[-1] // 2
    a = x[..., :half]
    return [np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=-1)]


def _rel_index(length: int, clip: int) -> np.ndarray:
    pos = np.arange(length)
    return np.clip(pos[None, :] - pos[:, None], -clip, clip) + clip


def _rel_bias_fwd(ins, attrs):
    table, ref = ins
    clip = attrs["clip"]
    if table.shape[-1] != 2 * clip + 1:
        raise ValueError(f"bias table {table.shape} does not span +-{clip}")
    idx = _rel_index(ref.shape[-2], clip)
    return table[:, idx], idx


def _rel_bias_bwd(g, ins, out, idx, attrs, needs):
    table = ins[0]
    gsum = g
    while gsum.ndim > 3:
        gsum = gsum.sum(axis=0)
    gt = np.zeros_like(table)
    np.add.at(gt, (slice(None), idx), gsum)
    return [gt, None]


def _interleave_fwd(ins, attrs):
    first = ins[0]
    for other in ins[1:]:
        if other.shape != first.shape:
            raise ValueError(f"interleave inputs differ: {first.shape} vs {other.shape}")
    stacked = np.stack(ins, axis=2)  # (N, T', k, F)
    n, t, k, f = stacked.shape
    return stacked.reshape(n, t * k, f), None


def _interleave_bwd(g, ins, out, cache, attrs, needs):
    n, t, f = ins[0].shape
    parts = g.reshape(n, t, len(ins), f)
    return [parts[:, :, k] if need else None for k, need in enumerate(needs)]


def _trim_like_fwd(ins, attrs):
    x, ref = ins
    length = ref.shape[1]
    if x.shape[1] < length:
        raise ValueError(f"cannot trim {x.shape[1]} frames to {length}")
    return x[:, :length], None


def _trim_like_bwd(g, ins, out, cache, attrs, needs):
    x = ins[0]
    gx = np.zeros_like(x)
    gx[:, : g.shape[1]] = g
    return [gx, None]


register_op("matmul", _matmul_fwd, _matmul_bwd)
register_op("add", lambda ins, attrs: (ins[0] + ins[1], None), _add_bwd)
register_op("sub", lambda ins, attrs: (ins[0] - ins[1], None), _sub_bwd)
register_op("mul", lambda ins, attrs: (ins[0] * ins[1], None), _mul_bwd)
register_op(
    "scale",
    lambda ins, attrs: (ins[0] * attrs["factor"], None),
    lambda g, ins, out, cache, attrs, needs: [g * attrs["factor"]],
)
register_op("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_op("swish", _swish_fwd, _swish_bwd)
register_op("relu", lambda ins, attrs: (np.maximum(ins[0], 0), None), _relu_bwd)
register_op("tanh", lambda ins, attrs: (np.tanh(ins[0]), None), _tanh_bwd)
register_op("layer_norm", _layer_norm_fwd, _layer_norm_bwd)
register_op("conv1d", _conv1d_fwd, _conv1d_bwd)
register_op("softmax", _softmax_fwd, _softmax_bwd)
register_op("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_op("log", _log_fwd, lambda g, ins, out, cache, attrs, needs: [g / ins[0]])
register_op("mean_abs", _mean_abs_fwd, _mean_abs_bwd)
register_op("masked_mean_abs", _masked_mean_abs_fwd, _masked_mean_abs_bwd)
register_op("transpose", _transpose_fwd, _transpose_bwd)
register_op("split_last", _split_last_fwd, _reshape_back_bwd)
register_op("merge_last", _merge_last_fwd, _reshape_back_bwd)
register_op("glu", _glu_fwd, _glu_bwd)
register_op("rel_bias", _rel_bias_fwd, _rel_bias_bwd)
register_op("interleave", _interleave_fwd, _interleave_bwd)
register_op("trim_like", _trim_like_fwd, _trim_like_bwd)


# -----------------------------------------------------------------------------
# Graph
# -----------------------------------------------------------------------------

_SOURCE_KINDS = ("placeholder", "param", "const")


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    value: Tensor | None = None
    cache: Any = None

    @property
    def label(self) -> str:
        return f"{self.kind} '{self.name}'" if self.name else f"{self.kind}#{self.id}"


class Graph:
    """Ordered op records; topological order is insertion order."""

    def __init__(self, dtype: type = np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.names: dict[str, int] = {}
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.last_feeds: dict[str, Tensor] | None = None
        self._evaluated = False

    # --- construction -------------------------------------------------------

    def _append(self, kind: str, inputs: Sequence[int] = (), name: str | None = None, **attrs) -> int:
        node_id = len(self.nodes)
        for i in inputs:
            if not 0 <= i < node_id:
                raise GraphStateError(f"{kind}: input node {i} does not precede node {node_id}")
        if name is not None:
            if name in self.names:
                raise GraphStateError(f"duplicate node name '{name}'")
            self.names[name] = node_id
        self.nodes.append(Node(node_id, kind, tuple(inputs), attrs, name))
        self._evaluated = False
        return node_id

    def placeholder(self, name: str) -> int:
        return self._append("placeholder", name=name)

    def parameter(self, name: str, value: Tensor) -> int:
        """Register a parameter. The array is shared, not copied: in-place updates are seen by every graph."""
        if value.dtype != self.dtype:
            raise GraphStateError(f"parameter '{name}' is {value.dtype}, graph is {self.dtype}")
        self.params[name] = value
        return self._append("param", name=name)

    def constant(self, value: Tensor | float, name: str | None = None) -> int:
        node_id = self._append("const", name=name)
        self.nodes[node_id].value = np.asarray(value, dtype=self.dtype)
        return node_id

    def op(self, kind: str, *inputs: int, name: str | None = None, **attrs) -> int:
        if kind not in OPS:
            raise GraphStateError(f"unknown op kind '{kind}'")
        return self._append(kind, inputs, name=name, **attrs)

    def matmul(self, a: int, b: int, name: str | None = None) -> int:
        return self.op("matmul", a, b, name=name)

    def add(self, a: int, b: int, name: str | None = None) -> int:
        return self.op("add", a, b, name=name)

    def sub(self, a: int, b: int, name: str | None = None) -> int:
        return self.op("sub", a, b, name=name)

    def mul(self, a: int, b: int, name: str | None = None) -> int:
        return self.op("mul", a, b, name=name)

    def scale(self, a: int, factor: float, name: str | None = None) -> int:
        return self.op("scale", a, name=name, factor=factor)

    def sigmoid(self, a: int, name: str | None = None) -> int:
        return self.op("sigmoid", a, name=name)

    def swish(self, a: int, name: str | None = None) -> int:
        return self.op("swish", a, name=name)

    def layer_norm(self, x: int, gain: int, bias: int, name: str | None = None) -> int:
        return self.op("layer_norm", x, gain, bias, name=name, eps=1e-5)

    def conv1d(
        self,
        x: int,
        w: int,
        stride: int = 1,
        padding: int = 0,
        depthwise: bool = False,
        name: str | None = None,
    ) -> int:
        return self.op("conv1d", x, w, name=name, stride=stride, padding=padding, depthwise=depthwise)

    def linear(self, x: int, w: int, b: int | None = None) -> int:
        out = self.matmul(x, w)
        return self.add(out, b) if b is not None else out

    def alias(self, node_id: int, name: str) -> int:
        """Name an existing unnamed node so forward_eval reports it."""
        node = self.nodes[node_id]
        if node.name is not None:
            raise GraphStateError(f"{node.label} is already named")
        if name in self.names:
            raise GraphStateError(f"duplicate node name '{name}'")
        node.name = name
        self.names[name] = node_id
        return node_id

    # --- lookup -------------------------------------------------------------

    def node_id(self, ref: int | str) -> int:
        if isinstance(ref, str):
            if ref not in self.names:
                raise GraphStateError(f"no node named '{ref}'")
            return self.names[ref]
        return ref

    def value(self, ref: int | str) -> Tensor:
        node = self.nodes[self.node_id(ref)]
        if node.value is None:
            raise GraphStateError(f"{node.label} has not been evaluated")
        return node.value

    def trainable(self) -> list[str]:
        return [name for name in self.params if name not in self.frozen]


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


def forward_eval(graph: Graph, feeds: dict[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate every node; return the values of named op nodes."""
    for node in graph.nodes:
        if node.kind == "placeholder":
            if node.name not in feeds:
                raise GraphStateError(f"missing feed for placeholder '{node.name}'")
            node.value = np.asarray(feeds[node.name], dtype=graph.dtype)
        elif node.kind == "param":
            node.value = graph.params[node.name]
        elif node.kind == "const":
            continue
        else:
            inputs = [graph.nodes[i].value for i in node.inputs]
            try:
                out, cache = OPS[node.kind].forward(inputs, node.attrs)
            except ValueError as exc:
                described = ", ".join(
                    f"{graph.nodes[i].label} {graph.nodes[i].value.shape}" for i in node.inputs
                )
                raise ShapeError(f"{node.label} failed on inputs [{described}]: {exc}") from exc
            out = np.asarray(out, dtype=graph.dtype)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(node.label, f"non-finite output from {node.label}")
            node.value, node.cache = out, cache
    graph.last_feeds = dict(feeds)
    graph._evaluated = True
    return {
        node.name: node.value
        for node in graph.nodes
        if node.name is not None and node.kind not in _SOURCE_KINDS
    }


def freeze(graph: Graph, param_names: Iterable[str]) -> None:
    names = set(param_names)
    unknown = sorted(names - set(graph.params))
    if unknown:
        raise GraphStateError(f"cannot freeze unknown parameters: {unknown}")
    graph.frozen |= names


def _requires_grad(graph: Graph, upto: int) -> list[bool]:
    flags = []
    for node in graph.nodes[: upto + 1]:
        if node.kind == "param":
            flags.append(node.name not in graph.frozen)
        elif node.kind in _SOURCE_KINDS:
            flags.append(False)
        else:
            flags.append(any(flags[i] for i in node.inputs))
    return flags


def backward(graph: Graph, loss_node: int | str) -> dict[str, Tensor]:
    """d(loss)/d(param) for every unfrozen parameter (zeros where unreached)."""
    loss_id = graph.node_id(loss_node)
    loss = graph.nodes[loss_id]
    if not graph._evaluated or loss.value is None:
        raise GraphStateError("backward called before forward_eval")
    if loss.value.size != 1:
        raise GraphStateError(f"{loss.label} is not scalar: shape {loss.value.shape}")

    needs_grad = _requires_grad(graph, loss_id)
    grads: dict[int, Tensor] = {loss_id: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss_id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not needs_grad[node.id]:
            continue
        if node.kind == "param":
            grads[node.id] = g
            continue
        inputs = [graph.nodes[i].value for i in node.inputs]
        needs = [needs_grad[i] for i in node.inputs]
        input_grads = OPS[node.kind].backward(g, inputs, node.value, node.cache, node.attrs, needs)
        for i, gi, need in zip(node.inputs, input_grads, needs):
            if not need or gi is None:
                continue
            grads[i] = grads[i] + gi if i in grads else gi

    result = {}
    for name in graph.trainable():
        node_id = graph.names[name]
        g = grads.get(node_id)
        result[name] = g.astype(graph.dtype) if g is not None else np.zeros_like(graph.params[name])
    return result


# -----------------------------------------------------------------------------
# Gradient verification
# -----------------------------------------------------------------------------


@dataclass
class GradientReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(
    graph: Graph,
    loss_node: int | str,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradientReport:
    """Central differences against `backward` for every unfrozen parameter.

    The error is |analytic - numeric| / max(floor, |analytic| + |numeric|), so
    gradients smaller than `floor` are compared on an absolute scale.

    Uses the feeds of the most recent forward_eval. With `entries`, only that
    many randomly chosen coordinates of each larger parameter are perturbed.
    """
    if graph.dtype != np.float64:
        raise GraphStateError("gradient checks need a float64 graph")
    if graph.last_feeds is None:
        raise GraphStateError("check_gradients needs a prior forward_eval for its feeds")
    feeds = graph.last_feeds
    loss_id = graph.node_id(loss_node)

    forward_eval(graph, feeds)
    analytic = backward(graph, loss_id)
    report = GradientReport(tolerance)
    rng = Rng(seed)
    for name, grad in analytic.items():
        param = graph.params[name]
        flat = param.reshape(-1)
        if entries is not None and flat.size > entries:
            coords = np.sort(rng.permutation(flat.size)[:entries])
        else:
            coords = np.arange(flat.size)
        numeric = np.zeros(coords.size)
        for n, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + step
            forward_eval(graph, feeds)
            upper = float(graph.value(loss_id))
            flat[i] = original - step
            forward_eval(graph, feeds)
            lower = float(graph.value(loss_id))
            flat[i] = original
            numeric[n] = (upper - lower) / (2 * step)
        picked = grad.reshape(-1)[coords]
        rel = np.abs(picked - numeric) / np.maximum(floor, np.abs(picked) + np.abs(numeric))
        report.errors[name] = float(rel.max()) if rel.size else 0.0
        if report.errors[name] > tolerance:
            logger.warning("gradient mismatch on %s: max rel. error %.3e", name, report.errors[name])
    forward_eval(graph, feeds)
    return report
