"""
Tests for the graph engine: Rng streams, op gradients and graph state errors.
"""
import numpy as np
import pytest

from conftest import attach_scalar_loss
from project_tools import numgrad
from project_tools.numgrad import (
    Graph,
    GraphStateError,
    NonFiniteError,
    Rng,
    ShapeError,
    backward,
    check_gradients,
    forward_eval,
    freeze,
)


# --- Rng ----------------------------------------------------------------------


def test_splitmix64_reference_vectors():
    rng = Rng(0)
    assert [rng.next() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]
    rng = Rng(42)
    assert [rng.next() for _ in range(3)] == [
        0xBDD732262FEB6E95,
        0x28EFE333B266F103,
        0x47526757130F9F52,
    ]


def test_next_block_matches_scalar_stream():
    a, b = Rng(99), Rng(99)
    block = a.next_block(17)
    assert [int(v) for v in block] == [b.next() for _ in range(17)]
    assert a.next() == b.next()


def test_uniform_and_integers_ranges():
    rng = Rng(5)
    u = rng.uniform(1000, -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
    k = rng.integers(1000, 7)
    assert set(k.tolist()) <= set(range(7))


def test_permutation_is_deterministic_permutation():
    first = Rng(3).permutation(25)
    assert sorted(first.tolist()) == list(range(25))
    assert np.array_equal(first, Rng(3).permutation(25))
    assert not np.array_equal(first, Rng(4).permutation(25))


def test_normal_moments():
    z = Rng(11).normal(20001)
    assert z.shape == (20001,)
    assert abs(z.mean()) < 0.05
    assert abs(z.std() - 1.0) < 0.05


# --- gradients ----------------------------------------------------------------


def _param(graph, rng, name, shape, scale=0.5):
    return graph.parameter(name, rng.uniform(int(np.prod(shape)), -scale, scale).reshape(shape))


def _unary(kind):
    def build(graph, rng):
        x = _param(graph, rng, "x", (2, 3, 4))
        return graph.op(kind, x)

    return build


def _build_matmul(graph, rng):
    return graph.matmul(_param(graph, rng, "a", (2, 3, 4)), _param(graph, rng, "b", (4, 5)))


def _build_broadcast_ops(graph, rng):
    a = _param(graph, rng, "a", (2, 3, 4))
    b = _param(graph, rng, "b", (4,))
    c = _param(graph, rng, "c", (2, 1, 4))
    return graph.mul(graph.sub(graph.add(a, b), c), c)


def _build_layer_norm(graph, rng):
    x = _param(graph, rng, "x", (2, 3, 6))
    gain = graph.parameter("gain", 1.0 + rng.uniform(6, -0.2, 0.2))
    bias = _param(graph, rng, "bias", (6,))
    return graph.layer_norm(x, gain, bias)


def _build_conv(graph, rng):
    x = _param(graph, rng, "x", (2, 7, 3))
    w = _param(graph, rng, "w", (4, 3, 3))
    return graph.conv1d(x, w, stride=2, padding=1)


def _build_depthwise(graph, rng):
    x = _param(graph, rng, "x", (1, 6, 3))
    w = _param(graph, rng, "w", (3, 5))
    return graph.conv1d(x, w, padding=2, depthwise=True)


def _build_heads(graph, rng):
    x = _param(graph, rng, "x", (2, 3, 4))
    split = graph.op("split_last", x, parts=2)
    swapped = graph.op("transpose", split, axes=(0, 2, 1, 3))
    back = graph.op("transpose", swapped, axes=(0, 2, 1, 3))
    return graph.op("merge_last", graph.scale(back, 1.5))


def _build_rel_bias(graph, rng):
    table = _param(graph, rng, "table", (2, 5))
    ref = graph.constant(np.zeros((1, 2, 6, 6)))
    return graph.op("rel_bias", table, ref, clip=2)


def _build_interleave_trim(graph, rng):
    parts = [_param(graph, rng, f"p{k}", (1, 3, 2)) for k in range(4)]
    mixed = graph.op("interleave", *parts)
    return graph.op("trim_like", mixed, graph.constant(np.zeros((1, 10, 2))))


def _build_relu(graph, rng):
    magnitude = rng.uniform(24, 0.1, 0.5)
    sign = np.where(rng.uniform(24) < 0.5, -1.0, 1.0)
    x = graph.parameter("x", (sign * magnitude).reshape(2, 3, 4))
    return graph.op("relu", x)


def _build_log(graph, rng):
    x = graph.parameter("x", 0.5 + rng.uniform(12, 0.0, 1.0).reshape(3, 4))
    return graph.op("log", x)


OP_BUILDERS = {
    "matmul": _build_matmul,
    "add_sub_mul": _build_broadcast_ops,
    "sigmoid": _unary("sigmoid"),
    "swish": _unary("swish"),
    "tanh": _unary("tanh"),
    "softmax": _unary("softmax"),
    "log_softmax": _unary("log_softmax"),
    "glu": _unary("glu"),
    "relu": _build_relu,
    "log": _build_log,
    "layer_norm": _build_layer_norm,
    "conv1d": _build_conv,
    "conv1d_depthwise": _build_depthwise,
    "heads": _build_heads,
    "rel_bias": _build_rel_bias,
    "interleave_trim": _build_interleave_trim,
}


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("op_name", sorted(OP_BUILDERS))
def test_op_gradients_match_finite_differences(op_name, seed):
    graph = Graph()
    out = OP_BUILDERS[op_name](graph, Rng(seed))
    loss = attach_scalar_loss(graph, out, {}, seed=seed + 100)
    report = check_gradients(graph, loss)
    assert report.passed, report.errors


def _broadcast_or_tiled(a, b, tiled):
    graph = Graph()
    pa = graph.parameter("a", a.copy())
    pb = graph.parameter("b", np.tile(b, (2, 3, 1)) if tiled else b.copy())
    loss = attach_scalar_loss(graph, graph.add(pa, pb), {}, seed=8)
    return forward_eval(graph, {})["loss"], backward(graph, loss)


def test_broadcast_add_matches_explicit_tile():
    rng = Rng(12)
    a = rng.uniform(24, -1.0, 1.0).reshape(2, 3, 4)
    b = rng.uniform(4, -1.0, 1.0)
    loss, grads = _broadcast_or_tiled(a, b, tiled=False)
    tiled_loss, tiled_grads = _broadcast_or_tiled(a, b, tiled=True)
    assert float(loss) == pytest.approx(float(tiled_loss), abs=1e-15)
    np.testing.assert_allclose(grads["a"], tiled_grads["a"], atol=1e-15)
    np.testing.assert_allclose(grads["b"], tiled_grads["b"].sum(axis=(0, 1)), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_mlp_gradients(seed):
    rng = Rng(seed)
    graph = Graph()
    h = graph.constant(rng.uniform(20, -1.0, 1.0).reshape(5, 4))
    widths = [4, 6, 6, 3]
    activations = ["tanh", "sigmoid", None]
    for k, (n_in, n_out, act) in enumerate(zip(widths, widths[1:], activations)):
        w = _param(graph, rng, f"W{k}", (n_in, n_out), scale=0.8)
        b = _param(graph, rng, f"b{k}", (n_out,), scale=0.2)
        h = graph.linear(h, w, b)
        if act:
            h = graph.op(act, h)
    loss = attach_scalar_loss(graph, h, {}, seed=seed + 50)
    report = check_gradients(graph, loss)
    assert report.passed, report.errors
    assert set(report.errors) == {"W0", "b0", "W1", "b1", "W2", "b2"}


def test_masked_mean_abs_gradient_and_value():
    graph = Graph()
    x = graph.parameter("x", Rng(0).uniform(12, 1.0, 2.0).reshape(1, 4, 3))
    mask = np.array([[[1.0], [1.0], [0.0], [1.0]]])
    loss = graph.op("masked_mean_abs", x, graph.constant(mask), name="loss")
    forward_eval(graph, {})
    expected = np.abs(graph.params["x"][0, [0, 1, 3]]).mean()
    assert float(graph.value(loss)) == pytest.approx(expected, abs=1e-12)
    assert check_gradients(graph, loss).passed


def test_corrupted_backward_is_caught(monkeypatch):
    real = numgrad.OPS["swish"]
    monkeypatch.setitem(
        numgrad.OPS,
        "swish",
        numgrad.OpDef(real.forward, lambda g, ins, out, cache, attrs, needs: [1.1 * g * cache]),
    )
    graph = Graph()
    out = _unary("swish")(graph, Rng(0))
    loss = attach_scalar_loss(graph, out, {})
    report = check_gradients(graph, loss)
    assert not report.passed
    assert report.failures == ["x"]


def test_check_gradients_with_entry_subset():
    graph = Graph()
    out = _build_matmul(graph, Rng(4))
    loss = attach_scalar_loss(graph, out, {})
    assert check_gradients(graph, loss, entries=3).passed


# --- graph state --------------------------------------------------------------


def test_backward_before_forward_fails():
    graph = Graph()
    x = graph.parameter("x", np.ones(3))
    loss = graph.op("mean_abs", x)
    with pytest.raises(GraphStateError):
        backward(graph, loss)


def test_non_scalar_loss_fails():
    graph = Graph()
    x = graph.parameter("x", np.ones(3))
    y = graph.swish(x)
    forward_eval(graph, {})
    with pytest.raises(GraphStateError, match="not scalar"):
        backward(graph, y)


def test_frozen_parameters_receive_no_gradient():
    graph = Graph()
    a = graph.parameter("a", np.full((2, 2), 0.5))
    b = graph.parameter("b", np.full((2, 2), 0.25))
    loss = graph.op("mean_abs", graph.matmul(a, b))
    freeze(graph, ["a"])
    forward_eval(graph, {})
    grads = backward(graph, loss)
    assert list(grads) == ["b"]
    with pytest.raises(GraphStateError):
        freeze(graph, ["nope"])


def test_unreached_parameter_gets_zero_gradient():
    graph = Graph()
    a = graph.parameter("a", np.ones(3))
    graph.parameter("unused", np.ones(2))
    loss = graph.op("mean_abs", a)
    forward_eval(graph, {})
    grads = backward(graph, loss)
    assert np.array_equal(grads["unused"], np.zeros(2))


def test_parameters_are_shared_not_copied():
    value = np.ones(3)
    graph = Graph()
    x = graph.parameter("x", value)
    y = graph.scale(x, 2.0, name="y")
    value[:] = 5.0
    assert np.array_equal(forward_eval(graph, {})["y"], np.full(3, 10.0))
    assert graph.value(y)[0] == 10.0


def test_parameter_dtype_must_match_graph():
    graph = Graph(np.float32)
    with pytest.raises(GraphStateError):
        graph.parameter("x", np.ones(3))


def test_shape_error_names_the_inputs():
    graph = Graph()
    a = graph.placeholder("a")
    b = graph.placeholder("b")
    graph.matmul(a, b, name="product")
    with pytest.raises(ShapeError, match="product") as info:
        forward_eval(graph, {"a": np.ones((2, 3)), "b": np.ones((4, 2))})
    assert "placeholder 'a'" in str(info.value)


def test_non_finite_output_names_first_node():
    graph = Graph()
    x = graph.placeholder("x")
    graph.op("log", x, name="logx")
    with pytest.raises(NonFiniteError) as info:
        forward_eval(graph, {"x": np.array([1.0, 0.0])})
    assert info.value.node_label == "log 'logx'"


def test_missing_feed_fails():
    graph = Graph()
    graph.placeholder("x")
    with pytest.raises(GraphStateError, match="missing feed"):
        forward_eval(graph, {})


def test_gradient_check_requires_float64():
    graph = Graph(np.float32)
    x = graph.parameter("x", np.ones(2, dtype=np.float32))
    loss = graph.op("mean_abs", x)
    forward_eval(graph, {})
    with pytest.raises(GraphStateError):
        check_gradients(graph, loss)


def test_alias_names_existing_node():
    graph = Graph()
    x = graph.placeholder("x")
    y = graph.swish(x)
    graph.alias(y, "activated")
    assert "activated" in forward_eval(graph, {"x": np.zeros(2)})
    with pytest.raises(GraphStateError):
        graph.alias(y, "again")
