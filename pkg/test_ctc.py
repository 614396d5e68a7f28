"""
Tests for the CTC loss, greedy decoding and word error rate.
"""
import itertools

import numpy as np
import pytest
from scipy.special import log_softmax, logsumexp

from project_tools.ctc import (
    BLANK,
    TargetUnreachableError,
    ctc_loss,
    ctc_loss_and_grad,
    greedy_decode,
    min_frames,
)
from project_tools.metrics import edit_distance, wer
from project_tools.numgrad import Graph, Rng, check_gradients, forward_eval

ALPHABET = "ab"


def _log_probs(t, v, seed):
    return log_softmax(Rng(seed).normal(t * v).reshape(t, v) * 2.0, axis=-1)


def _collapse(path):
    out, previous = [], None
    for k in path:
        if k != previous and k != BLANK:
            out.append(k)
        previous = k
    return out


def _brute_force_nll(log_probs, target):
    t, v = log_probs.shape
    terms = [
        sum(log_probs[i, k] for i, k in enumerate(path))
        for path in itertools.product(range(v), repeat=t)
        if _collapse(path) == list(target)
    ]
    return -logsumexp(terms)


# --- loss ---------------------------------------------------------------------


def test_single_frame_uniform():
    assert ctc_loss(np.log([[0.5, 0.5]]), [1]) == pytest.approx(-np.log(0.5), abs=1e-12)


def test_two_frames_uniform():
    # paths "a a", "a -", "- a" out of four
    assert ctc_loss(np.log(np.full((2, 2), 0.5)), [1]) == pytest.approx(-np.log(0.75), abs=1e-12)


def test_matches_path_enumeration():
    rng = Rng(0)
    checked = 0
    while checked < 200:
        t = 1 + int(rng.integers(1, 4)[0])
        v = 2 + int(rng.integers(1, 2)[0])
        length = int(rng.integers(1, 3)[0])
        target = [1 + int(k) for k in rng.integers(length, v - 1)]
        if min_frames(target) > t:
            continue
        log_probs = _log_probs(t, v, seed=checked)
        assert ctc_loss(log_probs, target) == pytest.approx(_brute_force_nll(log_probs, target), abs=1e-9)
        checked += 1


def test_empty_target_is_all_blanks():
    log_probs = _log_probs(4, 3, seed=1)
    assert ctc_loss(log_probs, []) == pytest.approx(-log_probs[:, BLANK].sum(), abs=1e-12)


def test_unreachable_target_fails():
    with pytest.raises(TargetUnreachableError):
        ctc_loss(np.log([[0.5, 0.5]]), [1, 1])
    with pytest.raises(TargetUnreachableError):
        ctc_loss(_log_probs(2, 3, seed=0), [1, 2, 1])


def test_target_ids_must_be_labels():
    with pytest.raises(ValueError):
        ctc_loss(_log_probs(3, 3, seed=0), [3])
    with pytest.raises(ValueError):
        ctc_loss(_log_probs(3, 3, seed=0), [BLANK])


def test_relabelling_is_irrelevant():
    log_probs = _log_probs(6, 4, seed=2)
    target = [1, 2, 2, 3]
    relabel = {1: 3, 2: 1, 3: 2}
    permuted = log_probs.copy()
    for old, new in relabel.items():
        permuted[:, new] = log_probs[:, old]
    assert ctc_loss(permuted, [relabel[k] for k in target]) == pytest.approx(
        ctc_loss(log_probs, target), abs=1e-12
    )


def test_gradient_matches_finite_differences():
    log_probs = _log_probs(5, 4, seed=3)
    target = [2, 1, 2]
    _, grad = ctc_loss_and_grad(log_probs, target)
    step = 1e-6
    numeric = np.zeros_like(log_probs)
    for idx in np.ndindex(*log_probs.shape):
        up, down = log_probs.copy(), log_probs.copy()
        up[idx] += step
        down[idx] -= step
        numeric[idx] = (ctc_loss(up, target) - ctc_loss(down, target)) / (2 * step)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_batched_op_trains_through_log_softmax():
    graph = Graph()
    logits = graph.parameter("logits", Rng(4).normal(2 * 5 * 3).reshape(2, 5, 3))
    log_probs = graph.op("log_softmax", logits)
    loss = graph.op(
        "ctc",
        log_probs,
        graph.constant(np.array([[1, 2], [2, 0]])),
        graph.constant(np.array([5, 3])),
        graph.constant(np.array([2, 1])),
        name="loss",
    )
    forward_eval(graph, {})
    lp = graph.value(log_probs)
    expected = (ctc_loss(lp[0], [1, 2]) + ctc_loss(lp[1, :3], [2])) / 2
    assert float(graph.value(loss)) == pytest.approx(expected, abs=1e-12)
    report = check_gradients(graph, loss)
    assert report.passed, report.errors


# --- greedy decoding ----------------------------------------------------------


def _one_hot(path, v=3):
    return np.log(np.eye(v)[path] * 0.97 + 0.01)


@pytest.mark.parametrize(
    "path, text",
    [
        ([1, 1, 0, 2], "ab"),
        ([0, 0, 0], ""),
        ([1, 0, 1], "aa"),
        ([2, 2, 2, 1], "ba"),
    ],
)
def test_greedy_collapse(path, text):
    transcript = greedy_decode(_one_hot(path), ALPHABET)
    assert transcript.text == text
    assert transcript.ids == [ALPHABET.index(c) + 1 for c in text]


def test_greedy_inverts_any_valid_alignment():
    rng = Rng(5)
    for _ in range(50):
        ids = [1 + int(k) for k in rng.integers(1 + int(rng.integers(1, 6)[0]), 2)]
        path = []
        for k in ids:
            if path and path[-1] == k:
                path.append(BLANK)
            path.extend([k] * (1 + int(rng.integers(1, 3)[0])))
            path.extend([BLANK] * int(rng.integers(1, 2)[0]))
        assert greedy_decode(_one_hot(path)).ids == ids


# --- word error rate ----------------------------------------------------------


def test_wer_examples():
    assert wer("a b c", "a x c") == pytest.approx(1 / 3)
    assert wer("abc def", "abc def") == 0.0
    assert wer("", "abc def") == 2.0
    assert wer("abc def", "") == 1.0
    assert wer(["abc"], ["abd", "abc"]) == 1.0


def _exhaustive_distance(a, b):
    """Minimum edit-script cost by exploring every script, no tabulation."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        _exhaustive_distance(a[1:], b) + 1,
        _exhaustive_distance(a, b[1:]) + 1,
        _exhaustive_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


def test_edit_distance_matches_exhaustive_search():
    rng = Rng(6)
    words = ["abc", "def", "ghi"]
    for _ in range(500):
        a = [words[int(k)] for k in rng.integers(int(rng.integers(1, 7)[0]), 3)]
        b = [words[int(k)] for k in rng.integers(int(rng.integers(1, 7)[0]), 3)]
        expected = _exhaustive_distance(tuple(a), tuple(b))
        assert edit_distance(a, b) == expected
        assert wer(a, b) == expected / max(1, len(a))
        assert edit_distance(a, b) == edit_distance(b, a)
