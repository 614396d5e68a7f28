"""
CTC loss in log space, exact gradients, and greedy best-path decoding.

Registers the batched "ctc" op with numgrad so acoustic models can train
through it: inputs are log-softmax rows (N, T', V), padded int targets
(N, L_max), input lengths (N,) and target lengths (N,); the output is the
batch-mean negative log likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from project_tools.numgrad import register_op

BLANK = 0


class TargetUnreachableError(ValueError):
    pass


@dataclass
class Transcript:
    ids: list[int] = field(default_factory=list)
    text: str = ""


def extend_with_blanks(target: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Blank-augmented label sequence l' (length 2L+1) and its skip-allowed flags."""
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(len(ext), dtype=bool)
    for s in range(3, len(ext), 2):
        skip[s] = ext[s] != ext[s - 2]
    return ext, skip


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit `target`: one frame per label, one blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _shift(x: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(x, -np.inf)
    out[by:] = x[:-by]
    return out


def _forward_backward(log_probs: np.ndarray, target: Sequence[int]):
    t_len = log_probs.shape[0]
    if any(not 1 <= k < log_probs.shape[1] for k in target):
        raise ValueError(f"target ids {list(target)} outside [1, {log_probs.shape[1] - 1}]")
    if t_len < min_frames(target):
        raise TargetUnreachableError(
            f"target unreachable: {len(target)} labels need {min_frames(target)} frames, got {t_len}"
        )
    ext, skip = extend_with_blanks(target)
    emit = log_probs[:, ext]  # (T, S)
    n_states = len(ext)

    alpha = np.full((t_len, n_states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        paths = [prev, _shift(prev, 1)]
        if n_states > 2:
            paths.append(np.where(skip, _shift(prev, 2), -np.inf))
        alpha[t] = logsumexp(np.stack(paths), axis=0) + emit[t]

    beta = np.full((t_len, n_states), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if n_states > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_back = np.zeros(n_states, dtype=bool)
    skip_back[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        paths = [nxt, np.concatenate([nxt[1:], [-np.inf]])]
        if n_states > 2:
            paths.append(np.where(skip_back, np.concatenate([nxt[2:], [-np.inf, -np.inf]]), -np.inf))
        beta[t] = logsumexp(np.stack(paths), axis=0) + emit[t]

    ends = [alpha[-1, -1]] + ([alpha[-1, -2]] if n_states > 1 else [])
    log_likelihood = logsumexp(ends)
    return ext, alpha, beta, emit, log_likelihood


def ctc_loss(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """-log p(target | input) for one utterance of log-softmax rows (T', V)."""
    *_, log_likelihood = _forward_backward(np.asarray(log_probs, dtype=np.float64), target)
    return float(-log_likelihood)


def ctc_loss_and_grad(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to the log-prob inputs."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    ext, alpha, beta, emit, log_likelihood = _forward_backward(log_probs, target)
    # alpha and beta both include the emission at t
    occupancy = alpha + beta - emit - log_likelihood
    grad = np.zeros_like(log_probs)
    for k in np.unique(ext):
        grad[:, k] = -np.exp(logsumexp(occupancy[:, ext == k], axis=1))
    return float(-log_likelihood), grad


def _ctc_op_fwd(ins, attrs):
    log_probs, targets, input_lengths, target_lengths = ins
    batch = log_probs.shape[0]
    total = 0.0
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    for n in range(batch):
        t_len = int(input_lengths[n])
        target = [int(k) for k in targets[n, : int(target_lengths[n])]]
        loss, g = ctc_loss_and_grad(log_probs[n, :t_len], target)
        total += loss
        grad[n, :t_len] = g
    return np.asarray(total / batch), (grad / batch).astype(log_probs.dtype)


def _ctc_op_bwd(g, ins, out, grad, attrs, needs):
    return [g * grad, None, None, None]


register_op("ctc", _ctc_op_fwd, _ctc_op_bwd)


def greedy_decode(log_probs: np.ndarray, alphabet: str | None = None) -> Transcript:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(log_probs), axis=-1)
    ids = []
    previous = None
    for k in best.tolist():
        if k != previous and k != BLANK:
            ids.append(k)
        previous = k
    text = "".join(alphabet[k - 1] for k in ids) if alphabet else ""
    return Transcript(ids, text)
