"""
Word error rate via Levenshtein edit distance over whitespace tokens.
"""
from __future__ import annotations

from typing import Sequence


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost Levenshtein distance between two token sequences."""
    previous = list(range(len(b) + 1))
    for i, token_a in enumerate(a, 1):
        current = [i] + [0] * len(b)
        for j, token_b in enumerate(b, 1):
            current[j] = min(
                previous[j] + 1,  # deletion
                current[j - 1] + 1,  # insertion
                previous[j - 1] + (token_a != token_b),  # substitution
            )
        previous = current
    return previous[-1]


def wer(ref: Sequence[str] | str, hyp: Sequence[str] | str) -> float:
    """
    Word error rate: edit distance / max(1, len(ref)).

    Strings are split on whitespace. An empty reference scores len(hyp),
    i.e. every hypothesis word counts as an insertion.
    """
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    return edit_distance(ref, hyp) / max(1, len(ref))
