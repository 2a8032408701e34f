"""Candidate-span enumeration under a sliding window, and gold-label alignment.

Token indices are 1-based and inclusive on both ends, matching the on-disk
dataset convention. The canonical ordering of enumerated spans is by end
token, then start token; every consumer of per-span arrays (labels,
probabilities, features) relies on this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

DEFAULT_WINDOW = 25


class Span(NamedTuple):
    """A contiguous token span, 1-based inclusive."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class SpanLabels:
    """Enumerated spans with parallel binary gold labels.

    ``spans`` is in canonical order (by end, then start); ``labels[k]`` is 1
    iff ``spans[k]`` is an exact member of the gold set. Gold mentions longer
    than the window cannot be enumerated; they are skipped for labeling and
    counted in ``n_window_dropped``.
    """

    spans: list[Span]
    labels: np.ndarray
    n_window_dropped: int = 0

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if len(self.spans) != self.labels.shape[0]:
            raise ValueError("spans and labels must be parallel")


def enumerate_spans(n: int, window: int = DEFAULT_WINDOW) -> list[Span]:
    """All spans of length <= window in a length-n sequence, canonical order.

    The count is n(n+1)/2 when n <= window, else window*n - window*(window-1)/2.
    """
    if n < 0:
        raise ValueError("sequence length must be >= 0")
    if window < 1:
        raise ValueError("window must be >= 1")
    spans = []
    for end in range(1, n + 1):
        for start in range(max(1, end - window + 1), end + 1):
            spans.append(Span(start, end))
    return spans


def span_count(n: int, window: int = DEFAULT_WINDOW) -> int:
    """Closed-form size of ``enumerate_spans(n, window)``."""
    if n <= window:
        return n * (n + 1) // 2
    return window * n - window * (window - 1) // 2


def label_spans(spans: list[Span], gold: Iterable[Span | tuple[int, int]],
                window: int = DEFAULT_WINDOW) -> SpanLabels:
    """Binary labels for enumerated spans by exact (start, end) membership."""
    gold_set = {Span(*g) for g in gold}
    dropped = sum(1 for g in gold_set if g.length > window)
    labels = np.fromiter(
        (1 if s in gold_set else 0 for s in spans), dtype=np.int8, count=len(spans)
    )
    return SpanLabels(spans=list(spans), labels=labels, n_window_dropped=dropped)


def class_counts(labels: np.ndarray) -> tuple[int, int]:
    """(positive, negative) counts of a binary label array."""
    labels = np.asarray(labels)
    pos = int(np.count_nonzero(labels))
    return pos, int(labels.size - pos)
