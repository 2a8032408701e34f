"""Turn span probabilities into mention sets.

Two modes: thresholding keeps every span at or above tau and permits nesting
and overlap; greedy flat decoding additionally enforces a pairwise
non-overlapping output by accepting candidates highest-probability first.
"""

from __future__ import annotations

from .probe import SpanProbMatrix
from .spanspace import Span


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")


def threshold_decode(probs: SpanProbMatrix, tau: float) -> set[Span]:
    """All spans with probability >= tau; nested/overlapping spans allowed."""
    _check_tau(tau)
    return {span for span, p in zip(probs.spans, probs.probs) if p >= tau}


def greedy_flat_decode(probs: SpanProbMatrix, tau: float) -> set[Span]:
    """Non-overlapping spans, accepted in (prob desc, start asc, length asc) order."""
    _check_tau(tau)
    candidates = [
        (span, float(p)) for span, p in zip(probs.spans, probs.probs) if p >= tau
    ]
    candidates.sort(key=lambda c: (-c[1], c[0].start, c[0].length))
    occupied = [False] * (probs.n_tokens + 1)  # 1-based token slots
    accepted: set[Span] = set()
    for span, _ in candidates:
        if any(occupied[span.start : span.end + 1]):
            continue
        accepted.add(span)
        for t in range(span.start, span.end + 1):
            occupied[t] = True
    return accepted
