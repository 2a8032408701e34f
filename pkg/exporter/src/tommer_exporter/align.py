"""Character-span to token-span alignment.

A character span maps to the minimal token range whose character extent
covers it. Spans that no token range can cover exactly (the boundary falls
inside a token that also covers text outside the span, or the span is empty
or out of bounds) are dropped and counted rather than silently widened.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class AlignmentReport:
    n_spans: int
    n_aligned: int
    n_dropped: int

    @property
    def drop_rate(self) -> float:
        return self.n_dropped / self.n_spans if self.n_spans else 0.0


def align_span(char_span: tuple[int, int],
               offsets: list[tuple[int, int]]) -> tuple[int, int] | None:
    """One-based inclusive token range covering ``char_span``, or None.

    ``offsets`` are end-exclusive character extents per token. The result is
    the minimal run of tokens overlapping the span; it is returned only when
    that run starts at or before the span start and ends at or after the span
    end, so the tokens fully cover the requested characters.
    """
    cs, ce = char_span
    if ce <= cs:
        return None
    hit = [idx for idx, (s, e) in enumerate(offsets) if s < ce and e > cs]
    if not hit:
        return None
    first, last = hit[0], hit[-1]
    if offsets[first][0] > cs or offsets[last][1] < ce:
        return None
    return first + 1, last + 1


def align_text(char_spans: list[tuple[int, int]],
               offsets: list[tuple[int, int]]):
    """Align every span; returns (token_spans, report).

    Token spans come back sorted and deduplicated, matching how annotation
    files store mentions. Unalignable spans are dropped and counted.
    """
    aligned = []
    for span in char_spans:
        tok = align_span(tuple(span), offsets)
        if tok is not None:
            aligned.append(tok)
    report = AlignmentReport(n_spans=len(char_spans), n_aligned=len(aligned),
                             n_dropped=len(char_spans) - len(aligned))
    return sorted(set(aligned)), report
