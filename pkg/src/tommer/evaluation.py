"""Mention-detection metrics, cross-run agreement, and annotator statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spanspace import Span


@dataclass
class PRF:
    """Precision/recall/F1 with the underlying micro counts.

    ``from_counts`` derives the rates from counts with the 0/0 := 0
    convention. The "averaged" aggregation mode instead stores unweighted
    means of per-dataset rates, in which case the rate fields are no longer
    functions of the count fields.
    """

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
        return cls(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
        }


def match_prf(pred: dict[str, set[Span]], gold: dict[str, set[Span]]) -> PRF:
    """Micro P/R/F1 under exact span match, aggregated over sequences."""
    if set(pred.keys()) != set(gold.keys()):
        missing = set(gold) ^ set(pred)
        raise ValueError(f"prediction/gold sequence keys differ: {sorted(missing)[:5]}")
    tp = fp = fn = 0
    for key, g in gold.items():
        p = {Span(*s) for s in pred[key]}
        g = {Span(*s) for s in g}
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    return PRF.from_counts(tp, fp, fn)


def aggregate(reports: list[PRF], mode: str = "aggregated") -> PRF:
    """Combine per-dataset reports: micro-pool counts, or average the rates."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    if mode == "aggregated":
        return PRF.from_counts(tp, fp, fn)
    if mode == "averaged":
        k = len(reports)
        return PRF(
            precision=sum(r.precision for r in reports) / k,
            recall=sum(r.recall for r in reports) / k,
            f1=sum(r.f1 for r in reports) / k,
            tp=tp, fp=fp, fn=fn,
        )
    raise ValueError(f"unknown aggregation mode {mode!r}")


def dice(a: set, b: set) -> float:
    """Sorensen-Dice coefficient 2|A&B|/(|A|+|B|); both empty counts as 1."""
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


def dice_matrix(runs: list[tuple[str, dict[str, set[Span]]]]) -> tuple[list[str], np.ndarray]:
    """Pairwise dice between runs, spans pooled as (seq_id, start, end)."""
    if len(runs) < 2:
        raise ValueError("dice matrix needs at least two runs")
    keys = set(runs[0][1].keys())
    for label, preds in runs[1:]:
        if set(preds.keys()) != keys:
            raise ValueError(f"run {label!r} covers a different corpus")
    labels = [label for label, _ in runs]
    pooled = [
        {(seq_id, *span) for seq_id, spans in preds.items() for span in spans}
        for _, preds in runs
    ]
    k = len(runs)
    mat = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            mat[i, j] = mat[j, i] = dice(pooled[i], pooled[j])
    return labels, mat


def cohen_kappa(a, b) -> float:
    """Chance-corrected agreement between two binary annotators."""
    a = np.asarray(a, dtype=np.int8)
    b = np.asarray(b, dtype=np.int8)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("inputs must be equal-length non-empty binary sequences")
    n = a.size
    p_o = float(np.mean(a == b))
    p_a1 = float(np.mean(a))
    p_b1 = float(np.mean(b))
    p_e = p_a1 * p_b1 + (1 - p_a1) * (1 - p_b1)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1 - p_e)


def judged_precision(verdicts) -> float:
    """Fraction of true verdicts; the caller excludes unparsed ones."""
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("no verdicts to score")
    return sum(bool(v) for v in verdicts) / len(verdicts)
