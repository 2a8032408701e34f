"""Shared builders and independent reference implementations for the tests.

Everything here is deliberately written as plain loops, independent of the
library's vectorized code paths, so the tests compare two derivations of the
same quantity rather than the code against itself.
"""

from __future__ import annotations

import math

import numpy as np

from tommer.probe import (
    LcattnParams,
    LtqkParams,
    SequenceInputs,
    SpanProbMatrix,
    TomParams,
)
from tommer.spanspace import Span, enumerate_spans

NORM_FLOOR = 1e-12
LOGIT_CLAMP = 30.0
PROB_FLOOR = 1e-7


# ---------------------------------------------------------------------------
# Random instances


def make_tom_instance(rng, n=None, d=None, r=None, scale=1.0):
    n = n or int(rng.integers(2, 9))
    d = d or int(rng.integers(3, 17))
    r = r or int(rng.integers(1, 5))
    inputs = SequenceInputs(reps=rng.normal(size=(n, d)))
    params = TomParams(
        w_q=rng.normal(scale=scale, size=(r, d)),
        w_k=rng.normal(scale=scale, size=(r, d)),
        w_v=rng.normal(scale=scale, size=d),
        theta=rng.normal(scale=scale, size=5),
    )
    return inputs, params


def make_ltqk_instance(rng, n=None, d=None, r=None, n_heads=None, d_h=None,
                       scale=1.0):
    n = n or int(rng.integers(2, 9))
    d = d or int(rng.integers(3, 17))
    r = r or int(rng.integers(1, 5))
    n_heads = n_heads or int(rng.integers(1, 3))
    d_h = d_h or int(rng.integers(2, 9))
    inputs = SequenceInputs(
        reps=rng.normal(size=(n, d)),
        head_q=rng.normal(size=(n_heads, n, d_h)),
        head_k=rng.normal(size=(n_heads, n, d_h)),
    )
    params = LtqkParams(
        w_q=rng.normal(scale=scale, size=(n_heads, r, d_h)),
        w_k=rng.normal(scale=scale, size=(n_heads, r, d_h)),
        w_v=rng.normal(scale=scale, size=d),
        theta=rng.normal(scale=scale, size=5),
    )
    return inputs, params


def make_lcattn_instance(rng, n=None, d=None, n_layers=None, n_heads=None,
                         scale=1.0):
    n = n or int(rng.integers(2, 9))
    d = d or int(rng.integers(3, 17))
    n_layers = n_layers or int(rng.integers(1, 3))
    n_heads = n_heads or int(rng.integers(1, 3))
    inputs = SequenceInputs(
        reps=rng.normal(size=(n, d)),
        attn=rng.normal(size=(n_layers, n_heads, n, n)),
    )
    params = LcattnParams(
        w_attn=rng.normal(scale=scale, size=(n_layers, n_heads)),
        w_v=rng.normal(scale=scale, size=d),
        theta=rng.normal(scale=scale, size=5),
    )
    return inputs, params


def make_instance(variant, rng, **kw):
    if variant == "tom":
        return make_tom_instance(rng, **kw)
    if variant == "ltqk":
        return make_ltqk_instance(rng, **kw)
    return make_lcattn_instance(rng, **kw)


def random_prob_matrix(rng, n=None, window=None) -> SpanProbMatrix:
    n = n or int(rng.integers(1, 12))
    window = window or int(rng.integers(1, 8))
    spans = enumerate_spans(n, window)
    probs = rng.uniform(0.0, 1.0, size=len(spans))
    return SpanProbMatrix(spans=spans, probs=probs, window=window, n_tokens=n)


# ---------------------------------------------------------------------------
# Reference scoring (loop implementations)


def cosine_ref(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def tom_match_ref(reps, params):
    n = reps.shape[0]
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            qi = params.w_q @ reps[i]
            kj = params.w_k @ reps[j]
            m[i, j] = cosine_ref(qi, kj)
    return m


def ltqk_match_ref(head_q, head_k, params):
    n_heads, n, _ = head_q.shape
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            total = 0.0
            for h in range(n_heads):
                qi = params.w_q[h] @ head_q[h, i]
                kj = params.w_k[h] @ head_k[h, j]
                total += cosine_ref(qi, kj)
            m[i, j] = total / n_heads
    return m


def lcattn_match_ref(attn, params):
    n_layers, n_heads, n, _ = attn.shape
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for l in range(n_layers):
                for h in range(n_heads):
                    s += params.w_attn[l, h] * attn[l, h, i, j]
            m[i, j] = math.log(1.0 / (1.0 + math.exp(-s))) if s > -500 else s
    return m


def features_ref(m, v, span: Span):
    i, j = span.start - 1, span.end - 1
    interior = [m[k, j] for k in range(i + 1, j + 1)]
    pool_max = max(interior) if interior else m[i, j]
    pool_min = min(interior) if interior else m[i, j]
    return [m[i, j], pool_max, pool_min, v[j], v[j + 1]]


def probability_ref(features, theta):
    logit = sum(f * t for f, t in zip(features, theta))
    logit = max(-LOGIT_CLAMP, min(LOGIT_CLAMP, logit))
    return 1.0 / (1.0 + math.exp(-logit))


# ---------------------------------------------------------------------------
# Reference loss / decoding / metrics


def bbce_ref(probs, labels):
    pos = sum(1 for y in labels if y)
    neg = len(labels) - pos
    alpha = neg / pos if pos else 1.0
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
        total += alpha * y * math.log(p) + (1 - y) * math.log(1 - p)
    return -total / len(labels)


def greedy_ref(prob_matrix: SpanProbMatrix, tau: float) -> set[Span]:
    """Simulate greedy selection: best probability first, skip overlaps."""
    items = [(float(p), Span(*s)) for s, p in zip(prob_matrix.spans, prob_matrix.probs)
             if p >= tau]
    items.sort(key=lambda it: (-it[0], it[1].start, it[1].length))
    taken: set[Span] = set()
    used = set()
    for _, span in items:
        tokens = set(range(span.start, span.end + 1))
        if tokens & used:
            continue
        taken.add(span)
        used |= tokens
    return taken


def prf_ref(pred, gold):
    tp = fp = fn = 0
    for key in gold:
        p, g = set(pred[key]), set(gold[key])
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, tp, fp, fn


def kappa_ref(a, b):
    n = len(a)
    agree = sum(1 for x, y in zip(a, b) if x == y) / n
    pa = sum(a) / n
    pb = sum(b) / n
    pe = pa * pb + (1 - pa) * (1 - pb)
    if pe == 1.0:
        return 1.0 if agree == 1.0 else 0.0
    return (agree - pe) / (1 - pe)


# ---------------------------------------------------------------------------
# Finite differences


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    denom = max(abs(a), abs(b))
    if denom < floor:
        return 0.0
    return abs(a - b) / denom


def finite_difference_check(loss_fn, arrays: dict, grads: dict,
                            h: float = 1e-4, tol: float = 1e-4,
                            coords=None) -> float:
    """Compare analytic gradients against central differences, in place.

    ``arrays`` maps names to the parameter tensors the loss reads;
    mutating an entry changes the next ``loss_fn()`` value. Returns the
    worst relative error seen.
    """
    worst = 0.0
    for name, arr in arrays.items():
        grad = grads[name]
        it = coords[name] if coords else np.ndindex(arr.shape)
        for idx in it:
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn()
            arr[idx] = orig - h
            down = loss_fn()
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            err = relative_error(fd, float(grad[idx]))
            worst = max(worst, err)
            assert err < tol, (
                f"{name}{tuple(idx)}: analytic {grad[idx]:.3e} vs "
                f"finite difference {fd:.3e} (rel {err:.2e})"
            )
    return worst
