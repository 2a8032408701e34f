"""Matching scores, the value probe, span features, and span probabilities.

Three matching variants share one downstream pipeline:

- ``tom``: rank-r projections of token representations, matched by cosine.
- ``ltqk``: per-head projections of the backbone's own query/key vectors,
  cosine-matched per head, summed and normalized by the head count.
- ``lcattn``: a learned scalar combination of pre-softmax attention dot
  products, squashed through log-sigmoid.

A span (i, j) is scored from five features: the matching score m[i][j],
max and min of m[k][j] over interior offsets i < k <= j, the value probe at
the end token, and the value probe one past the end. A bias-free logistic
model over those features yields the span probability.

All math runs in float64; parameters arriving as float32 are upcast once at
construction so that scoring after a checkpoint round-trip is bit-identical
to scoring before it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .spanspace import DEFAULT_WINDOW, Span, enumerate_spans

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
LOGIT_CLAMP = 30.0

# Feature order fed to theta; persisted in checkpoint manifests.
THETA_ORDER = ("match", "pool_max", "pool_min", "value_end", "value_next")
N_FEATURES = len(THETA_ORDER)


def _as_f64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x), dtype=np.float64)


@dataclass
class TomParams:
    """Rank-r query/key projections over token representations."""

    w_q: np.ndarray  # (r, d)
    w_k: np.ndarray  # (r, d)
    w_v: np.ndarray  # (d,)
    theta: np.ndarray  # (5,)

    kind = "tom"

    def __post_init__(self) -> None:
        self.w_q = _as_f64(self.w_q)
        self.w_k = _as_f64(self.w_k)
        self.w_v = _as_f64(self.w_v).reshape(-1)
        self.theta = _as_f64(self.theta).reshape(-1)
        if self.w_q.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must be matching r x d matrices")
        if self.w_q.shape[0] < 1:
            raise ValueError("rank must be >= 1")
        if self.w_v.shape[0] != self.w_q.shape[1]:
            raise ValueError("w_v length must equal model dim d")
        if self.theta.shape[0] != N_FEATURES:
            raise ValueError("theta must have exactly 5 entries")

    @property
    def rank(self) -> int:
        return self.w_q.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]


@dataclass
class LtqkParams:
    """Per-head rank-r projections over the backbone's query/key vectors."""

    w_q: np.ndarray  # (n_heads, r, d_h)
    w_k: np.ndarray  # (n_heads, r, d_h)
    w_v: np.ndarray  # (d,) over the residual representation
    theta: np.ndarray

    kind = "ltqk"

    def __post_init__(self) -> None:
        self.w_q = _as_f64(self.w_q)
        self.w_k = _as_f64(self.w_k)
        self.w_v = _as_f64(self.w_v).reshape(-1)
        self.theta = _as_f64(self.theta).reshape(-1)
        if self.w_q.ndim != 3 or self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k must be matching n_heads x r x d_h arrays")
        if self.w_q.shape[1] < 1:
            raise ValueError("rank must be >= 1")
        if self.theta.shape[0] != N_FEATURES:
            raise ValueError("theta must have exactly 5 entries")

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def rank(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[2]

    @property
    def dim(self) -> int:
        return self.w_v.shape[0]


@dataclass
class LcattnParams:
    """Scalar weights over (layer, head) pre-softmax attention scores."""

    w_attn: np.ndarray  # (n_layers, n_heads)
    w_v: np.ndarray  # (d,)
    theta: np.ndarray

    kind = "lcattn"

    def __post_init__(self) -> None:
        self.w_attn = _as_f64(self.w_attn)
        self.w_v = _as_f64(self.w_v).reshape(-1)
        self.theta = _as_f64(self.theta).reshape(-1)
        if self.w_attn.ndim != 2:
            raise ValueError("w_attn must be an n_layers x n_heads matrix")
        if self.theta.shape[0] != N_FEATURES:
            raise ValueError("theta must have exactly 5 entries")

    @property
    def n_layers(self) -> int:
        return self.w_attn.shape[0]

    @property
    def n_heads(self) -> int:
        return self.w_attn.shape[1]

    @property
    def dim(self) -> int:
        return self.w_v.shape[0]


ProbeParams = Union[TomParams, LtqkParams, LcattnParams]


@dataclass
class SequenceInputs:
    """Per-sequence inputs; which fields are required depends on the variant.

    ``reps`` (n x d token representations) is always required for the value
    probe. ``head_q``/``head_k`` (n_heads x n x d_h) feed the ltqk variant;
    ``attn`` (n_layers x n_heads x n x n pre-softmax dot products) feeds
    lcattn.
    """

    reps: np.ndarray
    head_q: np.ndarray | None = None
    head_k: np.ndarray | None = None
    attn: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.reps = _as_f64(self.reps)
        if self.reps.ndim != 2:
            raise ValueError("reps must be an n x d matrix")
        if self.head_q is not None:
            self.head_q = _as_f64(self.head_q)
        if self.head_k is not None:
            self.head_k = _as_f64(self.head_k)
        if self.attn is not None:
            self.attn = _as_f64(self.attn)

    @property
    def n_tokens(self) -> int:
        return self.reps.shape[0]


@dataclass
class SpanProbMatrix:
    """Probabilities for all windowed spans of one sequence, canonical order."""

    spans: list[Span]
    probs: np.ndarray
    window: int
    n_tokens: int

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.spans) != self.probs.shape[0]:
            raise ValueError("spans and probs must be parallel")

    def as_dict(self) -> dict[Span, float]:
        return {s: float(p) for s, p in zip(self.spans, self.probs)}


def normalize_rows(x: np.ndarray, what: str = "projected") -> np.ndarray:
    """Rows scaled to unit norm; rows below the norm floor become zero rows."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    small = norms < NORM_FLOOR
    if np.any(small):
        logger.warning(
            "%d %s vectors below norm floor %.0e; their cosines are set to 0",
            int(small.sum()), what, NORM_FLOOR,
        )
    return np.divide(x, norms, out=np.zeros_like(x), where=~small)


def tom_match(reps: np.ndarray, params: TomParams,
              window: int = DEFAULT_WINDOW) -> np.ndarray:
    """m[i][j] = cosine(W_Q z_i, W_K z_j); entries with j < i are unused."""
    z = _as_f64(reps)
    if z.shape[1] != params.dim:
        raise ValueError(f"reps dim {z.shape[1]} != params dim {params.dim}")
    q = normalize_rows(z @ params.w_q.T, "projected query")
    k = normalize_rows(z @ params.w_k.T, "projected key")
    return q @ k.T


def ltqk_match(head_q: np.ndarray, head_k: np.ndarray, params: LtqkParams,
               window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Mean over heads of cosine(W_Q^h q_i^h, W_K^h k_j^h), range [-1, 1]."""
    hq = _as_f64(head_q)
    hk = _as_f64(head_k)
    if hq.ndim != 3 or hq.shape != hk.shape:
        raise ValueError("head_q and head_k must be matching n_heads x n x d_h")
    if hq.shape[0] != params.n_heads or hq.shape[2] != params.head_dim:
        raise ValueError("head tensors inconsistent with params")
    n = hq.shape[1]
    m = np.zeros((n, n))
    for h in range(params.n_heads):
        q = normalize_rows(hq[h] @ params.w_q[h].T, "projected query")
        k = normalize_rows(hk[h] @ params.w_k[h].T, "projected key")
        m += q @ k.T
    return m / params.n_heads


def lcattn_match(attn: np.ndarray, params: LcattnParams,
                 window: int = DEFAULT_WINDOW) -> np.ndarray:
    """m[i][j] = log sigmoid(sum over (l, h) of w[l,h] * attn[l,h,i,j]) <= 0."""
    a = _as_f64(attn)
    if a.ndim != 4:
        raise ValueError("attn must be n_layers x n_heads x n x n")
    if a.shape[:2] != params.w_attn.shape:
        raise ValueError("attn layer/head shape inconsistent with params")
    s = np.tensordot(params.w_attn, a, axes=([0, 1], [0, 1]))
    return log_sigmoid(s)


def log_sigmoid(s: np.ndarray) -> np.ndarray:
    """Numerically stable log(sigmoid(s)), always <= 0."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s >= 0, -np.log1p(np.exp(-np.abs(s))),
                    s - np.log1p(np.exp(-np.abs(s))))


def match_matrix(inputs: SequenceInputs, params: ProbeParams,
                 window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Dispatch to the variant implied by the parameter type."""
    if isinstance(params, TomParams):
        return tom_match(inputs.reps, params, window)
    if isinstance(params, LtqkParams):
        if inputs.head_q is None or inputs.head_k is None:
            raise ValueError("ltqk scoring requires head_q and head_k inputs")
        return ltqk_match(inputs.head_q, inputs.head_k, params, window)
    if isinstance(params, LcattnParams):
        if inputs.attn is None:
            raise ValueError("lcattn scoring requires attention inputs")
        return lcattn_match(inputs.attn, params, window)
    raise TypeError(f"unknown params type {type(params)!r}")


def value_probe(reps: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """v[t] = w_v . z_t for t < n, plus the boundary value v[n] = 0."""
    z = _as_f64(reps)
    v = z @ _as_f64(w_v).reshape(-1)
    return np.concatenate([v, [0.0]])


def assemble_features(m: np.ndarray, v: np.ndarray, span: Span) -> np.ndarray:
    """(m_ij, max m_kj, min m_kj, v_j, v_j+1) with the pool over i < k <= j.

    Single-token spans have an empty pool; both pooled features fall back to
    m_ij. The fifth feature at the sequence end reads the zero boundary value.
    """
    i = span.start - 1
    j = span.end - 1
    mij = m[i, j]
    if i == j:
        pmax = pmin = mij
    else:
        col = m[i + 1 : j + 1, j]
        pmax = col.max()
        pmin = col.min()
    return np.array([mij, pmax, pmin, v[j], v[j + 1]])


def _probs_from_features(features: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Shared logistic head; the single-span path reuses this bitwise."""
    logits = (features * theta).sum(axis=-1)
    logits = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-logits))


def span_probability(features: np.ndarray, theta: np.ndarray) -> float:
    """sigma(theta . features) with the logit clamped to +-30; in (0, 1)."""
    f = _as_f64(features).reshape(-1)
    t = _as_f64(theta).reshape(-1)
    if f.shape[0] != N_FEATURES or t.shape[0] != N_FEATURES:
        raise ValueError("features and theta must both have 5 entries")
    return float(_probs_from_features(f, t))


def featurize_all_spans(m: np.ndarray, v: np.ndarray, spans: list[Span],
                        with_indices: bool = False):
    """Feature rows for every span, canonical order.

    With ``with_indices`` also returns the 0-based token index attaining each
    pooled max/min (the span's own start index when the pool is empty), which
    the analytic gradients need to route pooling derivatives.
    """
    n_spans = len(spans)
    feats = np.empty((n_spans, N_FEATURES))
    if with_indices:
        amax = np.empty(n_spans, dtype=np.int64)
        amin = np.empty(n_spans, dtype=np.int64)
    for idx, span in enumerate(spans):
        i = span.start - 1
        j = span.end - 1
        mij = m[i, j]
        if i == j:
            pmax = pmin = mij
            kmax = kmin = i
        else:
            col = m[i + 1 : j + 1, j]
            rel_max = int(np.argmax(col))
            rel_min = int(np.argmin(col))
            pmax = col[rel_max]
            pmin = col[rel_min]
            kmax = i + 1 + rel_max
            kmin = i + 1 + rel_min
        feats[idx, 0] = mij
        feats[idx, 1] = pmax
        feats[idx, 2] = pmin
        feats[idx, 3] = v[j]
        feats[idx, 4] = v[j + 1]
        if with_indices:
            amax[idx] = kmax
            amin[idx] = kmin
    if with_indices:
        return feats, amax, amin
    return feats


def score_all_spans(inputs: SequenceInputs, params: ProbeParams,
                    window: int = DEFAULT_WINDOW) -> SpanProbMatrix:
    """Probabilities for every windowed span; equals the per-span pipeline."""
    n = inputs.n_tokens
    spans = enumerate_spans(n, window)
    m = match_matrix(inputs, params, window)
    v = value_probe(inputs.reps, params.w_v)
    feats = featurize_all_spans(m, v, spans)
    probs = _probs_from_features(feats, params.theta)
    return SpanProbMatrix(spans=spans, probs=probs, window=window, n_tokens=n)
