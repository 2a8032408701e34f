"""Balanced loss, analytic gradients, AdamW, and the training loop.

The loss is binary cross-entropy with a per-batch class weight
alpha = #Neg/#Pos applied to the positive term, so both classes contribute
equal mass when predictions are uninformative. Gradients are computed
analytically through the full span-scoring pipeline (cosine normalization,
max/min pooling, the logistic head) and are validated against central finite
differences in the test suite.

Self-distillation retrains on labels augmented by a converged teacher's
high-confidence predictions, optionally from freshly initialized weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoding import threshold_decode
from .evaluation import match_prf
from .probe import (
    LOGIT_CLAMP,
    NORM_FLOOR,
    LcattnParams,
    LtqkParams,
    ProbeParams,
    SequenceInputs,
    TomParams,
    featurize_all_spans,
    log_sigmoid,
    score_all_spans,
    value_probe,
)
from .repio import (
    AnnotatedSequence,
    Checkpoint,
    checkpoint_to_params,
    params_to_checkpoint,
)
from .spanspace import DEFAULT_WINDOW, enumerate_spans, label_spans

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossBatch:
    """Parallel probabilities and binary labels, possibly spanning sequences."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.probs.shape != self.labels.shape:
            raise ValueError("probs and labels must be parallel")
        if self.probs.size == 0:
            raise ValueError("empty batch")

    @property
    def pos(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def neg(self) -> int:
        return int(self.labels.size - self.pos)

    @property
    def total(self) -> int:
        return int(self.labels.size)


def batch_alpha(pos: int, neg: int) -> float:
    """Positive-class weight #Neg/#Pos; a batch with no positives gets 1."""
    return neg / pos if pos > 0 else 1.0


def bbce_loss(batch: LossBatch) -> float:
    """-(1/Tot) sum of alpha*y*log(p) + (1-y)*log(1-p), p clamped to [1e-7, 1-1e-7]."""
    p = np.clip(batch.probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = batch.labels.astype(np.float64)
    alpha = batch_alpha(batch.pos, batch.neg)
    terms = alpha * y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return float(-terms.sum() / batch.total)


# ---------------------------------------------------------------------------
# Analytic gradients


def _params_to_dict(params: ProbeParams) -> dict[str, np.ndarray]:
    if isinstance(params, (TomParams, LtqkParams)):
        return {"w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
                "theta": params.theta}
    if isinstance(params, LcattnParams):
        return {"w_attn": params.w_attn, "w_v": params.w_v, "theta": params.theta}
    raise TypeError(f"unknown params type {type(params)!r}")


def _dict_to_params(kind: str, d: dict[str, np.ndarray]) -> ProbeParams:
    if kind == "tom":
        return TomParams(w_q=d["w_q"], w_k=d["w_k"], w_v=d["w_v"], theta=d["theta"])
    if kind == "ltqk":
        return LtqkParams(w_q=d["w_q"], w_k=d["w_k"], w_v=d["w_v"], theta=d["theta"])
    if kind == "lcattn":
        return LcattnParams(w_attn=d["w_attn"], w_v=d["w_v"], theta=d["theta"])
    raise ValueError(f"unknown variant {kind!r}")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    pos = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, pos, 1.0 - pos)


def _project_normalize(x: np.ndarray):
    """Unit rows plus the caches the cosine backward pass needs."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    ok = norms >= NORM_FLOOR
    safe = np.where(ok, norms, 1.0)
    xn = np.where(ok, x / safe, 0.0)
    return xn, safe, ok


def _cosine_norm_backward(dxn: np.ndarray, xn: np.ndarray, norms: np.ndarray,
                          ok: np.ndarray) -> np.ndarray:
    # x_n = x/||x||  =>  dx = (dxn - (dxn . xn) xn) / ||x||; floored rows are flat
    proj = (dxn * xn).sum(axis=1, keepdims=True)
    dx = (dxn - proj * xn) / norms
    return np.where(ok, dx, 0.0)


def _sequence_forward(inputs: SequenceInputs, params: ProbeParams, window: int,
                      spans) -> dict:
    z = inputs.reps
    n = inputs.n_tokens
    cache: dict = {"z": z, "n": n}
    if isinstance(params, TomParams):
        qn, qs, qok = _project_normalize(z @ params.w_q.T)
        kn, ks, kok = _project_normalize(z @ params.w_k.T)
        m = qn @ kn.T
        cache.update(qn=qn, qs=qs, qok=qok, kn=kn, ks=ks, kok=kok)
    elif isinstance(params, LtqkParams):
        if inputs.head_q is None or inputs.head_k is None:
            raise ValueError("ltqk training requires head_q and head_k inputs")
        heads = []
        m = np.zeros((n, n))
        for h in range(params.n_heads):
            qn, qs, qok = _project_normalize(inputs.head_q[h] @ params.w_q[h].T)
            kn, ks, kok = _project_normalize(inputs.head_k[h] @ params.w_k[h].T)
            m += qn @ kn.T
            heads.append((qn, qs, qok, kn, ks, kok))
        m /= params.n_heads
        cache.update(heads=heads)
    elif isinstance(params, LcattnParams):
        if inputs.attn is None:
            raise ValueError("lcattn training requires attention inputs")
        s = np.tensordot(params.w_attn, inputs.attn, axes=([0, 1], [0, 1]))
        m = log_sigmoid(s)
        cache.update(s=s, attn=inputs.attn)
    else:
        raise TypeError(f"unknown params type {type(params)!r}")
    v = value_probe(z, params.w_v)
    feats, amax, amin = featurize_all_spans(m, v, spans, with_indices=True)
    cache.update(
        feats=feats,
        amax=amax,
        amin=amin,
        i0=np.fromiter((s.start - 1 for s in spans), dtype=np.int64, count=len(spans)),
        j0=np.fromiter((s.end - 1 for s in spans), dtype=np.int64, count=len(spans)),
    )
    return cache


def _sequence_backward(cache: dict, d_feats: np.ndarray, params: ProbeParams,
                       grads: dict[str, np.ndarray]) -> None:
    n = cache["n"]
    dm = np.zeros((n, n))
    dv = np.zeros(n + 1)
    np.add.at(dm, (cache["i0"], cache["j0"]), d_feats[:, 0])
    np.add.at(dm, (cache["amax"], cache["j0"]), d_feats[:, 1])
    np.add.at(dm, (cache["amin"], cache["j0"]), d_feats[:, 2])
    np.add.at(dv, cache["j0"], d_feats[:, 3])
    np.add.at(dv, cache["j0"] + 1, d_feats[:, 4])
    # v[n] is the constant boundary value; its slot in dv carries no gradient
    grads["w_v"] += cache["z"].T @ dv[:n]
    if isinstance(params, TomParams):
        dqn = dm @ cache["kn"]
        dkn = dm.T @ cache["qn"]
        dq = _cosine_norm_backward(dqn, cache["qn"], cache["qs"], cache["qok"])
        dk = _cosine_norm_backward(dkn, cache["kn"], cache["ks"], cache["kok"])
        grads["w_q"] += dq.T @ cache["z"]
        grads["w_k"] += dk.T @ cache["z"]
    elif isinstance(params, LtqkParams):
        dm_h = dm / params.n_heads
        for h, (qn, qs, qok, kn, ks, kok) in enumerate(cache["heads"]):
            dqn = dm_h @ kn
            dkn = dm_h.T @ qn
            dq = _cosine_norm_backward(dqn, qn, qs, qok)
            dk = _cosine_norm_backward(dkn, kn, ks, kok)
            grads["w_q"][h] += dq.T @ cache["hq"][h]
            grads["w_k"][h] += dk.T @ cache["hk"][h]
    elif isinstance(params, LcattnParams):
        ds = dm * _sigmoid_stable(-cache["s"])
        grads["w_attn"] += np.tensordot(cache["attn"], ds, axes=([2, 3], [0, 1]))


def loss_gradients(batch: Sequence[tuple[SequenceInputs, np.ndarray]],
                   params: ProbeParams,
                   window: int = DEFAULT_WINDOW):
    """BBCE loss over a batch of sequences and its exact parameter gradients.

    ``batch`` pairs each sequence's inputs with binary labels in canonical
    span order. Returns ``(loss, grads)`` with gradient arrays keyed like the
    parameter fields.
    """
    loss, grads, _ = _forward_backward(batch, params, window)
    return loss, grads


def _forward_backward(batch, params, window):
    if not batch:
        raise ValueError("empty batch")
    caches = []
    feats_parts = []
    label_parts = []
    for inputs, labels in batch:
        spans = enumerate_spans(inputs.n_tokens, window)
        labels = np.asarray(labels).reshape(-1)
        if len(spans) != labels.shape[0]:
            raise ValueError(
                f"labels ({labels.shape[0]}) do not match enumerated spans ({len(spans)})"
            )
        cache = _sequence_forward(inputs, params, window, spans)
        if isinstance(params, LtqkParams):
            cache["hq"] = inputs.head_q
            cache["hk"] = inputs.head_k
        caches.append(cache)
        feats_parts.append(cache["feats"])
        label_parts.append(labels)
    feats = np.concatenate(feats_parts, axis=0)
    y = np.concatenate(label_parts).astype(np.float64)
    if y.size == 0:
        raise ValueError("empty batch")
    pos = int(np.count_nonzero(y))
    neg = int(y.size - pos)
    total = y.size
    alpha = batch_alpha(pos, neg)

    t = feats @ params.theta
    tc = np.clip(t, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = 1.0 / (1.0 + np.exp(-tc))
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = float(-(alpha * y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / total)

    # Gradient is zero wherever the logit or probability clamp is active.
    gate = (np.abs(t) < LOGIT_CLAMP) & (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    dt = np.where(gate, -(alpha * y * (1.0 - p) - (1.0 - y) * p) / total, 0.0)

    grads = {k: np.zeros_like(v) for k, v in _params_to_dict(params).items()}
    grads["theta"] = feats.T @ dt
    d_feats = dt[:, None] * params.theta[None, :]
    offset = 0
    for cache in caches:
        size = cache["feats"].shape[0]
        _sequence_backward(cache, d_feats[offset : offset + size], params, grads)
        offset += size
    return loss, grads, {"alpha": alpha, "pos": pos, "neg": neg}


# ---------------------------------------------------------------------------
# Optimizer


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = sum(float((g ** 2).sum()) for g in grads.values())
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class OptimState:
    """AdamW accumulator state plus its hyperparameters."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 2.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState):
    """One AdamW update with decoupled weight decay; returns (params, state)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for key, p in params.items():
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        out[key] = p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                                   + state.weight_decay * p)
    return out, state


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    variant: str = "tom"
    epochs: int = 8
    batch_size: int = 16
    window: int = DEFAULT_WINDOW
    rank: int = 64
    lr: float = 1e-2
    grad_clip: float = 2.0
    weight_decay: float = 0.01
    distill_phases: int = 1
    teacher_threshold: float = 0.90
    reset_student: bool = True
    val_metric: str = "f1"
    val_fraction: float = 0.02
    patience: int = 5000
    seed: int = 0
    layer: int = 0
    backbone: str = ""

    def __post_init__(self) -> None:
        if self.variant not in ("tom", "ltqk", "lcattn"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epochs < 0 or self.distill_phases < 0:
            raise ValueError("epochs and distill_phases must be >= 0")
        if self.batch_size < 1 or self.window < 1 or self.rank < 1:
            raise ValueError("batch_size, window, and rank must be positive")
        if self.lr <= 0 or self.grad_clip <= 0 or self.patience < 1:
            raise ValueError("lr, grad_clip, and patience must be positive")
        if not 0.0 < self.teacher_threshold < 1.0:
            raise ValueError("teacher_threshold must be in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.val_metric != "f1":
            raise ValueError("only the f1 validation metric is supported")

    def hyperparameters(self) -> dict:
        return {
            "variant": self.variant, "epochs": self.epochs,
            "batch_size": self.batch_size, "window": self.window,
            "rank": self.rank, "lr": self.lr, "grad_clip": self.grad_clip,
            "weight_decay": self.weight_decay,
            "distill_phases": self.distill_phases,
            "teacher_threshold": self.teacher_threshold,
            "reset_student": self.reset_student, "val_metric": self.val_metric,
            "val_fraction": self.val_fraction, "patience": self.patience,
            "seed": self.seed,
        }


def _rng(seed: int, stream: int, phase: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, phase]))


def init_params(config: TrainConfig, inputs: SequenceInputs, phase: int = 0) -> ProbeParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero theta.

    Shapes are inferred from a representative sequence's inputs. Each
    distillation phase draws from a fresh seed stream.
    """
    rng = _rng(config.seed, 1, phase)
    d = inputs.reps.shape[1]
    theta = np.zeros(5)
    if config.variant == "tom":
        bound = 1.0 / np.sqrt(d)
        return TomParams(
            w_q=rng.uniform(-bound, bound, size=(config.rank, d)),
            w_k=rng.uniform(-bound, bound, size=(config.rank, d)),
            w_v=rng.uniform(-bound, bound, size=d),
            theta=theta,
        )
    if config.variant == "ltqk":
        if inputs.head_q is None:
            raise ValueError("ltqk initialization requires head_q inputs")
        n_heads, _, d_h = inputs.head_q.shape
        bound_h = 1.0 / np.sqrt(d_h)
        bound_d = 1.0 / np.sqrt(d)
        return LtqkParams(
            w_q=rng.uniform(-bound_h, bound_h, size=(n_heads, config.rank, d_h)),
            w_k=rng.uniform(-bound_h, bound_h, size=(n_heads, config.rank, d_h)),
            w_v=rng.uniform(-bound_d, bound_d, size=d),
            theta=theta,
        )
    if inputs.attn is None:
        raise ValueError("lcattn initialization requires attention inputs")
    n_layers, n_heads = inputs.attn.shape[:2]
    bound_w = 1.0 / np.sqrt(n_layers * n_heads)
    bound_d = 1.0 / np.sqrt(d)
    return LcattnParams(
        w_attn=rng.uniform(-bound_w, bound_w, size=(n_layers, n_heads)),
        w_v=rng.uniform(-bound_d, bound_d, size=d),
        theta=theta,
    )


def _materialize(dataset, rep_source, window):
    """Load inputs and labels once; training touches them every epoch."""
    items = []
    dropped = 0
    for seq in dataset:
        inputs = rep_source.inputs_for(seq)
        spans = enumerate_spans(seq.n_tokens, window)
        labeled = label_spans(spans, seq.mentions, window)
        dropped += labeled.n_window_dropped
        items.append((seq, inputs, labeled.labels))
    return items, dropped


def _validation_f1(val_items, params, window) -> float:
    pred = {}
    gold = {}
    for idx, (seq, inputs, _labels) in enumerate(val_items):
        probs = score_all_spans(inputs, params, window)
        pred[idx] = threshold_decode(probs, 0.5)
        gold[idx] = seq.mentions
    return match_prf(pred, gold).f1


def train(dataset: list[AnnotatedSequence], rep_source, config: TrainConfig,
          phase: int = 0, init: ProbeParams | None = None):
    """Train a probe; deterministic given seed, config, and data.

    Returns ``(checkpoint, log)`` where the log holds one record per
    optimizer step plus final metrics. The checkpoint carries the best
    validation-F1 parameters (threshold decoding at 0.5), or the final
    parameters when no validation split exists.
    """
    if not dataset:
        raise ValueError("empty dataset")
    items, n_dropped = _materialize(dataset, rep_source, config.window)
    if n_dropped:
        logger.warning("%d gold mentions exceed the window and were dropped "
                       "from training labels", n_dropped)

    n_val = int(len(items) * config.val_fraction)
    perm = _rng(config.seed, 0).permutation(len(items))
    val_idx = set(perm[:n_val].tolist())
    train_items = [items[i] for i in range(len(items)) if i not in val_idx]
    val_items = [items[i] for i in sorted(val_idx)]
    if not train_items:
        raise ValueError("validation split consumed every sequence")

    params = init if init is not None else init_params(config, items[0][1], phase)
    if params.kind != config.variant:
        raise ValueError(f"initial params are {params.kind!r}, config wants "
                         f"{config.variant!r}")
    opt = OptimState(lr=config.lr, weight_decay=config.weight_decay,
                     clip_norm=config.grad_clip)
    shuffle_rng = _rng(config.seed, 2, phase)

    best_f1 = -1.0
    best_params = {k: v.copy() for k, v in _params_to_dict(params).items()}
    steps_since_improve = 0
    step = 0
    steps_log = []
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_items))
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo : lo + config.batch_size]
            batch = [(train_items[i][1], train_items[i][2]) for i in chunk]
            loss, grads, stats = _forward_backward(batch, params, config.window)
            grads = clip_gradients(grads, config.grad_clip)
            new_dict, opt = adamw_step(_params_to_dict(params), grads, opt)
            params = _dict_to_params(config.variant, new_dict)
            step += 1
            steps_since_improve += 1
            steps_log.append({
                "step": step, "loss": loss, "alpha": stats["alpha"],
                "pos": stats["pos"], "neg": stats["neg"], "lr": opt.lr,
            })
        if val_items:
            f1 = _validation_f1(val_items, params, config.window)
            if f1 > best_f1:
                best_f1 = f1
                best_params = {k: v.copy() for k, v in _params_to_dict(params).items()}
                steps_since_improve = 0
            elif steps_since_improve >= config.patience:
                opt.lr *= 0.5
                steps_since_improve = 0

    if val_items and config.epochs > 0:
        final_params = _dict_to_params(config.variant, best_params)
    else:
        final_params = params
    ckpt = params_to_checkpoint(final_params, layer=config.layer,
                                backbone=config.backbone,
                                hyperparameters=config.hyperparameters())
    log = {
        "steps": steps_log,
        "final": {
            "phase": phase,
            "n_steps": step,
            "best_val_f1": best_f1 if best_f1 >= 0 else None,
            "n_train": len(train_items),
            "n_val": len(val_items),
            "n_window_dropped": n_dropped,
        },
    }
    return ckpt, log


# ---------------------------------------------------------------------------
# Self-distillation


def distill_augment(dataset: list[AnnotatedSequence], teacher, rep_source,
                    threshold: float = 0.90, window: int = DEFAULT_WINDOW):
    """Relabel unannotated spans the teacher scores at or above threshold.

    Returns ``(augmented dataset, n_added)``. Existing positives are never
    touched; added spans carry no type annotation.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    params = checkpoint_to_params(teacher) if isinstance(teacher, Checkpoint) else teacher
    augmented = []
    n_added = 0
    for seq in dataset:
        inputs = rep_source.inputs_for(seq)
        probs = score_all_spans(inputs, params, window)
        fired = threshold_decode(probs, threshold)
        added = fired - seq.mentions
        n_added += len(added)
        augmented.append(AnnotatedSequence(
            seq_id=seq.seq_id,
            n_tokens=seq.n_tokens,
            mentions=seq.mentions | added,
            rep_file=seq.rep_file,
            token_texts=seq.token_texts,
            mention_types=dict(seq.mention_types) if seq.mention_types else None,
        ))
    return augmented, n_added


def distill_train(dataset: list[AnnotatedSequence], rep_source, config: TrainConfig):
    """Phase 0 trains on raw labels; later phases retrain on augmented labels.

    With ``reset_student`` each phase starts from freshly seeded weights;
    otherwise it continues from the teacher. Returns the last phase's
    checkpoint and a log covering all phases.
    """
    ckpt, log = train(dataset, rep_source, config, phase=0)
    phase_logs = [log]
    n_added_per_phase = []
    current = dataset
    for phase in range(1, config.distill_phases + 1):
        current, n_added = distill_augment(
            current, ckpt, rep_source, config.teacher_threshold, config.window
        )
        n_added_per_phase.append(n_added)
        init = None if config.reset_student else checkpoint_to_params(ckpt)
        ckpt, log = train(current, rep_source, config, phase=phase, init=init)
        phase_logs.append(log)
    combined = {
        "phases": phase_logs,
        "n_added_per_phase": n_added_per_phase,
        "final": phase_logs[-1]["final"],
    }
    return ckpt, combined
