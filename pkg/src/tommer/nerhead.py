"""Typed entity recognition on top of detected spans.

A span is embedded by concatenating the representations of its first and
last tokens, then typed by a two-layer MLP (hidden width 1024) over K entity
types plus a reserved NONE class. NONE absorbs detector false positives:
proposed spans that carry no gold type train toward NONE and are discarded
before scoring, which converts a high-recall detector into precise typed
output.

The embedding representations may come from a different layer than the ones
the detector was trained on; callers bind each to its own rep source.
Gradients through relu and softmax are derived by hand and validated against
finite differences in the test suite; optimization reuses the AdamW step and
global-norm clipping from the training module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .decoding import threshold_decode
from .evaluation import PRF
from .probe import score_all_spans
from .repio import AnnotatedSequence, Checkpoint, checkpoint_to_params
from .spanspace import DEFAULT_WINDOW, Span
from .training import OptimState, adamw_step, clip_gradients

logger = logging.getLogger(__name__)

NONE_LABEL = "NONE"
DEFAULT_HIDDEN = 1024


@dataclass
class NerHeadParams:
    """MLP weights and the label vocabulary, NONE always last."""

    w1: np.ndarray  # (h, 2d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (K+1, h)
    b2: np.ndarray  # (K+1,)
    label_names: list[str]

    def __post_init__(self) -> None:
        self.w1 = np.ascontiguousarray(self.w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.ascontiguousarray(self.w2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(self.b2, dtype=np.float64).reshape(-1)
        self.label_names = list(self.label_names)
        h, _ = self.w1.shape
        k1, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (k1,):
            raise ValueError("inconsistent MLP weight shapes")
        if len(self.label_names) != k1:
            raise ValueError(
                f"{k1} output rows but {len(self.label_names)} label names"
            )
        if len(set(self.label_names)) != len(self.label_names):
            raise ValueError("duplicate label names")
        if self.label_names[-1] != NONE_LABEL:
            raise ValueError(f"last label must be {NONE_LABEL!r}")
        if k1 < 2:
            raise ValueError("need at least one entity type besides NONE")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def n_labels(self) -> int:
        return self.w2.shape[0]


@dataclass
class NerHeadConfig:
    hidden: int = DEFAULT_HIDDEN
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    grad_clip: float = 2.0
    weight_decay: float = 0.01
    mention_source: str = "predictions"
    tau: float = 0.5
    window: int = DEFAULT_WINDOW
    layer_emb: int = 0
    seed: int = 0
    label_names: list[str] | None = None

    def __post_init__(self) -> None:
        if self.mention_source not in ("gold", "predictions"):
            raise ValueError(f"unknown mention source {self.mention_source!r}")
        if self.hidden < 1 or self.batch_size < 1 or self.window < 1:
            raise ValueError("hidden, batch_size, and window must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")

    def hyperparameters(self) -> dict:
        return {
            "hidden": self.hidden, "epochs": self.epochs,
            "batch_size": self.batch_size, "lr": self.lr,
            "grad_clip": self.grad_clip, "weight_decay": self.weight_decay,
            "mention_source": self.mention_source, "tau": self.tau,
            "window": self.window, "layer_emb": self.layer_emb,
            "seed": self.seed,
        }


def span_embedding(reps: np.ndarray, span: Span) -> np.ndarray:
    """Concatenate the first- and last-token representations of a span.

    Token indices are 1-based inclusive; a single-token span repeats its
    token's representation.
    """
    reps = np.asarray(reps, dtype=np.float64)
    span = Span(*span)
    if not 1 <= span.start <= span.end <= reps.shape[0]:
        raise ValueError(f"span {span} out of range for {reps.shape[0]} tokens")
    return np.concatenate([reps[span.start - 1], reps[span.end - 1]])


def _forward(x: np.ndarray, params: NerHeadParams):
    z1 = x @ params.w1.T + params.b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ params.w2.T + params.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    return probs, (x, z1, a1, logits)


def classify_span(embedding: np.ndarray, params: NerHeadParams):
    """Softmax distribution over the label vocabulary plus the argmax label."""
    x = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.in_dim:
        raise ValueError(f"embedding length {x.shape[1]} != {params.in_dim}")
    probs, _ = _forward(x, params)
    dist = probs[0]
    return dist, params.label_names[int(np.argmax(dist))]


def ner_loss_gradients(x: np.ndarray, y: np.ndarray, params: NerHeadParams):
    """Mean cross-entropy over a batch and its analytic gradients.

    The loss is computed as logsumexp(logits) - logits[y], which is exact
    for finite-difference comparison.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    b = x.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    probs, (x, z1, a1, logits) = _forward(x, params)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(lse - logits[np.arange(b), y]))

    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    dw2 = dlogits.T @ a1
    db2 = dlogits.sum(axis=0)
    da1 = dlogits @ params.w2
    dz1 = da1 * (z1 > 0.0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return loss, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def init_ner_params(in_dim: int, label_names: list[str], hidden: int,
                    seed: int) -> NerHeadParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    k1 = len(label_names)
    w1 = rng.uniform(-1, 1, size=(hidden, in_dim)) / np.sqrt(in_dim)
    w2 = rng.uniform(-1, 1, size=(k1, hidden)) / np.sqrt(hidden)
    return NerHeadParams(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(k1),
                         label_names=label_names)


def _derive_label_names(dataset, explicit) -> list[str]:
    if explicit is not None:
        names = list(explicit)
    else:
        seen = set()
        for seq in dataset:
            seen.update((seq.mention_types or {}).values())
        names = sorted(seen)
    if NONE_LABEL in names:
        raise ValueError(f"{NONE_LABEL!r} is reserved for untyped spans")
    if not names:
        raise ValueError("dataset carries no mention types")
    return names + [NONE_LABEL]


def _mention_spans(seq: AnnotatedSequence, config: NerHeadConfig,
                   detector, detector_inputs) -> list[Span]:
    if config.mention_source == "gold":
        return sorted(seq.mentions)
    probs = score_all_spans(detector_inputs, detector, config.window)
    return sorted(threshold_decode(probs, config.tau))


def collect_examples(dataset: list[AnnotatedSequence], emb_source,
                     config: NerHeadConfig, detector=None, detector_source=None):
    """Span embeddings and integer labels for head training.

    With the "predictions" mention source, spans come from threshold-decoding
    the detector and get their exactly matching gold type, or NONE when the
    gold annotation has no type for them. With "gold", spans are the annotated
    mentions themselves, all of which must be typed.
    """
    label_names = _derive_label_names(dataset, config.label_names)
    index = {name: i for i, name in enumerate(label_names)}
    if config.mention_source == "predictions":
        if detector is None:
            raise ValueError("predictions mention source requires a detector")
        if isinstance(detector, Checkpoint):
            detector = checkpoint_to_params(detector)
        if detector_source is None:
            detector_source = emb_source
    xs, ys = [], []
    for seq in dataset:
        typed = seq.mention_types or {}
        for span in seq.mentions:
            if span not in typed:
                raise ValueError(f"{seq.seq_id}: mention {tuple(span)} has no type")
        emb_reps = emb_source.inputs_for(seq).reps
        det_inputs = None
        if config.mention_source == "predictions":
            det_inputs = detector_source.inputs_for(seq)
        for span in _mention_spans(seq, config, detector, det_inputs):
            name = typed.get(span, NONE_LABEL)
            if name not in index:
                raise ValueError(f"unknown mention type {name!r}")
            xs.append(span_embedding(emb_reps, span))
            ys.append(index[name])
    if not xs:
        raise ValueError("no training spans collected")
    return np.stack(xs), np.asarray(ys, dtype=np.int64), label_names


def train_ner_head(dataset: list[AnnotatedSequence], emb_source,
                   config: NerHeadConfig, detector=None, detector_source=None):
    """Cross-entropy training of the typing head; returns (params, log)."""
    x, y, label_names = collect_examples(
        dataset, emb_source, config, detector, detector_source
    )
    params = init_ner_params(x.shape[1], label_names, config.hidden, config.seed)
    weights = {"w1": params.w1, "b1": params.b1, "w2": params.w2, "b2": params.b2}
    state = OptimState(lr=config.lr, weight_decay=config.weight_decay,
                       clip_norm=config.grad_clip)
    shuffle = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    epoch_losses = []
    for _ in range(config.epochs):
        order = shuffle.permutation(len(y))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            params = NerHeadParams(label_names=label_names, **weights)
            loss, grads = ner_loss_gradients(x[sel], y[sel], params)
            grads = clip_gradients(grads, config.grad_clip)
            weights, state = adamw_step(weights, grads, state)
            total += loss * len(sel)
        epoch_losses.append(total / len(y))
    params = NerHeadParams(label_names=label_names, **weights)
    probs, _ = _forward(x, params)
    accuracy = float(np.mean(np.argmax(probs, axis=1) == y))
    log = {
        "label_names": label_names,
        "n_examples": int(len(y)),
        "epoch_losses": epoch_losses,
        "final": {"train_accuracy": accuracy},
        "hyperparameters": config.hyperparameters(),
    }
    logger.info("ner head: %d examples, train accuracy %.4f", len(y), accuracy)
    return params, log


def predict_typed(dataset: list[AnnotatedSequence], emb_source,
                  head: NerHeadParams, config: NerHeadConfig,
                  detector=None, detector_source=None,
                  keep_none: bool = False) -> dict[str, dict[Span, str]]:
    """Typed span predictions per sequence; NONE spans dropped by default."""
    if config.mention_source == "predictions":
        if detector is None:
            raise ValueError("predictions mention source requires a detector")
        if isinstance(detector, Checkpoint):
            detector = checkpoint_to_params(detector)
        if detector_source is None:
            detector_source = emb_source
    out: dict[str, dict[Span, str]] = {}
    for seq in dataset:
        emb_reps = emb_source.inputs_for(seq).reps
        det_inputs = None
        if config.mention_source == "predictions":
            det_inputs = detector_source.inputs_for(seq)
        typed: dict[Span, str] = {}
        spans = _mention_spans(seq, config, detector, det_inputs)
        if spans:
            x = np.stack([span_embedding(emb_reps, s) for s in spans])
            probs, _ = _forward(x, head)
            picks = np.argmax(probs, axis=1)
            for span, k in zip(spans, picks):
                name = head.label_names[int(k)]
                if name != NONE_LABEL or keep_none:
                    typed[span] = name
        out[seq.seq_id] = typed
    return out


def ner_f1(pred: dict[str, dict[Span, str]],
           gold: dict[str, dict[Span, str]]) -> PRF:
    """Micro P/R/F1 under exact (span, type) match; NONE predictions ignored."""
    if set(pred.keys()) != set(gold.keys()):
        missing = set(gold) ^ set(pred)
        raise ValueError(f"prediction/gold sequence keys differ: {sorted(missing)[:5]}")
    tp = fp = fn = 0
    for key, g in gold.items():
        p = {(Span(*s), t) for s, t in pred[key].items() if t != NONE_LABEL}
        gt = {(Span(*s), t) for s, t in g.items()}
        tp += len(p & gt)
        fp += len(p - gt)
        fn += len(gt - p)
    return PRF.from_counts(tp, fp, fn)


def head_to_checkpoint(params: NerHeadParams, config: NerHeadConfig | None = None,
                       layer: int = 0, backbone: str = "") -> Checkpoint:
    """Package head weights (cast to float32); label names ride the manifest."""
    hp = config.hyperparameters() if config is not None else {}
    hp["label_names"] = list(params.label_names)
    return Checkpoint(
        kind="nerhead",
        rank=params.hidden,
        dim=params.in_dim,
        layer=layer,
        backbone=backbone,
        hyperparameters=hp,
        weights={"w1": params.w1, "b1": params.b1,
                 "w2": params.w2, "b2": params.b2},
    )


def checkpoint_to_head(ckpt: Checkpoint) -> NerHeadParams:
    if ckpt.kind != "nerhead":
        raise ValueError(f"expected a nerhead checkpoint, got {ckpt.kind!r}")
    names = ckpt.hyperparameters.get("label_names")
    if not names:
        raise ValueError("nerhead checkpoint missing label_names")
    w = ckpt.weights
    return NerHeadParams(w1=w["w1"], b1=w["b1"], w2=w["w2"], b2=w["b2"],
                         label_names=list(names))
