"""Lightweight mention detection probes over frozen sequence representations.

The library trains tiny probes that score every token span (i, j) of a
sequence for being an entity mention, using only precomputed representations
read from disk. A probe combines a learned matching score between the span's
start and end tokens with a scalar end-of-mention readout, feeding a
bias-free logistic model over five span features. Training uses a
class-balanced binary cross-entropy with hand-derived gradients, AdamW, and
optional self-distillation; decoding is either threshold-based (nesting
allowed) or greedy non-overlapping.

Subpackages cover the binary tensor/checkpoint formats (repio), span
enumeration (spanspace), scoring (probe), optimization (training), decoding,
evaluation metrics, a typed-NER head (nerhead), remote-annotator precision
estimation (judge), and a synthetic corpus generator (synthetic). The
``tommer`` console script exposes the full pipeline.
"""

from .decoding import greedy_flat_decode, threshold_decode
from .evaluation import PRF, aggregate, cohen_kappa, dice, dice_matrix, match_prf
from .judge import (
    ClientConfig,
    JudgeRecord,
    Verdict,
    build_prompt,
    judge_spans,
    judged_precision,
    parse_verdict,
    read_judge_records,
    sample_spans,
    write_judge_records,
)
from .nerhead import (
    NerHeadConfig,
    NerHeadParams,
    checkpoint_to_head,
    classify_span,
    head_to_checkpoint,
    ner_f1,
    predict_typed,
    span_embedding,
    train_ner_head,
)
from .probe import (
    LcattnParams,
    LtqkParams,
    SequenceInputs,
    SpanProbMatrix,
    TomParams,
    assemble_features,
    featurize_all_spans,
    match_matrix,
    score_all_spans,
    span_probability,
    value_probe,
)
from .repio import (
    AnnotatedSequence,
    ArrayRepSource,
    Checkpoint,
    DirRepSource,
    checkpoint_to_params,
    load_checkpoint,
    params_to_checkpoint,
    read_dataset,
    read_tensor,
    save_checkpoint,
    write_dataset,
    write_tensor,
)
from .spanspace import DEFAULT_WINDOW, Span, enumerate_spans, label_spans
from .synthetic import PlantedConfig, drop_labels, make_planted_dataset, write_planted_dataset
from .training import (
    TrainConfig,
    batch_alpha,
    bbce_loss,
    distill_augment,
    distill_train,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSequence",
    "ArrayRepSource",
    "Checkpoint",
    "ClientConfig",
    "DEFAULT_WINDOW",
    "DirRepSource",
    "JudgeRecord",
    "LcattnParams",
    "LtqkParams",
    "NerHeadConfig",
    "NerHeadParams",
    "PRF",
    "PlantedConfig",
    "SequenceInputs",
    "Span",
    "SpanProbMatrix",
    "TomParams",
    "TrainConfig",
    "Verdict",
    "aggregate",
    "batch_alpha",
    "bbce_loss",
    "build_prompt",
    "checkpoint_to_head",
    "checkpoint_to_params",
    "classify_span",
    "cohen_kappa",
    "dice",
    "dice_matrix",
    "distill_augment",
    "distill_train",
    "drop_labels",
    "enumerate_spans",
    "featurize_all_spans",
    "greedy_flat_decode",
    "head_to_checkpoint",
    "judge_spans",
    "judged_precision",
    "label_spans",
    "load_checkpoint",
    "make_planted_dataset",
    "match_matrix",
    "match_prf",
    "ner_f1",
    "params_to_checkpoint",
    "parse_verdict",
    "predict_typed",
    "read_dataset",
    "read_judge_records",
    "read_tensor",
    "sample_spans",
    "save_checkpoint",
    "score_all_spans",
    "span_probability",
    "assemble_features",
    "span_embedding",
    "threshold_decode",
    "train",
    "train_ner_head",
    "value_probe",
    "write_dataset",
    "write_judge_records",
    "write_planted_dataset",
    "write_tensor",
]
