"""Export transformer internals into probe-ready tensor and dataset files."""

from .align import AlignmentReport, align_span, align_text
from .backbones import Backbone, extract_qk, load_backbone, tokenize
from .export import align_dataset, export_attention, export_reps
from .formats import read_texts, seq_file_stem, write_dataset, write_tensor

__all__ = [
    "AlignmentReport",
    "Backbone",
    "align_dataset",
    "align_span",
    "align_text",
    "export_attention",
    "export_reps",
    "extract_qk",
    "load_backbone",
    "read_texts",
    "seq_file_stem",
    "tokenize",
    "write_dataset",
    "write_tensor",
]
