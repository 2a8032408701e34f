"""Export orchestration: hidden states, attention internals, alignment.

Outputs land in one directory per run: a tensor file per text (named by a
hash of its sequence id), a ``dataset.jsonl`` tying ids to files and token
counts, and a ``manifest.json`` recording the backbone, layer choices, and
conventions so downstream consumers never have to guess.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .align import AlignmentReport, align_text
from .backbones import (Backbone, extract_qk, hidden_states_for_batch,
                        tokenize)
from .formats import (seq_file_stem, sibling_name, write_dataset,
                      write_manifest, write_tensor)

logger = logging.getLogger(__name__)

HIDDEN_STATE_CONVENTION = "block_output"  # hidden_states[layer + 1]
SCORE_SCALING = "backbone qk / sqrt(d_h)"


def _is_oom(exc: RuntimeError) -> bool:
    return "out of memory" in str(exc).lower()


def _batched_hidden_states(backbone: Backbone, id_lists: list[list[int]],
                           layer: int, batch_size: int) -> list[np.ndarray]:
    """Run the backbone in batches, halving the batch size on OOM."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out: list[np.ndarray] = []
    start = 0
    while start < len(id_lists):
        chunk = id_lists[start : start + batch_size]
        try:
            out.extend(hidden_states_for_batch(backbone, chunk, layer))
        except RuntimeError as exc:
            if not _is_oom(exc) or batch_size == 1:
                raise
            batch_size = max(1, batch_size // 2)
            logger.warning("backbone ran out of memory; retrying with batch_size=%d",
                           batch_size)
            continue
        start += len(chunk)
    return out


def _tokenize_rows(backbone: Backbone, rows: list[dict]):
    """Tokenize each input row and align any char_spans it carries."""
    if not rows:
        raise ValueError("no input rows")
    prepared = []
    totals = AlignmentReport(n_spans=0, n_aligned=0, n_dropped=0)
    for row in rows:
        ids, offsets, token_texts = tokenize(backbone, row["text"])
        mentions: list[tuple[int, int]] = []
        if row.get("char_spans"):
            spans = [tuple(s) for s in row["char_spans"]]
            mentions, report = align_text(spans, offsets)
            totals.n_spans += report.n_spans
            totals.n_aligned += report.n_aligned
            totals.n_dropped += report.n_dropped
        prepared.append({
            "seq_id": row["seq_id"],
            "ids": ids,
            "token_texts": token_texts,
            "mentions": mentions,
        })
    return prepared, totals


def _dataset_records(prepared: list[dict]) -> list[dict]:
    return [{
        "seq_id": row["seq_id"],
        "n_tokens": len(row["ids"]),
        "mentions": row["mentions"],
        "rep_file": seq_file_stem(row["seq_id"]) + ".tomr",
        "token_texts": row["token_texts"],
    } for row in prepared]


def _base_manifest(backbone: Backbone, records: list[dict],
                   alignment: AlignmentReport) -> dict:
    return {
        "model_id": backbone.model_id,
        "tokenizer_id": getattr(backbone.tokenizer, "name_or_path",
                                backbone.model_id),
        "dim": backbone.dim,
        "dtype": "<f4",
        "hidden_state": HIDDEN_STATE_CONVENTION,
        "n_texts": len(records),
        "files": {rec["seq_id"]: rec["rep_file"] for rec in records},
        "alignment": {
            "n_spans": alignment.n_spans,
            "n_aligned": alignment.n_aligned,
            "n_dropped": alignment.n_dropped,
            "drop_rate": alignment.drop_rate,
        },
    }


def export_reps(backbone: Backbone, rows: list[dict], layer: int,
                out_dir: str | Path, batch_size: int = 8) -> dict:
    """Write one (n, d) hidden-state tensor per input row.

    Rows come from :func:`formats.read_texts`; any ``char_spans`` they carry
    are aligned to token spans and stored as mentions in ``dataset.jsonl``.
    Returns the manifest, which is also written to ``manifest.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared, alignment = _tokenize_rows(backbone, rows)
    states = _batched_hidden_states(backbone, [r["ids"] for r in prepared],
                                    layer, batch_size)
    records = _dataset_records(prepared)
    for rec, arr in zip(records, states):
        write_tensor(arr, out_dir / rec["rep_file"])
    manifest = _base_manifest(backbone, records, alignment)
    manifest["kind"] = "reps"
    manifest["layer"] = layer
    write_dataset(records, out_dir / "dataset.jsonl")
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def export_attention(backbone: Backbone, rows: list[dict], layers: list[int],
                     out_dir: str | Path, qk_layer: int | None = None,
                     rep_layer: int | None = None,
                     batch_size: int = 8) -> dict:
    """Write attention internals alongside hidden states for each row.

    Per row: ``<stem>.q.tomr`` and ``<stem>.k.tomr`` hold the (N_h, n, d_h)
    head projections at ``qk_layer`` (default: first of ``layers``);
    ``<stem>.attn.tomr`` stacks unmasked pre-softmax scores over ``layers``
    as (n_layers, N_h, n, n), scaled only by the backbone's own 1/sqrt(d_h);
    ``<stem>.tomr`` holds hidden states at ``rep_layer`` (default: qk_layer)
    so the directory is a complete probe input on its own.
    """
    if not layers:
        raise ValueError("need at least one layer to export attention from")
    layers = sorted(set(int(x) for x in layers))
    qk_layer = layers[0] if qk_layer is None else int(qk_layer)
    rep_layer = qk_layer if rep_layer is None else int(rep_layer)
    want = sorted(set(layers) | {qk_layer})

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prepared, alignment = _tokenize_rows(backbone, rows)
    states = _batched_hidden_states(backbone, [r["ids"] for r in prepared],
                                    rep_layer, batch_size)
    records = _dataset_records(prepared)
    extract = None
    for rec, row, arr in zip(records, prepared, states):
        extract = extract_qk(backbone, row["ids"], want)
        write_tensor(arr, out_dir / rec["rep_file"])
        write_tensor(extract.head_q[qk_layer],
                     out_dir / sibling_name(rec["rep_file"], "q"))
        write_tensor(extract.head_k[qk_layer],
                     out_dir / sibling_name(rec["rep_file"], "k"))
        stacked = np.stack([extract.scores[layer] for layer in layers])
        write_tensor(stacked, out_dir / sibling_name(rec["rep_file"], "attn"))
    manifest = _base_manifest(backbone, records, alignment)
    manifest.update({
        "kind": "attention",
        "layers": layers,
        "qk_layer": qk_layer,
        "rep_layer": rep_layer,
        "n_heads": backbone.n_heads,
        "head_dim": backbone.head_dim,
        "score_scaling": SCORE_SCALING,
        "score_scale": extract.scale,
        "score_masking": "none",
        "positional_rotation": "rotary" if extract.rope_applied else "none",
        "n_kv_heads": extract.n_kv_heads,
    })
    write_dataset(records, out_dir / "dataset.jsonl")
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def align_dataset(backbone: Backbone, rows: list[dict], out_path: str | Path,
                  with_rep_files: bool = False) -> dict:
    """Tokenize rows and align their char_spans into a dataset file.

    Writes JSONL with token-span mentions and token texts; returns a summary
    with the aggregate drop report. ``with_rep_files`` adds the rep_file
    names the export operations would use, so an alignment-only run can be
    combined with a later tensor export over the same texts.
    """
    prepared, alignment = _tokenize_rows(backbone, rows)
    records = _dataset_records(prepared)
    if not with_rep_files:
        for rec in records:
            rec["rep_file"] = None
    write_dataset(records, out_path)
    return {
        "n_texts": len(records),
        "n_spans": alignment.n_spans,
        "n_aligned": alignment.n_aligned,
        "n_dropped": alignment.n_dropped,
        "drop_rate": alignment.drop_rate,
    }
