"""Writers for the probing toolkit's on-disk interfaces.

The exporter talks to the probing side exclusively through files, so the
formats are implemented here independently rather than imported: a tensor
container (magic ``TOMR``: u32 version=1, u32 ndim, ndim x u64 dims, then
row-major little-endian float32 payload) and a JSONL dataset of annotated
sequences with 1-based inclusive token spans. Conformance of these bytes
against the consuming readers is pinned by the test suite.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"TOMR"
FORMAT_VERSION = 1


def write_tensor(tensor: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor file; shape must be non-empty, data finite."""
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        raise ValueError("tensor shape must be non-empty")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor dims must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def seq_file_stem(seq_id: str) -> str:
    """Stable per-sequence file stem: a short hash of the sequence id."""
    return hashlib.sha1(seq_id.encode("utf-8")).hexdigest()[:16]


def sibling_name(rep_file: str, tag: str) -> str:
    """a.tomr -> a.<tag>.tomr, the consumer's naming for q/k/attn files."""
    stem = rep_file[: -len(".tomr")] if rep_file.endswith(".tomr") else rep_file
    return f"{stem}.{tag}.tomr"


def write_dataset(records: list[dict], path: str | Path) -> None:
    """Write sequence records as JSONL.

    Each record needs ``seq_id`` and ``n_tokens``; ``mentions`` entries are
    ``(start, end)`` or ``(start, end, type)`` with 1-based inclusive token
    indices, sorted for stable bytes. ``rep_file`` and ``token_texts`` pass
    through when present.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            mentions = sorted(tuple(m) for m in rec.get("mentions", []))
            n = rec["n_tokens"]
            for m in mentions:
                if not 1 <= m[0] <= m[1] <= n:
                    raise ValueError(
                        f"{rec['seq_id']}: span {m[:2]} out of range for {n} tokens"
                    )
            out = {
                "seq_id": str(rec["seq_id"]),
                "n_tokens": int(n),
                "mentions": [list(m) for m in mentions],
            }
            if rec.get("rep_file") is not None:
                out["rep_file"] = rec["rep_file"]
            if rec.get("token_texts") is not None:
                out["token_texts"] = list(rec["token_texts"])
            fh.write(json.dumps(out, ensure_ascii=False) + "\n")


def write_manifest(manifest: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_texts(path: str | Path) -> list[dict]:
    """Read the exporter's input JSONL: one ``{seq_id, text, ...}`` per line."""
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if "seq_id" not in rec or "text" not in rec:
                raise ValueError(f"{path}:{lineno}: need seq_id and text fields")
            rec["seq_id"] = str(rec["seq_id"])
            if rec["seq_id"] in seen:
                raise ValueError(f"{path}:{lineno}: duplicate seq_id {rec['seq_id']!r}")
            seen.add(rec["seq_id"])
            rows.append(rec)
    if not rows:
        raise ValueError(f"{path}: no input texts")
    return rows
