"""Bit-exact I/O: representation tensors, annotated datasets, checkpoints.

Three on-disk artifacts, all little-endian:

- Tensor file (magic ``TOMR``): u32 version=1, u32 ndim, ndim x u64 dims,
  then row-major float32 payload. Carries token representations, per-head
  query/key stacks, and attention score tensors.
- Checkpoint file (magic ``TOMC``): u32 version=1, u64 manifest length, a
  UTF-8 JSON manifest, then float32 weight blobs in manifest-declared order.
- Dataset: UTF-8 JSONL, one record per sequence with 1-based inclusive
  mention spans ``[s, e]`` (optionally ``[s, e, "TYPE"]``).

Token indices are 1-based inclusive in every file; conversion to 0-based
array indexing never leaks to disk.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .probe import LcattnParams, LtqkParams, ProbeParams, SequenceInputs, TomParams, THETA_ORDER
from .spanspace import Span

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"TOMR"
CHECKPOINT_MAGIC = b"TOMC"
FORMAT_VERSION = 1

CHECKPOINT_KINDS = ("tom", "ltqk", "lcattn", "nerhead")

# Weight blob order per checkpoint kind; manifests declare the same order.
WEIGHT_ORDER = {
    "tom": ("w_q", "w_k", "w_v", "theta"),
    "ltqk": ("w_q", "w_k", "w_v", "theta"),
    "lcattn": ("w_attn", "w_v", "theta"),
    "nerhead": ("w1", "b1", "w2", "b2"),
}


# ---------------------------------------------------------------------------
# Tensor files


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
    payload = arr.tobytes()
    expected = 12 + 8 * arr.ndim + 4 * arr.size
    assert len(header) + len(payload) == expected
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a ``TOMR`` tensor file back as float32."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic, not a tensor file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if ndim < 1:
        raise ValueError(f"{path}: tensor shape must be non-empty")
    header_len = 12 + 8 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    if any(d <= 0 for d in dims):
        raise ValueError(f"{path}: tensor dims must be positive, got {dims}")
    numel = 1
    for d in dims:
        numel *= d
    if len(raw) - header_len != 4 * numel:
        raise ValueError(
            f"{path}: payload length mismatch "
            f"(expected {4 * numel} bytes, found {len(raw) - header_len})"
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=header_len).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: tensor contains NaN or Inf")
    return arr.copy()


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class AnnotatedSequence:
    """One token sequence with its gold mention set.

    ``mentions`` holds 1-based inclusive spans; nesting and overlap are
    allowed. ``mention_types`` carries optional type strings for typed NER
    datasets. ``token_texts``, when present, enables detokenized reports and
    judge prompts.
    """

    seq_id: str
    n_tokens: int
    mentions: set[Span] = field(default_factory=set)
    rep_file: str | None = None
    token_texts: list[str] | None = None
    mention_types: dict[Span, str] | None = None

    def __post_init__(self) -> None:
        if self.n_tokens < 1:
            raise ValueError(f"{self.seq_id}: n_tokens must be positive")
        self.mentions = {Span(*m) for m in self.mentions}
        for m in self.mentions:
            if not (1 <= m.start <= m.end <= self.n_tokens):
                raise ValueError(f"{self.seq_id}: span out of range: {tuple(m)}")
        if self.token_texts is not None and len(self.token_texts) != self.n_tokens:
            raise ValueError(f"{self.seq_id}: token_texts length != n_tokens")
        if self.mention_types is not None:
            self.mention_types = {Span(*k): v for k, v in self.mention_types.items()}


def _parse_mentions(entries, where: str) -> tuple[set[Span], dict[Span, str] | None]:
    mentions: set[Span] = set()
    types: dict[Span, str] = {}
    for entry in entries:
        if not isinstance(entry, (list, tuple)) or len(entry) not in (2, 3):
            raise ValueError(f"{where}: malformed mention entry {entry!r}")
        span = Span(int(entry[0]), int(entry[1]))
        if span in mentions:
            logger.warning("%s: duplicate mention %s dropped", where, tuple(span))
        mentions.add(span)
        if len(entry) == 3:
            types[span] = str(entry[2])
    return mentions, (types or None)


def read_dataset(path: str | Path) -> list[AnnotatedSequence]:
    """Read a JSONL dataset; malformed lines are reported by line number."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: malformed JSON line: {exc}") from exc
            try:
                mentions, types = _parse_mentions(rec.get("mentions", []), where)
                seq = AnnotatedSequence(
                    seq_id=str(rec["seq_id"]),
                    n_tokens=int(rec["n_tokens"]),
                    mentions=mentions,
                    rep_file=rec.get("rep_file"),
                    token_texts=rec.get("token_texts"),
                    mention_types=types,
                )
            except KeyError as exc:
                raise ValueError(f"{where}: missing field {exc}") from exc
            except ValueError as exc:
                raise ValueError(f"{where}: {exc}") from exc
            seqs.append(seq)
    return seqs


def write_dataset(seqs: list[AnnotatedSequence], path: str | Path) -> None:
    """Write sequences as JSONL; mentions sorted (start, end) for stable bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            mentions = []
            for span in sorted(seq.mentions):
                if seq.mention_types and span in seq.mention_types:
                    mentions.append([span.start, span.end, seq.mention_types[span]])
                else:
                    mentions.append([span.start, span.end])
            rec: dict = {
                "seq_id": seq.seq_id,
                "n_tokens": seq.n_tokens,
                "mentions": mentions,
            }
            if seq.rep_file is not None:
                rec["rep_file"] = seq.rep_file
            if seq.token_texts is not None:
                rec["token_texts"] = seq.token_texts
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """Probe or NER-head weights plus the manifest describing them."""

    kind: str
    rank: int
    dim: int
    layer: int
    backbone: str
    hyperparameters: dict
    weights: dict[str, np.ndarray]
    theta_order: tuple[str, ...] = THETA_ORDER

    def __post_init__(self) -> None:
        if self.kind not in CHECKPOINT_KINDS:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")
        expected = WEIGHT_ORDER[self.kind]
        if tuple(self.weights.keys()) != expected:
            raise ValueError(
                f"{self.kind} checkpoint requires weights {expected}, "
                f"got {tuple(self.weights.keys())}"
            )
        self.weights = {
            k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.weights.items()
        }
        self.theta_order = tuple(self.theta_order)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = {
        "kind": ckpt.kind,
        "rank": ckpt.rank,
        "dim": ckpt.dim,
        "layer": ckpt.layer,
        "backbone": ckpt.backbone,
        "hyperparameters": ckpt.hyperparameters,
        "theta_order": list(ckpt.theta_order),
        "blobs": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in ckpt.weights.items()
        ],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for arr in ckpt.weights.values():
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (manifest_len,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + manifest_len:
        raise ValueError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed manifest: {exc}") from exc
    offset = 16 + manifest_len
    weights = {}
    for blob in manifest["blobs"]:
        shape = tuple(int(d) for d in blob["shape"])
        numel = 1
        for d in shape:
            numel *= d
        end = offset + 4 * numel
        if end > len(raw):
            raise ValueError(
                f"{path}: weight blob {blob['name']!r} declared {shape} "
                f"but payload is too short"
            )
        weights[blob["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=numel, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after weight blobs")
    return Checkpoint(
        kind=manifest["kind"],
        rank=int(manifest["rank"]),
        dim=int(manifest["dim"]),
        layer=int(manifest["layer"]),
        backbone=manifest["backbone"],
        hyperparameters=manifest["hyperparameters"],
        weights=weights,
        theta_order=tuple(manifest["theta_order"]),
    )


def params_to_checkpoint(params: ProbeParams, layer: int = 0, backbone: str = "",
                         hyperparameters: dict | None = None) -> Checkpoint:
    """Package probe parameters (cast to float32) for persistence."""
    if isinstance(params, TomParams):
        weights = {"w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
                   "theta": params.theta}
        rank, dim = params.rank, params.dim
    elif isinstance(params, LtqkParams):
        weights = {"w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
                   "theta": params.theta}
        rank, dim = params.rank, params.dim
    elif isinstance(params, LcattnParams):
        weights = {"w_attn": params.w_attn, "w_v": params.w_v, "theta": params.theta}
        rank, dim = 0, params.dim
    else:
        raise TypeError(f"unknown params type {type(params)!r}")
    return Checkpoint(
        kind=params.kind,
        rank=rank,
        dim=dim,
        layer=layer,
        backbone=backbone,
        hyperparameters=dict(hyperparameters or {}),
        weights={k: np.asarray(v, dtype="<f4") for k, v in weights.items()},
    )


def checkpoint_to_params(ckpt: Checkpoint) -> ProbeParams:
    """Rebuild probe parameters from a checkpoint (upcast to float64)."""
    w = ckpt.weights
    if ckpt.kind == "tom":
        params = TomParams(w_q=w["w_q"], w_k=w["w_k"], w_v=w["w_v"], theta=w["theta"])
        if params.rank != ckpt.rank or params.dim != ckpt.dim:
            raise ValueError(
                f"manifest declares rank {ckpt.rank}, dim {ckpt.dim} but blobs "
                f"have rank {params.rank}, dim {params.dim}"
            )
        return params
    if ckpt.kind == "ltqk":
        params = LtqkParams(w_q=w["w_q"], w_k=w["w_k"], w_v=w["w_v"], theta=w["theta"])
        if params.rank != ckpt.rank or params.dim != ckpt.dim:
            raise ValueError("manifest rank/dim inconsistent with weight blobs")
        return params
    if ckpt.kind == "lcattn":
        return LcattnParams(w_attn=w["w_attn"], w_v=w["w_v"], theta=w["theta"])
    raise ValueError(f"checkpoint kind {ckpt.kind!r} does not hold probe params")


# ---------------------------------------------------------------------------
# Representation sources


def _sibling(rep_file: str, tag: str) -> str:
    """a.tomr -> a.<tag>.tomr (sibling file holding q/k/attn tensors)."""
    stem = rep_file[: -len(".tomr")] if rep_file.endswith(".tomr") else rep_file
    return f"{stem}.{tag}.tomr"


class ArrayRepSource:
    """In-memory representation source keyed by seq_id."""

    def __init__(self, inputs: dict[str, SequenceInputs]):
        self._inputs = dict(inputs)

    def inputs_for(self, seq: AnnotatedSequence) -> SequenceInputs:
        try:
            inputs = self._inputs[seq.seq_id]
        except KeyError:
            raise FileNotFoundError(f"no representations for sequence {seq.seq_id!r}")
        if inputs.n_tokens != seq.n_tokens:
            raise ValueError(
                f"{seq.seq_id}: representation has {inputs.n_tokens} tokens, "
                f"dataset says {seq.n_tokens}"
            )
        return inputs


class DirRepSource:
    """Directory-backed source resolving each sequence's rep_file.

    The ltqk variant additionally reads sibling files ``<stem>.q.tomr`` and
    ``<stem>.k.tomr``; lcattn reads ``<stem>.attn.tomr``.
    """

    def __init__(self, root: str | Path, variant: str = "tom"):
        if variant not in ("tom", "ltqk", "lcattn"):
            raise ValueError(f"unknown variant {variant!r}")
        self.root = Path(root)
        self.variant = variant

    def inputs_for(self, seq: AnnotatedSequence) -> SequenceInputs:
        if not seq.rep_file:
            raise ValueError(f"{seq.seq_id}: sequence record has no rep_file")
        rep_path = self.root / seq.rep_file
        if not rep_path.exists():
            raise FileNotFoundError(f"{seq.seq_id}: missing rep file {rep_path}")
        reps = read_tensor(rep_path)
        head_q = head_k = attn = None
        if self.variant == "ltqk":
            head_q = read_tensor(self.root / _sibling(seq.rep_file, "q"))
            head_k = read_tensor(self.root / _sibling(seq.rep_file, "k"))
        elif self.variant == "lcattn":
            attn = read_tensor(self.root / _sibling(seq.rep_file, "attn"))
        inputs = SequenceInputs(reps=reps, head_q=head_q, head_k=head_k, attn=attn)
        if inputs.n_tokens != seq.n_tokens:
            raise ValueError(
                f"{seq.seq_id}: representation has {inputs.n_tokens} tokens, "
                f"dataset says {seq.n_tokens}"
            )
        return inputs
