"""Backbone loading and internal-state extraction.

Models run in eval mode on CPU unless a device is requested; exports are
float32 regardless of the checkpoint's dtype. Hidden states are read as each
block's output (``hidden_states[layer + 1]``, so layer 0 is the first
block), a choice the manifest records explicitly.

Per-head queries and keys are recomputed from the attention module's own
projection weights applied to its captured layer-normed input. That exposes
the raw bilinear scores q_i . k_j for every (i, j) pair, before any causal
mask or softmax; the backbone's own 1/sqrt(d_h) scaling is applied and
recorded. Architectures whose attention modules hide their projections are
rejected rather than approximated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

logger = logging.getLogger(__name__)


@dataclass
class Backbone:
    model: torch.nn.Module
    tokenizer: object
    model_id: str

    @property
    def config(self):
        return self.model.config

    @property
    def n_layers(self) -> int:
        cfg = self.config
        for name in ("num_hidden_layers", "n_layer"):
            if hasattr(cfg, name):
                return int(getattr(cfg, name))
        raise ValueError(f"{self.model_id}: cannot determine layer count")

    @property
    def dim(self) -> int:
        cfg = self.config
        for name in ("hidden_size", "n_embd"):
            if hasattr(cfg, name):
                return int(getattr(cfg, name))
        raise ValueError(f"{self.model_id}: cannot determine hidden size")

    @property
    def n_heads(self) -> int:
        cfg = self.config
        for name in ("num_attention_heads", "n_head"):
            if hasattr(cfg, name):
                return int(getattr(cfg, name))
        raise ValueError(f"{self.model_id}: cannot determine head count")

    @property
    def head_dim(self) -> int:
        return int(getattr(self.config, "head_dim", None) or self.dim // self.n_heads)


def load_backbone(model_id: str, device: str = "cpu") -> Backbone:
    """Load a model plus tokenizer by hub id or local path, in eval mode."""
    from transformers import AutoModel, AutoTokenizer

    try:
        model = AutoModel.from_pretrained(model_id)
        tokenizer = AutoTokenizer.from_pretrained(model_id)
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"unknown or unloadable model id {model_id!r}: {exc}") from exc
    model.float()
    model.eval()
    model.to(device)
    for p in model.parameters():
        p.requires_grad_(False)
    return Backbone(model=model, tokenizer=tokenizer, model_id=model_id)


def tokenize(backbone: Backbone, text: str):
    """Token ids plus character offsets, without special tokens.

    Returns ``(ids, offsets, token_texts)``; offsets are end-exclusive
    character extents and token texts are the covered source slices.
    """
    enc = backbone.tokenizer(text, add_special_tokens=False,
                             return_offsets_mapping=True)
    ids = enc["input_ids"]
    offsets = [tuple(o) for o in enc["offset_mapping"]]
    if not ids:
        raise ValueError("text tokenizes to zero tokens")
    token_texts = [text[s:e] for s, e in offsets]
    return ids, offsets, token_texts


def hidden_states_for_batch(backbone: Backbone, id_batches: list[list[int]],
                            layer: int) -> list[np.ndarray]:
    """Layer outputs for a batch of token id lists, one (n, d) array each."""
    if not 0 <= layer < backbone.n_layers:
        raise ValueError(
            f"layer {layer} out of range; model has {backbone.n_layers} layers"
        )
    device = next(backbone.model.parameters()).device
    lengths = [len(ids) for ids in id_batches]
    width = max(lengths)
    input_ids = torch.zeros((len(id_batches), width), dtype=torch.long)
    mask = torch.zeros((len(id_batches), width), dtype=torch.long)
    for row, ids in enumerate(id_batches):
        input_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[row, : len(ids)] = 1
    with torch.no_grad():
        out = backbone.model(input_ids=input_ids.to(device),
                             attention_mask=mask.to(device),
                             output_hidden_states=True)
    states = out.hidden_states[layer + 1].to(torch.float32).cpu().numpy()
    return [states[row, :n].copy() for row, n in enumerate(lengths)]


def _attention_module(backbone: Backbone, layer: int):
    model = backbone.model
    for attr in ("h", "layers"):
        blocks = getattr(model, attr, None)
        if blocks is None:
            blocks = getattr(getattr(model, "model", model), attr, None)
        if blocks is not None:
            block = blocks[layer]
            for name in ("attn", "self_attn", "attention"):
                if hasattr(block, name):
                    return getattr(block, name)
    raise ValueError(
        f"{backbone.model_id}: attention internals are not exposed; "
        "q/k export is unsupported for this architecture"
    )


def _register_qk_hooks(module, slot: dict, handles: list) -> None:
    """Capture the module's own q/k projection outputs for one sequence."""
    if hasattr(module, "c_attn"):  # fused qkv projection, equal thirds

        def fused(mod, args, out):
            width = out.shape[-1] // 3
            slot["q"] = out.detach()[0, :, :width]
            slot["k"] = out.detach()[0, :, width : 2 * width]

        handles.append(module.c_attn.register_forward_hook(fused))
    elif hasattr(module, "q_proj") and hasattr(module, "k_proj"):

        def take(key):
            def hook(mod, args, out):
                slot[key] = out.detach()[0]
            return hook

        handles.append(module.q_proj.register_forward_hook(take("q")))
        handles.append(module.k_proj.register_forward_hook(take("k")))
    else:
        raise ValueError(
            "attention module exposes neither a fused qkv projection nor "
            "separate q/k projections; q/k export is unsupported"
        )


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat((-x[..., half:], x[..., :half]), dim=-1)


@dataclass
class AttentionExtract:
    """Per-layer q/k stacks (N_h, n, d_h) and scaled scores (N_h, n, n)."""

    head_q: dict[int, np.ndarray]
    head_k: dict[int, np.ndarray]
    scores: dict[int, np.ndarray]
    scale: float
    rope_applied: bool
    n_kv_heads: int


def extract_qk(backbone: Backbone, ids: list[int],
               layers: list[int]) -> AttentionExtract:
    """Per-head q, k, and unmasked pre-softmax scores for one sequence.

    Scores are q_i . k_j over all (i, j) pairs, scaled by the backbone's own
    convention (1/sqrt(d_h) unless the module says otherwise), with no causal
    mask and no softmax. Rotary position embeddings are applied when the
    backbone uses them, so the products are the ones its attention actually
    computes; grouped-query k heads are expanded to one per query head.
    """
    for layer in layers:
        if not 0 <= layer < backbone.n_layers:
            raise ValueError(
                f"layer {layer} out of range; model has {backbone.n_layers} layers"
            )
    modules = {layer: _attention_module(backbone, layer) for layer in layers}
    captured: dict[int, dict] = {layer: {} for layer in layers}
    rope: dict[str, torch.Tensor] = {}
    handles: list = []
    try:
        for layer in layers:
            _register_qk_hooks(modules[layer], captured[layer], handles)
        base = backbone.model
        rotary = getattr(base, "rotary_emb",
                         getattr(getattr(base, "model", base), "rotary_emb", None))
        if rotary is not None:

            def rope_hook(mod, args, out):
                rope["cos"] = out[0].detach()[0].to(torch.float32)
                rope["sin"] = out[1].detach()[0].to(torch.float32)

            handles.append(rotary.register_forward_hook(rope_hook))
        device = next(backbone.model.parameters()).device
        with torch.no_grad():
            backbone.model(input_ids=torch.tensor([ids], device=device))
    finally:
        for h in handles:
            h.remove()
    missing = [layer for layer in layers
               if "q" not in captured[layer] or "k" not in captured[layer]]
    if missing:
        raise ValueError(f"q/k were never captured for layers {missing}")

    n = len(ids)
    head_q, head_k, scores = {}, {}, {}
    scales = set()
    for layer in layers:
        module = modules[layer]
        d_h = int(getattr(module, "head_dim", backbone.head_dim))
        scale = float(getattr(module, "scaling", d_h ** -0.5))
        scales.add(scale)
        q = captured[layer]["q"].to(torch.float32).reshape(n, -1, d_h).transpose(0, 1)
        k = captured[layer]["k"].to(torch.float32).reshape(n, -1, d_h).transpose(0, 1)
        if rope:
            if rope["cos"].shape[-1] != d_h:
                raise ValueError(
                    "partial rotary embeddings are unsupported for q/k export"
                )
            q = q * rope["cos"] + _rotate_half(q) * rope["sin"]
            k = k * rope["cos"] + _rotate_half(k) * rope["sin"]
        if k.shape[0] != q.shape[0]:  # grouped-query attention
            k = k.repeat_interleave(q.shape[0] // k.shape[0], dim=0)
        head_q[layer] = q.numpy().astype(np.float32)
        head_k[layer] = k.numpy().astype(np.float32)
        scores[layer] = (q @ k.transpose(1, 2) * scale).numpy().astype(np.float32)
    if len(scales) != 1:
        raise ValueError(f"selected layers disagree on score scaling: {sorted(scales)}")
    n_kv = min(captured[layer]["k"].shape[-1] // backbone.head_dim
               for layer in layers)
    return AttentionExtract(head_q=head_q, head_k=head_k, scores=scores,
                            scale=scales.pop(), rope_applied=bool(rope),
                            n_kv_heads=n_kv)
