"""Synthetic planted-mention corpora with known recoverable structure.

Sequences are random vectors in d=32 where mention tokens carry a shared
in-mention direction and mention end tokens carry a marker direction.  A
matcher that keys queries and keys on the in-mention direction and values
on the end marker separates true spans from every competing span class,
so a probe trained on this corpus should recover the planted mentions
near-perfectly.

Sequences are short with a single one-token mention each.  That keeps the
negative-to-positive span ratio small and gives every wrong span class at
least two discriminating feature channels, so separation is reachable
within a 2-epoch optimization budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .probe import SequenceInputs
from .repio import AnnotatedSequence, ArrayRepSource, write_dataset, write_tensor
from .spanspace import Span

DIM = 32

# feature layout: class-level directions on fixed coordinates
IN_MENTION = 0
END_MARKER = 1
CONSTANT = 2
AMBIENT = slice(3, DIM)


@dataclass(frozen=True)
class PlantedConfig:
    n_sequences: int = 600
    min_tokens: int = 4
    max_tokens: int = 6
    mention_len: int = 1
    noise: float = 0.02
    ambient: float = 0.05
    in_mention_scale: float = 6.0
    end_marker_scale: float = 6.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_tokens < 2 or self.max_tokens < self.min_tokens:
            raise ValueError("bad token range")
        if not 1 <= self.mention_len < self.min_tokens:
            raise ValueError(
                "mention_len must leave at least one trailing token in the "
                "shortest sequence"
            )
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be positive")


def _sample_mentions(rng: np.random.Generator, n: int, cfg: PlantedConfig) -> list[Span]:
    # keep one non-mention token after the span so v_{j+1} stays on-distribution
    start = 1 + int(rng.integers(0, n - cfg.mention_len))
    return [Span(start, start + cfg.mention_len - 1)]


def _plant_sequence(rng: np.random.Generator, n: int, mentions: list[Span], cfg: PlantedConfig) -> np.ndarray:
    reps = rng.normal(0.0, cfg.noise, size=(n, DIM))
    reps[:, AMBIENT] += rng.normal(0.0, cfg.ambient, size=(n, DIM - AMBIENT.start))
    reps[:, CONSTANT] += 1.0
    for span in mentions:
        s, e = span.start - 1, span.end - 1
        reps[s : e + 1, IN_MENTION] += cfg.in_mention_scale
        reps[e, END_MARKER] += cfg.end_marker_scale
    return reps.astype(np.float32)


def make_planted_dataset(cfg: PlantedConfig = PlantedConfig()) -> tuple[list[AnnotatedSequence], ArrayRepSource]:
    """Generate sequences plus an in-memory representation source."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    dataset = []
    inputs = {}
    for idx in range(cfg.n_sequences):
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        mentions = _sample_mentions(rng, n, cfg)
        seq_id = f"synth-{idx:04d}"
        dataset.append(
            AnnotatedSequence(
                seq_id=seq_id,
                n_tokens=n,
                mentions=set(mentions),
                mention_types={span: "ENT" for span in mentions},
            )
        )
        inputs[seq_id] = SequenceInputs(reps=_plant_sequence(rng, n, mentions, cfg))
    return dataset, ArrayRepSource(inputs)


def write_planted_dataset(directory: Path, cfg: PlantedConfig = PlantedConfig()) -> Path:
    """Materialize a planted corpus on disk: JSONL plus one rep file per sequence."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset, source = make_planted_dataset(cfg)
    for seq in dataset:
        rep_path = directory / f"{seq.seq_id}.tomr"
        write_tensor(source.inputs_for(seq).reps, rep_path)
        seq.rep_file = rep_path.name
    path = directory / "dataset.jsonl"
    write_dataset(dataset, path)
    return path


def drop_labels(dataset: list[AnnotatedSequence], fraction: float, seed: int = 0) -> list[AnnotatedSequence]:
    """Remove a global fraction of mention labels, simulating missing annotation."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    keys = [(i, span) for i, seq in enumerate(dataset) for span in sorted(seq.mentions)]
    n_drop = int(round(fraction * len(keys)))
    drop_idx = rng.choice(len(keys), size=n_drop, replace=False)
    dropped = {keys[int(k)] for k in drop_idx}
    out = []
    for i, seq in enumerate(dataset):
        kept = {span for span in seq.mentions if (i, span) not in dropped}
        types = None
        if seq.mention_types is not None:
            types = {span: t for span, t in seq.mention_types.items() if span in kept}
        out.append(
            AnnotatedSequence(
                seq_id=seq.seq_id,
                n_tokens=seq.n_tokens,
                mentions=kept,
                rep_file=seq.rep_file,
                mention_types=types,
            )
        )
    return out
