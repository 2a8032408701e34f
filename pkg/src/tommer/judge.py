"""Precision estimation by a remote chat-completion annotator.

Predicted spans are sampled, wrapped in a short detokenized context with the
candidate marked [[like this]], and sent to a chat-completion endpoint that
answers yes or no after a one-sentence justification. Verdicts are parsed
from the final sentence of the reply; every raw response is kept so a run
can be audited or replayed without re-querying.

The wire shape is the generic chat-completions JSON (model plus messages)
against a configurable base URL, so any compatible server, including a local
mock, can stand in for a hosted annotator. The API key is read from an
environment variable and never persisted.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import requests

from .spanspace import Span

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = """You are an expert in entity mention annotation.
A mention is defined as : "something that exists as itself. It does not need  to be of material existence."
In particular, abstractions and legal fictions are usually regarded as entities.  In general, there is also no presumption that an entity is animate, or present. It may  refer to animals; natural features such as mountains; inanimate objects such as tables;  numbers or sets as symbols written on a paper; human contrivances such as laws, corporations and academic disciplines; or supernatural beings such as gods and spirits."

## Instructions
- For each text span provided in [[...]], quickly determine if it is a valid mention as  defined above, regardless of its type, length, or style, but ensuring it is not a fragment.
- Briefly explain in one concise sentence whether the span fits the definition. Then answer with a clear "yes" or "no"."""

DEFAULT_CONTEXT_RADIUS = 32

_VERDICT_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_SENTENCE_SPLIT = re.compile(r"[.!?]")


class Verdict(Enum):
    TRUE = "TRUE"
    FALSE = "FALSE"
    UNPARSED = "UNPARSED"


@dataclass
class JudgeRecord:
    """One judged span: the context shown, the raw reply, and the verdict."""

    seq_id: str
    span: Span
    context_window: str
    raw_response: str
    verdict: Verdict
    failed: bool = False

    def __post_init__(self) -> None:
        self.span = Span(*self.span)
        self.verdict = Verdict(self.verdict)
        if self.context_window.count("[[") != 1 or self.context_window.count("]]") != 1:
            raise ValueError("context must contain exactly one [[...]] marker")


@dataclass
class ClientConfig:
    base_url: str
    model: str
    api_key_env: str = "TOMMER_API_KEY"
    concurrency: int = 4
    context_radius: int = DEFAULT_CONTEXT_RADIUS
    max_attempts: int = 3
    backoff: float = 0.5
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if not self.base_url or not self.model:
            raise ValueError("base_url and model are required")
        if self.concurrency < 1 or self.max_attempts < 1:
            raise ValueError("concurrency and max_attempts must be positive")
        if self.context_radius < 0 or self.backoff < 0 or self.timeout <= 0:
            raise ValueError("context_radius, backoff, timeout must be non-negative")


def build_prompt(tokens: list[str], span: Span,
                 context_radius: int = DEFAULT_CONTEXT_RADIUS) -> tuple[str, str]:
    """System instruction plus a quoted context with the span in [[...]].

    The context covers ``context_radius`` tokens on each side of the span;
    an ellipsis marks each truncated edge, attached to the quote on the left
    and space-separated on the right.
    """
    span = Span(*span)
    n = len(tokens)
    if not 1 <= span.start <= span.end <= n:
        raise ValueError(f"span {tuple(span)} out of range for {n} tokens")
    if context_radius < 0:
        raise ValueError("context_radius must be >= 0")
    lo = max(0, span.start - 1 - context_radius)
    hi = min(n, span.end + context_radius)
    words = list(tokens[lo:hi])
    first = span.start - 1 - lo
    last = span.end - 1 - lo
    words[first] = "[[" + words[first]
    words[last] = words[last] + "]]"
    body = " ".join(words)
    left = "..." if lo > 0 else ""
    right = " ..." if hi < n else ""
    return SYSTEM_PROMPT, f'"{left}{body}{right}"'


def parse_verdict(response: str) -> Verdict:
    """Last standalone yes/no in the final sentence; UNPARSED when absent."""
    sentences = [s for s in _SENTENCE_SPLIT.split(response) if s.strip()]
    if not sentences:
        return Verdict.UNPARSED
    hits = _VERDICT_RE.findall(sentences[-1])
    if not hits:
        return Verdict.UNPARSED
    return Verdict.TRUE if hits[-1].lower() == "yes" else Verdict.FALSE


def sample_spans(predictions: dict[str, set[Span]], k: int = 10000,
                 seed: int = 0) -> list[tuple[str, Span]]:
    """Uniform sample of (seq_id, span) pairs without replacement."""
    if k < 0:
        raise ValueError("k must be >= 0")
    flat = [(seq_id, Span(*span))
            for seq_id in sorted(predictions)
            for span in sorted(predictions[seq_id])]
    if k >= len(flat):
        return flat
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    chosen = rng.choice(len(flat), size=k, replace=False)
    return [flat[i] for i in sorted(int(c) for c in chosen)]


def _post_chat(config: ClientConfig, system: str, user: str) -> str:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
    }
    url = config.base_url.rstrip("/") + "/chat/completions"
    resp = requests.post(url, json=payload, headers=headers, timeout=config.timeout)
    resp.raise_for_status()
    return resp.json()["choices"][0]["message"]["content"]


def _call_with_retries(config: ClientConfig, system: str, user: str) -> str | None:
    for attempt in range(config.max_attempts):
        try:
            return _post_chat(config, system, user)
        except (requests.RequestException, KeyError, IndexError, TypeError,
                ValueError) as exc:
            logger.warning("judge call failed (attempt %d/%d): %s",
                           attempt + 1, config.max_attempts, exc)
            if attempt + 1 < config.max_attempts:
                time.sleep(config.backoff * (2 ** attempt))
    return None


def _judge_one(item: tuple[str, Span], tokens_by_seq: dict[str, list[str]],
               config: ClientConfig) -> JudgeRecord:
    seq_id, span = item
    system, user = build_prompt(tokens_by_seq[seq_id], span, config.context_radius)
    raw = _call_with_retries(config, system, user)
    if raw is None:
        return JudgeRecord(seq_id=seq_id, span=span, context_window=user,
                           raw_response="", verdict=Verdict.UNPARSED, failed=True)
    verdict = parse_verdict(raw)
    if verdict is Verdict.UNPARSED:
        retry = _call_with_retries(config, system, user)
        if retry is not None:
            raw, verdict = retry, parse_verdict(retry)
    return JudgeRecord(seq_id=seq_id, span=span, context_window=user,
                       raw_response=raw, verdict=verdict)


def judge_spans(items: list[tuple[str, Span]],
                tokens_by_seq: dict[str, list[str]],
                config: ClientConfig) -> list[JudgeRecord]:
    """One record per input span, in input order; failures never abort the run."""
    for seq_id, _ in items:
        if seq_id not in tokens_by_seq:
            raise KeyError(f"no tokens for sequence {seq_id!r}")
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        records = list(pool.map(lambda it: _judge_one(it, tokens_by_seq, config),
                                items))
    n_failed = sum(r.failed for r in records)
    if n_failed:
        logger.warning("judge run finished with %d failed spans", n_failed)
    return records


def judged_precision(records: list[JudgeRecord]) -> dict:
    """TRUE/(TRUE+FALSE) over parseable verdicts; unparsed and failed listed."""
    n_true = sum(r.verdict is Verdict.TRUE for r in records)
    n_false = sum(r.verdict is Verdict.FALSE for r in records)
    n_failed = sum(r.failed for r in records)
    n_unparsed = sum(r.verdict is Verdict.UNPARSED and not r.failed for r in records)
    judged = n_true + n_false
    return {
        "true": n_true,
        "false": n_false,
        "unparsed": n_unparsed,
        "failed": n_failed,
        "precision": (n_true / judged) if judged else None,
    }


def write_judge_records(path: str | Path, records: list[JudgeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "seq_id": r.seq_id,
                "span": [r.span.start, r.span.end],
                "context_window": r.context_window,
                "raw_response": r.raw_response,
                "verdict": r.verdict.value,
                "failed": r.failed,
            }, ensure_ascii=False) + "\n")


def read_judge_records(path: str | Path) -> list[JudgeRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(JudgeRecord(
                seq_id=d["seq_id"],
                span=Span(*d["span"]),
                context_window=d["context_window"],
                raw_response=d["raw_response"],
                verdict=Verdict(d["verdict"]),
                failed=bool(d.get("failed", False)),
            ))
    return records
