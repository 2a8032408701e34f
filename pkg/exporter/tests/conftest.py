"""Shared fixtures: a tiny randomly initialized GPT-2-style backbone.

The model and tokenizer are built in-process and saved to a temp directory,
so tests exercise the real from_pretrained loading path without any network
access. The word-level tokenizer keeps character offsets trivial to reason
about in alignment tests.
"""

import json

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import Whitespace
from transformers import (GPT2Config, GPT2Model, LlamaConfig, LlamaModel,
                          PreTrainedTokenizerFast)

from tommer_exporter.backbones import load_backbone

TEXTS = [
    "Alice visited Berlin last week",
    "the old bridge crosses the river near Basel",
    "Doctor Watson met Holmes in London",
    "a quiet reading room by the harbor",
    "every morning the train leaves from platform nine",
    "under the clock tower they walked along the canal",
    "red boats carried mail between the islands all winter",
    "her sister teaches music at the school near the museum",
    "hello",
]


def _word_tokenizer():
    vocab = {"[UNK]": 0, "[PAD]": 1}
    for word in sorted({w for text in TEXTS for w in text.split()}):
        vocab[word] = len(vocab)
    tok = Tokenizer(WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = Whitespace()
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="[UNK]",
                                   pad_token="[PAD]")
    return fast, len(vocab)


@pytest.fixture(scope="session")
def backbone_dir(tmp_path_factory):
    """Absolute-position backbone with a fused qkv projection."""
    fast, vocab_size = _word_tokenizer()
    torch.manual_seed(20240817)
    config = GPT2Config(vocab_size=vocab_size, n_positions=64, n_embd=32,
                        n_layer=2, n_head=2, bos_token_id=0, eos_token_id=0)
    model = GPT2Model(config)
    out = tmp_path_factory.mktemp("tiny-backbone")
    model.save_pretrained(out)
    fast.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def rotary_backbone_dir(tmp_path_factory):
    """Rotary-position backbone with split projections and grouped-query k."""
    fast, vocab_size = _word_tokenizer()
    torch.manual_seed(7)
    config = LlamaConfig(vocab_size=vocab_size, hidden_size=32,
                         intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=2, num_key_value_heads=1,
                         max_position_embeddings=64,
                         bos_token_id=0, eos_token_id=0)
    model = LlamaModel(config)
    out = tmp_path_factory.mktemp("tiny-rotary-backbone")
    model.save_pretrained(out)
    fast.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def backbone(backbone_dir):
    return load_backbone(backbone_dir)


@pytest.fixture(scope="session")
def texts():
    return list(TEXTS)


@pytest.fixture()
def make_rows():
    """Factory turning the first n shared texts into input rows."""

    def build(n=None):
        chosen = TEXTS if n is None else TEXTS[:n]
        return [{"seq_id": f"seq-{i}", "text": text}
                for i, text in enumerate(chosen)]

    return build


@pytest.fixture()
def texts_file(tmp_path):
    """Factory writing {seq_id, text, char_spans?} rows to a JSONL file."""

    def write(rows, name="texts.jsonl"):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        return str(path)

    return write


# Tests tagged with an _acceptance_name attribute report one terminal line
# each; the printed-once guard keeps combined runs with the sibling suite
# from duplicating lines, since hooks load globally.


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = getattr(getattr(item, "function", None), "_acceptance_name", None)
    if name:
        report._acceptance_name = name


def pytest_runtest_logreport(report):
    name = getattr(report, "_acceptance_name", None)
    if not name or getattr(report, "_acceptance_printed", False):
        return
    if report.when == "call":
        status = "PASS" if report.passed else "FAIL"
    elif report.failed:
        status = "FAIL"
    else:
        return
    report._acceptance_printed = True
    print(f"\n[ACCEPTANCE] {name}: {status}", flush=True)
