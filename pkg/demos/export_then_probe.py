"""Export real transformer internals, then train a probe on the files.

Builds a tiny randomly initialized GPT-2-style backbone in memory (so the
demo needs no downloads), exports hidden states plus attention internals
with the companion exporter package, and trains one probe per variant on
the exported directory. The point is the contract: the probing side reads
the exported files with no knowledge of the backbone.

Run:  python3 demos/export_then_probe.py   (needs torch + transformers,
and the exporter package: pip install -e exporter/ --no-build-isolation)
"""

import tempfile
from pathlib import Path

try:
    import torch
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import GPT2Config, GPT2Model, PreTrainedTokenizerFast
    from tommer_exporter import export_attention, load_backbone
except ImportError as exc:
    raise SystemExit(
        f"missing dependency for this demo: {exc}\n"
        "install the exporter first: pip install -e exporter/ --no-build-isolation"
    )

from tommer import DirRepSource, TrainConfig, read_dataset, train

TEXTS = [
    "Alice visited Berlin last week",
    "the old bridge crosses the river near Basel",
    "Doctor Watson met Holmes in London",
    "every morning the train leaves from platform nine",
    "red boats carried mail between the islands all winter",
    "her sister teaches music at the school near the museum",
]


def build_backbone_dir(root: Path) -> str:
    vocab = {"[UNK]": 0, "[PAD]": 1}
    for word in sorted({w for text in TEXTS for w in text.split()}):
        vocab[word] = len(vocab)
    tok = Tokenizer(WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = Whitespace()
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="[UNK]",
                                   pad_token="[PAD]")
    torch.manual_seed(0)
    config = GPT2Config(vocab_size=len(vocab), n_positions=64, n_embd=32,
                        n_layer=2, n_head=2, bos_token_id=0, eos_token_id=0)
    model_dir = root / "backbone"
    GPT2Model(config).save_pretrained(model_dir)
    fast.save_pretrained(model_dir)
    return str(model_dir)


def first_word_span(text: str) -> list[int]:
    return [0, len(text.split()[0])]


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="export-demo-"))
    backbone = load_backbone(build_backbone_dir(root))

    rows = [{"seq_id": f"t{i}", "text": text,
             "char_spans": [first_word_span(text)]}
            for i, text in enumerate(TEXTS)]
    out_dir = root / "exported"
    manifest = export_attention(backbone, rows, layers=[0, 1],
                                out_dir=out_dir)
    print(f"exported {manifest['n_texts']} sequences to {out_dir}")
    print(f"  score scaling {manifest['score_scale']:.4f}, "
          f"{manifest['alignment']['n_dropped']} spans dropped in alignment")

    dataset = read_dataset(out_dir / "dataset.jsonl")
    for variant in ("tom", "ltqk", "lcattn"):
        source = DirRepSource(out_dir, variant)
        config = TrainConfig(variant=variant, rank=4, window=6, epochs=4,
                             batch_size=2, val_fraction=0.0, seed=0,
                             distill_phases=0)
        checkpoint, log = train(dataset, source, config)
        print(f"  {variant}: trained {log['final']['n_steps']} steps on the "
              f"exported files (dim {checkpoint.dim})")


if __name__ == "__main__":
    main()
