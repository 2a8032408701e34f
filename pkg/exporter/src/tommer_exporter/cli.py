"""Command line interface: export-reps, export-attn, align."""

from __future__ import annotations

import argparse
import json
import sys

from .backbones import load_backbone
from .export import align_dataset, export_attention, export_reps
from .formats import read_texts

USER_ERRORS = (ValueError, FileNotFoundError, KeyError, OSError)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tommer-export",
        description="Export transformer internals as probe-ready tensor files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    reps = sub.add_parser("export-reps", help="hidden states, one tensor per text")
    reps.add_argument("--model", required=True, help="model id or local path")
    reps.add_argument("--layer", type=int, required=True,
                      help="block index whose output to export (0-based)")
    reps.add_argument("--texts", required=True,
                      help="JSONL of {seq_id, text, char_spans?} rows")
    reps.add_argument("--out-dir", required=True)
    reps.add_argument("--batch-size", type=int, default=8)
    reps.add_argument("--device", default="cpu")

    attn = sub.add_parser("export-attn",
                          help="per-head q/k and pre-softmax scores")
    attn.add_argument("--model", required=True)
    attn.add_argument("--layers", type=_int_list, required=True,
                      help="comma-separated block indices for score export")
    attn.add_argument("--qk-layer", type=int, default=None,
                      help="layer for q/k tensors (default: first of --layers)")
    attn.add_argument("--rep-layer", type=int, default=None,
                      help="layer for hidden states (default: qk layer)")
    attn.add_argument("--texts", required=True)
    attn.add_argument("--out-dir", required=True)
    attn.add_argument("--batch-size", type=int, default=8)
    attn.add_argument("--device", default="cpu")

    align = sub.add_parser("align",
                           help="char spans to token spans, no tensors")
    align.add_argument("--model", required=True,
                       help="model or tokenizer id supplying the offsets")
    align.add_argument("--texts", required=True)
    align.add_argument("--out", required=True, help="dataset JSONL to write")
    align.add_argument("--with-rep-files", action="store_true",
                       help="record the rep_file names a tensor export would use")
    align.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rows = read_texts(args.texts)
        backbone = load_backbone(args.model, device=args.device)
        if args.command == "export-reps":
            manifest = export_reps(backbone, rows, args.layer, args.out_dir,
                                   batch_size=args.batch_size)
            summary = {"command": "export-reps", "out_dir": args.out_dir,
                       "n_texts": manifest["n_texts"],
                       "alignment": manifest["alignment"]}
        elif args.command == "export-attn":
            manifest = export_attention(backbone, rows, args.layers,
                                        args.out_dir, qk_layer=args.qk_layer,
                                        rep_layer=args.rep_layer,
                                        batch_size=args.batch_size)
            summary = {"command": "export-attn", "out_dir": args.out_dir,
                       "n_texts": manifest["n_texts"],
                       "layers": manifest["layers"],
                       "qk_layer": manifest["qk_layer"]}
        else:
            report = align_dataset(backbone, rows, args.out,
                                   with_rep_files=args.with_rep_files)
            summary = {"command": "align", "out": args.out, **report}
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
