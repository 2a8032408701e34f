"""Command-line surface binding the library into reproducible runs.

Each subcommand is a thin wrapper over one module operation: ``train``,
``infer``, ``eval``, ``dice``, ``distill``, ``judge``, ``ner-train``, and
``ner-eval``. Runs are deterministic given ``--seed``; outputs are
byte-identical across repeats except for wall-clock fields inside log files.

Errors exit nonzero (2 for usage, file, and configuration problems) with a
message on stderr; ``--json`` switches the stderr message to a single JSON
object so callers can parse failures. A ``--config`` file of ``key = value``
lines supplies defaults; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .decoding import greedy_flat_decode, threshold_decode
from .evaluation import aggregate, dice_matrix, match_prf
from .judge import (
    ClientConfig,
    judge_spans,
    judged_precision,
    sample_spans,
    write_judge_records,
)
from .nerhead import (
    NerHeadConfig,
    checkpoint_to_head,
    head_to_checkpoint,
    ner_f1,
    predict_typed,
    train_ner_head,
)
from .probe import score_all_spans
from .repio import (
    AnnotatedSequence,
    DirRepSource,
    checkpoint_to_params,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    write_dataset,
)
from .spanspace import DEFAULT_WINDOW
from .training import TrainConfig, distill_augment, distill_train, train

logger = logging.getLogger(__name__)

USER_ERRORS = (FileNotFoundError, NotADirectoryError, IsADirectoryError,
               PermissionError, ValueError, KeyError)


def _predictions_dict(seqs: list[AnnotatedSequence]) -> dict[str, set]:
    return {seq.seq_id: set(seq.mentions) for seq in seqs}


def _write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_probe(path: str | Path):
    ckpt = load_checkpoint(path)
    if ckpt.kind == "nerhead":
        raise ValueError(f"{path}: expected a probe checkpoint, got nerhead")
    return ckpt, checkpoint_to_params(ckpt)


def _decode_fn(mode: str):
    if mode == "threshold":
        return threshold_decode
    if mode == "greedy":
        return greedy_flat_decode
    raise ValueError(f"unknown decoding mode {mode!r}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    dataset = read_dataset(args.dataset)
    source = DirRepSource(args.reps_dir, args.variant)
    config = TrainConfig(
        variant=args.variant, epochs=args.epochs, batch_size=args.batch,
        window=args.window, rank=args.rank, lr=args.lr, grad_clip=args.clip,
        weight_decay=args.weight_decay, distill_phases=args.distill_phases,
        teacher_threshold=args.teacher_threshold, seed=args.seed,
        val_fraction=args.val_fraction, layer=args.layer,
        backbone=args.backbone,
    )
    start = time.time()
    if config.distill_phases > 0:
        ckpt, log = distill_train(dataset, source, config)
    else:
        ckpt, log = train(dataset, source, config)
    log["wall_seconds"] = time.time() - start
    save_checkpoint(ckpt, args.out)
    _write_json(args.log or f"{args.out}.log.json", log)
    print(f"wrote {args.out} ({log['final']['n_steps']} steps)")
    return 0


def cmd_infer(args) -> int:
    ckpt, params = _load_probe(args.ckpt)
    window = args.window or int(ckpt.hyperparameters.get("window", DEFAULT_WINDOW))
    decode = _decode_fn(args.mode)
    dataset = read_dataset(args.dataset)
    source = DirRepSource(args.reps_dir, ckpt.kind)
    out = []
    for seq in dataset:
        probs = score_all_spans(source.inputs_for(seq), params, window)
        out.append(AnnotatedSequence(
            seq_id=seq.seq_id, n_tokens=seq.n_tokens,
            mentions=decode(probs, args.tau), rep_file=seq.rep_file,
            token_texts=seq.token_texts,
        ))
    write_dataset(out, args.out)
    n = sum(len(s.mentions) for s in out)
    print(f"wrote {args.out} ({n} spans over {len(out)} sequences)")
    return 0


def cmd_eval(args) -> int:
    if len(args.preds) != len(args.gold):
        raise ValueError(f"{len(args.preds)} prediction files vs "
                         f"{len(args.gold)} gold files")
    reports = []
    per_dataset = []
    for pred_path, gold_path in zip(args.preds, args.gold):
        pred = _predictions_dict(read_dataset(pred_path))
        gold = _predictions_dict(read_dataset(gold_path))
        prf = match_prf(pred, gold)
        reports.append(prf)
        per_dataset.append({"preds": str(pred_path), "gold": str(gold_path),
                            **prf.as_dict()})
    overall = aggregate(reports, args.mode)
    payload = {"mode": args.mode, "datasets": per_dataset,
               "overall": overall.as_dict()}
    _write_json(args.report, payload)
    print(f"{args.mode} F1 {overall.f1:.4f} "
          f"(P {overall.precision:.4f}, R {overall.recall:.4f})")
    return 0


def cmd_dice(args) -> int:
    runs = []
    for path in args.preds:
        runs.append((Path(path).stem, _predictions_dict(read_dataset(path))))
    names, matrix = dice_matrix(runs)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(names) + "\n")
        for name, row in zip(names, matrix):
            fh.write(name + "," + ",".join(f"{x:.6f}" for x in row) + "\n")
    print(f"wrote {args.out} ({len(names)} runs)")
    return 0


def cmd_distill(args) -> int:
    ckpt, params = _load_probe(args.ckpt)
    window = args.window or int(ckpt.hyperparameters.get("window", DEFAULT_WINDOW))
    dataset = read_dataset(args.dataset)
    source = DirRepSource(args.reps_dir, ckpt.kind)
    augmented, n_added = distill_augment(dataset, params, source,
                                         args.threshold, window)
    write_dataset(augmented, args.out)
    print(f"wrote {args.out} ({n_added} spans added)")
    return 0


def cmd_judge(args) -> int:
    dataset = read_dataset(args.dataset)
    tokens_by_seq = {}
    for seq in dataset:
        if seq.token_texts is None:
            raise ValueError(f"{seq.seq_id}: judging needs token_texts")
        tokens_by_seq[seq.seq_id] = seq.token_texts
    preds = _predictions_dict(read_dataset(args.preds))
    items = sample_spans(preds, k=args.sample_k, seed=args.seed)
    config = ClientConfig(
        base_url=args.base_url, model=args.model, api_key_env=args.api_key_env,
        concurrency=args.concurrency, context_radius=args.radius,
        backoff=args.backoff, timeout=args.timeout,
    )
    records = judge_spans(items, tokens_by_seq, config)
    write_judge_records(args.out, records)
    report = judged_precision(records)
    if args.report:
        _write_json(args.report, report)
    precision = report["precision"]
    shown = "n/a" if precision is None else f"{precision:.4f}"
    print(f"judged {len(records)} spans: precision {shown}, "
          f"{report['unparsed']} unparsed, {report['failed']} failed")
    return 0


def _ner_config(args) -> NerHeadConfig:
    return NerHeadConfig(
        hidden=args.hidden, epochs=args.epochs, batch_size=args.batch,
        lr=args.lr, mention_source=args.source, tau=args.tau,
        window=args.window, layer_emb=args.layer_emb, seed=args.seed,
    )


def _ner_detector(args):
    if args.source != "predictions":
        return None, None
    if not args.ckpt:
        raise ValueError("--source predictions requires --ckpt")
    _, params = _load_probe(args.ckpt)
    det_dir = args.det_reps_dir or args.emb_reps_dir
    return params, DirRepSource(det_dir, params.kind)


def cmd_ner_train(args) -> int:
    dataset = read_dataset(args.dataset)
    emb_source = DirRepSource(args.emb_reps_dir)
    config = _ner_config(args)
    detector, det_source = _ner_detector(args)
    start = time.time()
    head, log = train_ner_head(dataset, emb_source, config, detector, det_source)
    log["wall_seconds"] = time.time() - start
    save_checkpoint(head_to_checkpoint(head, config, layer=args.layer_emb),
                    args.out)
    _write_json(args.log or f"{args.out}.log.json", log)
    print(f"wrote {args.out} (train accuracy "
          f"{log['final']['train_accuracy']:.4f})")
    return 0


def cmd_ner_eval(args) -> int:
    head = checkpoint_to_head(load_checkpoint(args.head))
    dataset = read_dataset(args.dataset)
    emb_source = DirRepSource(args.emb_reps_dir)
    config = _ner_config(args)
    detector, det_source = _ner_detector(args)
    pred = predict_typed(dataset, emb_source, head, config, detector, det_source)
    gold = {seq.seq_id: dict(seq.mention_types or {}) for seq in dataset}
    prf = ner_f1(pred, gold)
    _write_json(args.report, {"typed": prf.as_dict()})
    if args.preds_out:
        out = [AnnotatedSequence(seq_id=s.seq_id, n_tokens=s.n_tokens,
                                 mentions=set(pred[s.seq_id]),
                                 rep_file=s.rep_file, token_texts=s.token_texts,
                                 mention_types=dict(pred[s.seq_id]))
               for s in dataset]
        write_dataset(out, args.preds_out)
    print(f"typed F1 {prf.f1:.4f} (P {prf.precision:.4f}, R {prf.recall:.4f})")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="emit errors as JSON on stderr")
    common.add_argument("--config", default=None,
                        help="key = value file of defaults; flags win")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="tommer",
        description="Train, run, and evaluate mention-detection probes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def register(name, func, **kwargs):
        p = sub.add_parser(name, parents=[common], **kwargs)
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = register("train", cmd_train, help="train a probe")
    p.add_argument("--dataset", required=True)
    p.add_argument("--reps-dir", required=True)
    p.add_argument("--variant", default="tom", choices=["tom", "ltqk", "lcattn"])
    p.add_argument("--rank", type=int, default=64)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.02)
    p.add_argument("--distill-phases", type=int, default=0)
    p.add_argument("--teacher-threshold", type=float, default=0.90)
    p.add_argument("--backbone", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = register("infer", cmd_infer, help="decode spans with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--reps-dir", required=True)
    p.add_argument("--mode", default="threshold", choices=["threshold", "greedy"])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out", required=True)

    p = register("eval", cmd_eval, help="exact-match span evaluation")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--gold", nargs="+", required=True)
    p.add_argument("--mode", default="aggregated",
                   choices=["aggregated", "averaged"])
    p.add_argument("--report", required=True)

    p = register("dice", cmd_dice, help="pairwise agreement between runs")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = register("distill", cmd_distill,
                 help="augment labels with confident teacher spans")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--reps-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.90)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out", required=True)

    p = register("judge", cmd_judge,
                 help="estimate precision via a chat-completion annotator")
    p.add_argument("--preds", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--base-url", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--api-key-env", default="TOMMER_API_KEY")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--sample-k", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=int, default=32)
    p.add_argument("--backoff", type=float, default=0.5)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)

    def add_ner_common(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--emb-reps-dir", required=True)
        p.add_argument("--det-reps-dir", default=None)
        p.add_argument("--ckpt", default=None)
        p.add_argument("--source", default="predictions",
                       choices=["predictions", "gold"])
        p.add_argument("--tau", type=float, default=0.5)
        p.add_argument("--hidden", type=int, default=1024)
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
        p.add_argument("--layer-emb", type=int, default=0)
        p.add_argument("--seed", type=int, default=0)

    p = register("ner-train", cmd_ner_train, help="train the typing head")
    add_ner_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = register("ner-eval", cmd_ner_eval, help="typed span evaluation")
    add_ner_common(p)
    p.add_argument("--head", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--preds-out", default=None)

    return parser, registry


def _parse_config_value(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def apply_config_file(args: argparse.Namespace, argv: list[str],
                      registry: dict) -> None:
    """Overlay ``key = value`` defaults for options absent from argv."""
    if not args.config:
        return
    actions = {a.dest: a for a in registry[args.command]._actions}
    with open(args.config, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{args.config}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            dest = key.strip().replace("-", "_")
            if dest not in actions:
                raise ValueError(f"{args.config}:{lineno}: unknown key {key.strip()!r}")
            flag = "--" + key.strip().replace("_", "-")
            if any(tok == flag or tok.startswith(flag + "=") for tok in argv):
                continue
            parsed = _parse_config_value(value)
            action = actions[dest]
            if action.type is not None and isinstance(parsed, str):
                parsed = action.type(parsed)
            setattr(args, dest, parsed)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        apply_config_file(args, argv, registry)
        return args.func(args)
    except USER_ERRORS as exc:
        _report_error(exc, args)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        _report_error(exc, args)
        return 1


def _report_error(exc: Exception, args) -> None:
    if getattr(args, "json", False):
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
