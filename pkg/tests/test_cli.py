import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from tommer.cli import main
from tommer.repio import load_checkpoint, read_dataset, write_dataset


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture
def trained(planted_disk, tmp_path):
    """A checkpoint trained on the on-disk planted corpus."""
    root, dataset = planted_disk
    ckpt = tmp_path / "probe.tomc"
    assert run("train", "--dataset", dataset, "--reps-dir", root,
               "--rank", 8, "--epochs", 16, "--batch", 2,
               "--val-fraction", 0, "--out", ckpt) == 0
    return root, dataset, ckpt


# ---------------------------------------------------------------------------
# Parsing and error reporting


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--help")
    assert exc.value.code == 0
    assert "train" in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        run("train", "--help")
    assert exc.value.code == 0


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus")
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("not-a-command")


def test_missing_file_reports_error(tmp_path, capsys):
    code = run("eval", "--preds", tmp_path / "no.jsonl",
               "--gold", tmp_path / "no.jsonl",
               "--report", tmp_path / "r.json")
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_json_error_channel(tmp_path, capsys):
    code = run("eval", "--json", "--preds", tmp_path / "no.jsonl",
               "--gold", tmp_path / "no.jsonl",
               "--report", tmp_path / "r.json")
    assert code == 2
    payload = json.loads(capsys.readouterr().err)
    assert payload["type"] == "FileNotFoundError"
    assert "no.jsonl" in payload["error"]


# ---------------------------------------------------------------------------
# train / infer / eval / dice / distill pipeline


def test_train_writes_checkpoint_and_log(trained, tmp_path):
    root, dataset, ckpt = trained
    assert ckpt.exists()
    loaded = load_checkpoint(ckpt)
    assert loaded.kind == "tom"
    assert loaded.rank == 8
    assert loaded.hyperparameters["epochs"] == 16
    log = read_json(f"{ckpt}.log.json")
    assert log["final"]["n_steps"] == 16 * 40
    assert log["wall_seconds"] > 0


def test_train_is_deterministic_modulo_wall_clock(planted_disk, tmp_path):
    root, dataset = planted_disk
    outs = []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.tomc"
        log = tmp_path / f"{name}.log.json"
        assert run("train", "--dataset", dataset, "--reps-dir", root,
                   "--rank", 4, "--epochs", 2, "--batch", 8,
                   "--out", ckpt, "--log", log) == 0
        outs.append((ckpt.read_bytes(), read_json(log)))
    assert outs[0][0] == outs[1][0]
    for log in outs:
        log[1].pop("wall_seconds")
    assert outs[0][1] == outs[1][1]


def test_infer_and_eval(trained, tmp_path, capsys):
    root, dataset, ckpt = trained
    preds = tmp_path / "preds.jsonl"
    assert run("infer", "--ckpt", ckpt, "--dataset", dataset,
               "--reps-dir", root, "--tau", 0.5, "--out", preds) == 0
    decoded = read_dataset(preds)
    gold = read_dataset(dataset)
    assert [s.seq_id for s in decoded] == [s.seq_id for s in gold]
    assert [s.n_tokens for s in decoded] == [s.n_tokens for s in gold]

    report = tmp_path / "report.json"
    assert run("eval", "--preds", preds, "--gold", dataset,
               "--report", report) == 0
    payload = read_json(report)
    assert payload["mode"] == "aggregated"
    assert len(payload["datasets"]) == 1
    assert payload["overall"]["f1"] >= 0.85
    assert "F1" in capsys.readouterr().out


def test_infer_greedy_and_window_from_checkpoint(trained, tmp_path):
    root, dataset, ckpt = trained
    greedy = tmp_path / "greedy.jsonl"
    assert run("infer", "--ckpt", ckpt, "--dataset", dataset,
               "--reps-dir", root, "--mode", "greedy", "--out", greedy) == 0
    for seq in read_dataset(greedy):
        spans = sorted(seq.mentions)
        for a, b in zip(spans, spans[1:]):
            assert a.end < b.start  # greedy output is overlap-free


def test_eval_averaged_and_pair_mismatch(trained, tmp_path):
    root, dataset, ckpt = trained
    preds = tmp_path / "p.jsonl"
    run("infer", "--ckpt", ckpt, "--dataset", dataset,
        "--reps-dir", root, "--out", preds)
    report = tmp_path / "r.json"
    assert run("eval", "--preds", preds, preds, "--gold", dataset, dataset,
               "--mode", "averaged", "--report", report) == 0
    assert read_json(report)["mode"] == "averaged"
    assert run("eval", "--preds", preds, "--gold", dataset, dataset,
               "--report", report) == 2


def test_dice_csv(trained, tmp_path):
    root, dataset, ckpt = trained
    runs = []
    for tau in ("0.3", "0.7"):
        path = tmp_path / f"tau{tau}.jsonl"
        run("infer", "--ckpt", ckpt, "--dataset", dataset,
            "--reps-dir", root, "--tau", tau, "--out", path)
        runs.append(path)
    out = tmp_path / "dice.csv"
    assert run("dice", "--preds", *runs, "--out", out) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == ",tau0.3,tau0.7"
    assert len(lines) == 3
    cells = lines[1].split(",")
    assert cells[0] == "tau0.3" and cells[1] == "1.000000"

    assert run("dice", "--preds", runs[0], "--out", out) == 2


def test_distill_adds_confident_spans(trained, tmp_path):
    root, dataset, ckpt = trained
    stripped = tmp_path / "stripped.jsonl"
    seqs = read_dataset(dataset)
    for seq in seqs[:20]:
        seq.mentions = set()
        seq.mention_types = {}
    write_dataset(seqs, stripped)

    out = tmp_path / "augmented.jsonl"
    assert run("distill", "--ckpt", ckpt, "--dataset", stripped,
               "--reps-dir", root, "--threshold", 0.9, "--out", out) == 0
    augmented = read_dataset(out)
    kept = read_dataset(stripped)
    assert all(a.mentions >= k.mentions for a, k in zip(augmented, kept))
    n_new = sum(len(a.mentions - k.mentions)
                for a, k in zip(augmented, kept))
    assert n_new > 0


def test_train_epochs_zero(planted_disk, tmp_path):
    root, dataset = planted_disk
    ckpt = tmp_path / "init.tomc"
    assert run("train", "--dataset", dataset, "--reps-dir", root,
               "--rank", 4, "--epochs", 0, "--out", ckpt) == 0
    assert read_json(f"{ckpt}.log.json")["final"]["n_steps"] == 0


def test_config_file_overlay(planted_disk, tmp_path):
    root, dataset = planted_disk
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# defaults\nepochs = 0\nrank = 4\n")
    ckpt = tmp_path / "c.tomc"
    assert run("train", "--config", cfg, "--dataset", dataset,
               "--reps-dir", root, "--out", ckpt) == 0
    assert load_checkpoint(ckpt).rank == 4
    assert read_json(f"{ckpt}.log.json")["final"]["n_steps"] == 0

    # explicit flags beat the file
    assert run("train", "--config", cfg, "--dataset", dataset,
               "--reps-dir", root, "--epochs", 1, "--batch", 16,
               "--out", ckpt) == 0
    assert read_json(f"{ckpt}.log.json")["final"]["n_steps"] > 0

    cfg.write_text("no_such_key = 1\n")
    assert run("train", "--config", cfg, "--dataset", dataset,
               "--reps-dir", root, "--out", ckpt) == 2


# ---------------------------------------------------------------------------
# judge subcommand against a local scripted endpoint


class _YesHandler(BaseHTTPRequestHandler):
    calls = 0

    def do_POST(self):
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        type(self).calls += 1
        data = json.dumps({"choices": [{"message": {
            "content": "Sounds like a thing. Yes"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def test_judge_subcommand(tmp_path):
    from tommer.repio import AnnotatedSequence
    from tommer.spanspace import Span

    seqs = [AnnotatedSequence(
        seq_id=f"s{i}", n_tokens=4, mentions={Span(2, 3)},
        token_texts=["the", "old", "mill", "turns"]) for i in range(3)]
    dataset = tmp_path / "data.jsonl"
    write_dataset(seqs, dataset)
    preds = tmp_path / "preds.jsonl"
    write_dataset([AnnotatedSequence(seq_id=s.seq_id, n_tokens=4,
                                     mentions={Span(2, 3), Span(3, 3)})
                   for s in seqs], preds)

    server = ThreadingHTTPServer(("127.0.0.1", 0), _YesHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _YesHandler.calls = 0
    try:
        out = tmp_path / "audit.jsonl"
        report = tmp_path / "judge.json"
        code = run("judge", "--preds", preds, "--dataset", dataset,
                   "--base-url", f"http://127.0.0.1:{server.server_port}",
                   "--model", "mock", "--sample-k", 4, "--seed", 1,
                   "--concurrency", 2, "--out", out, "--report", report)
    finally:
        server.shutdown()
        thread.join()
    assert code == 0
    assert _YesHandler.calls == 4
    payload = read_json(report)
    assert payload == {"true": 4, "false": 0, "unparsed": 0, "failed": 0,
                       "precision": 1.0}
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(lines) == 4
    assert all(l["verdict"] == "TRUE" for l in lines)


def test_judge_requires_token_texts(planted_disk, tmp_path):
    root, dataset = planted_disk
    code = run("judge", "--preds", dataset, "--dataset", dataset,
               "--base-url", "http://127.0.0.1:9", "--model", "m",
               "--out", tmp_path / "audit.jsonl")
    assert code == 2


# ---------------------------------------------------------------------------
# ner-train / ner-eval


def test_ner_round_trip_gold_source(planted_disk, tmp_path, capsys):
    root, dataset = planted_disk
    head = tmp_path / "head.tomc"
    assert run("ner-train", "--dataset", dataset, "--emb-reps-dir", root,
               "--source", "gold", "--hidden", 16, "--epochs", 20,
               "--batch", 16, "--lr", 0.01, "--out", head) == 0
    ckpt = load_checkpoint(head)
    assert ckpt.kind == "nerhead"
    assert ckpt.hyperparameters["label_names"] == ["ENT", "NONE"]
    log = read_json(f"{head}.log.json")
    assert log["final"]["train_accuracy"] >= 0.95

    report = tmp_path / "typed.json"
    preds_out = tmp_path / "typed.jsonl"
    assert run("ner-eval", "--dataset", dataset, "--emb-reps-dir", root,
               "--source", "gold", "--hidden", 16, "--head", head,
               "--report", report, "--preds-out", preds_out) == 0
    assert read_json(report)["typed"]["f1"] >= 0.95
    typed = read_dataset(preds_out)
    assert all(set((s.mention_types or {}).values()) <= {"ENT"} for s in typed)
    assert "typed F1" in capsys.readouterr().out


def test_ner_predictions_source_needs_ckpt(planted_disk, tmp_path):
    root, dataset = planted_disk
    code = run("ner-train", "--dataset", dataset, "--emb-reps-dir", root,
               "--source", "predictions", "--out", tmp_path / "h.tomc")
    assert code == 2


def test_ner_predictions_source_with_detector(trained, tmp_path):
    root, dataset, ckpt = trained
    head = tmp_path / "head.tomc"
    assert run("ner-train", "--dataset", dataset, "--emb-reps-dir", root,
               "--source", "predictions", "--ckpt", ckpt,
               "--hidden", 16, "--epochs", 20, "--batch", 16, "--lr", 0.01,
               "--out", head) == 0
    report = tmp_path / "typed.json"
    assert run("ner-eval", "--dataset", dataset, "--emb-reps-dir", root,
               "--source", "predictions", "--ckpt", ckpt, "--hidden", 16,
               "--head", head, "--report", report) == 0
    assert read_json(report)["typed"]["f1"] >= 0.8
