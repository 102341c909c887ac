import io
import json
from pathlib import Path

import pytest

from doclm import cli, config

TINY = ["--encoder.d_enc", "16", "--encoder.n_layers", "1", "--encoder.n_heads", "2", "--decoder.d_dec", "16",
        "--decoder.n_layers", "1", "--decoder.n_heads", "2", "--decoder.max_new_tokens", "8",
        "--train.batch_size", "4", "--train.epochs", "1", "--train.lr_peak", "1e-3"]


def data_flags(d: Path):
    return ["--data.classification", str(d / "classification.jsonl"), "--data.extraction", str(d / "extraction.jsonl"),
            "--data.qa", str(d / "qa.jsonl")]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(d), "--docs", "4", "--classes", "2", "--test", "2", "--instructions", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", *TINY, *data_flags(corpus), "--data.instructions", str(corpus / "instructions.jsonl"),
            "--output_dir", str(out)]
    assert cli.main(argv) == 0
    return out


def test_synth_is_deterministic(corpus, tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--docs", "4", "--classes", "2", "--test", "2",
                     "--instructions", "3"]) == 0
    for name in ("classification.jsonl", "extraction.jsonl", "qa.jsonl", "instructions.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes(), name


def test_synth_manifest_counts(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--docs", "32", "--classes", "4", "--seed", "7"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and sorted(manifest["per_class"].values()) == [8, 8, 8, 8]


def test_synth_validation_errors(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path), "--classes", "99"]) == 1
    assert "n_classes" in capsys.readouterr().err
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["synth", "--out", str(blocker / "sub")]) == 1


def test_help_lists_every_override(capsys):
    for command in ("train", "eval", "predict", "repl"):
        with pytest.raises(SystemExit):
            cli.main([command, "--help"])
        text = capsys.readouterr().out
        for dotted, _, _ in config.override_fields():
            assert f"--{dotted}" in text, (command, dotted)


def test_train_writes_artifacts(trained):
    assert (trained / "checkpoints" / "epoch_000.ckpt").is_file()
    assert (trained / "loss_trace.csv").is_file()
    saved = config.parse((trained / "config.yaml").read_text())
    assert saved.encoder.d_enc == 16
    labels = json.loads((trained / "labels.json").read_text())
    assert labels["extraction"] == ["company", "date", "total"] and len(labels["classification"]) == 2


def test_train_missing_dataset_names_field(tmp_path, capsys):
    code = cli.main(["train", *TINY, "--data.qa", str(tmp_path / "nope.jsonl"), "--output_dir", str(tmp_path)])
    assert code == 1
    assert "data.qa" in capsys.readouterr().err


def test_train_resume_continues(corpus, trained, tmp_path):
    out = tmp_path / "resumed"
    argv = ["train", *TINY, *data_flags(corpus), "--data.instructions", str(corpus / "instructions.jsonl"),
            "--train.epochs", "2", "--output_dir", str(out),
            "--resume", str(trained / "checkpoints" / "epoch_000.ckpt")]
    assert cli.main(argv) == 0
    first = (trained / "loss_trace.csv").read_text().splitlines()
    again = (out / "loss_trace.csv").read_text().splitlines()
    assert again[: len(first)] == first and len(again) > len(first)


def test_eval_table_and_determinism(corpus, trained, tmp_path, capsys):
    base = ["eval", *TINY, *data_flags(corpus), "--output_dir", str(trained), "--split", "test"]
    assert cli.main([*base, "--out", str(tmp_path / "a")]) == 0
    table = capsys.readouterr().out
    header = table.splitlines()[0].split()
    assert header == ["task", "metric", "value", "n", "malformed"]
    assert "accuracy" in table and "entity_f1" in table and "anls" in table
    assert cli.main([*base, "--out", str(tmp_path / "b")]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_eval_without_qa_has_no_anls_row(corpus, trained, capsys):
    argv = ["eval", *TINY, "--data.classification", str(corpus / "classification.jsonl"),
            "--output_dir", str(trained), "--split", "test", "--out", str(trained / "eval_cls")]
    assert cli.main(argv) == 0
    out = capsys.readouterr().out
    assert "accuracy" in out and "anls" not in out


def test_eval_shape_mismatch_is_runtime_error(corpus, trained, capsys):
    argv = ["eval", *TINY, "--decoder.d_dec", "32", *data_flags(corpus), "--output_dir", str(trained)]
    assert cli.main(argv) == 2
    assert "adapter.weight" in capsys.readouterr().err


def test_predict(corpus, trained, tmp_path, capsys):
    doc = corpus / "qa.jsonl"
    common = ["predict", *TINY, "--output_dir", str(trained), "--document", str(doc)]
    assert cli.main([*common, "--task", "classification"]) == 0
    assert cli.main([*common, "--task", "docqa", "--question", "What is the total?"]) == 0
    assert cli.main([*common, "--task", "docqa"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"words": ["a"], "boxes": []}')
    assert cli.main(["predict", *TINY, "--output_dir", str(trained), "--document", str(bad), "--task",
                     "classification"]) == 1


def repl(trained, doc, text):
    parser = cli.build_parser()
    args = parser.parse_args(["repl", *TINY, "--output_dir", str(trained), "--document", str(doc)])
    cfg = cli.run_config(args)
    out = io.StringIO()
    code = cli.cmd_repl(args, cfg, stdin=io.StringIO(text), stdout=out)
    return code, out.getvalue()


def test_repl_reprompts_on_blank_and_exits_on_eof(corpus, trained, monkeypatch):
    calls = []
    real = cli.LayoutLLM.answer

    def spy(self, prompt, feats=None, max_new=None):
        calls.append(prompt)
        return real(self, prompt, feats, max_new)

    monkeypatch.setattr(cli.LayoutLLM, "answer", spy)
    code, out = repl(trained, corpus / "qa.jsonl", "\n   \nWhat is the date?\n")
    assert code == 0
    assert out.count("question> ") == 4
    assert len(calls) == 1 and "What is the date?" in calls[0]


def test_repl_rejects_malformed_document(trained, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert cli.main(["repl", *TINY, "--output_dir", str(trained), "--document", str(bad)]) == 1
