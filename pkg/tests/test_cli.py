import json

import pytest

from nanoglm import TOY_LIBRARY, TOY_QA_CORPUS, data_path
from nanoglm.adapters import load_adapter
from nanoglm.cli import main
from nanoglm.corpus import load_qa_corpus
from nanoglm.model import load_model
from nanoglm.quant import load_quantized


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.nglm"
    rc = main(["init-model", "--out", str(path), "--layers", "1", "--d-model", "16",
               "--heads", "2", "--d-ff", "16", "--max-seq-len", "64", "--seed", "3"])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "corpus.jsonl"
    lines = [json.dumps({"question": q, "answer": a, "department": "Multiple",
                         "language": "EN", "synthetic": True})
             for q, a in [("hi?", "yes"), ("ok?", "ok"), ("go?", "no"), ("up?", "down")]]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_init_model_writes_loadable_file(model_path):
    bundle = load_model(model_path)
    assert bundle.config.n_layers == 1
    assert bundle.config.d_model == 16


def test_train_writes_adapter_and_checkpoints(model_path, corpus_path, tmp_path):
    rc = main(["train", "--model", str(model_path), "--corpus", str(corpus_path),
               "--method", "lora", "--rank", "2", "--alpha", "4", "--steps", "4",
               "--batch-size", "2", "--probe-interval", "2", "--seed", "0",
               "--out-dir", str(tmp_path)])
    assert rc == 0
    adapter = load_adapter(tmp_path / "adapter.ngla")
    assert adapter.rank == 2
    assert (tmp_path / "ckpt-000002.ngla").exists()
    assert (tmp_path / "ckpt-000004.ngla").exists()
    assert (tmp_path / "probes.jsonl").exists()


def test_train_prefix_method(model_path, corpus_path, tmp_path):
    rc = main(["train", "--model", str(model_path), "--corpus", str(corpus_path),
               "--method", "prefix", "--prefix-len", "2", "--steps", "2",
               "--batch-size", "2", "--probe-interval", "2", "--seed", "0",
               "--out-dir", str(tmp_path)])
    assert rc == 0
    adapter = load_adapter(tmp_path / "adapter.ngla")
    assert adapter.prefix_len == 2


def test_quantize_round_trip(model_path, tmp_path, capsys):
    out = tmp_path / "tiny.ngq4"
    rc = main(["quantize", "--model", str(model_path), "--policy", "keep-float",
               "--out", str(out)])
    assert rc == 0
    qb = load_quantized(out)
    assert qb.qweights
    assert "smaller than float32" in capsys.readouterr().out


def test_ingest_stats(corpus_path, capsys):
    rc = main(["ingest", "--path", str(corpus_path)])
    assert rc == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["total"] == 4


def test_ingest_reports_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"question": "no answer"}\n', encoding="utf-8")
    rc = main(["ingest", "--path", str(bad)])
    assert rc == 1
    assert "line 1" in capsys.readouterr().err


def test_ingest_library(capsys):
    rc = main(["ingest-library", "--path", str(data_path(TOY_LIBRARY))])
    assert rc == 0
    assert "20 disease documents" in capsys.readouterr().out


def test_translate_mock_and_export(tmp_path, capsys):
    infile = tmp_path / "sources.txt"
    infile.write_text("hello\nworld\n", encoding="utf-8")
    out = tmp_path / "pairs.jsonl"
    qa_out = tmp_path / "qa.jsonl"
    rc = main(["translate", "--in", str(infile), "--out", str(out), "--mock",
               "--qa-out", str(qa_out)])
    assert rc == 0
    report = load_qa_corpus(qa_out, strict=True)
    assert len(report.records) == 2
    assert report.records[0].answer == "HELLO"


def test_probe_command(model_path, capsys):
    rc = main(["probe", "--model", str(model_path)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["outputs"]) == 2
    assert "degenerate" in out


def test_eval_ppl(model_path, capsys):
    rc = main(["eval-ppl", "--model", str(model_path), "--corpus", str(data_path(TOY_QA_CORPUS))])
    assert rc == 0
    assert "perplexity:" in capsys.readouterr().out


def test_error_exit_code_for_missing_model(tmp_path, capsys):
    rc = main(["eval-ppl", "--model", str(tmp_path / "nope.nglm"),
               "--corpus", str(data_path(TOY_QA_CORPUS))])
    assert rc == 2 or rc != 0


def test_serve_config_file_paths(model_path, tmp_path):
    from nanoglm.cli import _build_service, build_parser

    config = tmp_path / "service.ini"
    config.write_text(
        f"[model]\nmodel = {model_path}\nlibrary = {data_path(TOY_LIBRARY)}\n"
        f"[sampler]\ntemperature = 0.95\ntop_p = 0.7\n"
        f"[service]\npersist_dir = {tmp_path / 'events'}\n",
        encoding="utf-8")
    args = build_parser().parse_args(["serve", "--config", str(config)])
    service = _build_service(args)
    assert service.sampler_defaults.temperature == 0.95
    assert service.sampler_defaults.top_p == 0.7
    assert len(service.library) == 20
    assert service.log is not None


def test_chat_repl(model_path, monkeypatch, capsys):
    inputs = iter(["hi there", ""])
    monkeypatch.setattr("builtins.input", lambda prompt="": next(inputs))
    rc = main(["chat", "--model", str(model_path), "--library", str(data_path(TOY_LIBRARY)),
               "--max-new-tokens", "4", "--temperature", "0"])
    assert rc == 0
    assert "bot>" in capsys.readouterr().out
