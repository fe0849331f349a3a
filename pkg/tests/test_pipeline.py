import json

import numpy as np
import pytest

from clar.cli import main
from clar.data import SynthConfig, UtteranceRecord, load_dataset, synthesize_dataset, write_corpus, write_jsonl
from clar.encoders import ClarModel, ModelConfig
from clar.errors import ClarError, DataError
from clar.matching import RetrievalResult
from clar.pipeline import (
    bank_from_candidates,
    emit_prompt,
    parse_prompt,
    retrieve,
    retrieve_many,
)

SMALL = SynthConfig(vocab_size=12, feat_dim=4, n_train=10, n_test=5, bank_size=6, utt_len=(5, 8),
                    hotword_len=(2, 3), seed=4)
SMALL_MODEL = ModelConfig(feat_dim=4, vocab_size=12, embed_dim=6)


def test_synthesis_is_seeded(tmp_path):
    a = write_corpus(synthesize_dataset(SMALL), tmp_path / "a")
    b = write_corpus(synthesize_dataset(SMALL), tmp_path / "b")
    for key in ("train", "test", "bank", "config"):
        assert open(a[key], "rb").read() == open(b[key], "rb").read()


def test_noiseless_features_are_prototypes():
    corpus = synthesize_dataset(SynthConfig(**{**SMALL.__dict__, "noise": 0.0}))
    r = corpus.test[0]
    np.testing.assert_array_equal(r.features, np.repeat(corpus.prototypes[r.token_ids], 4, axis=0))


def test_hotword_annotations():
    corpus = synthesize_dataset(SynthConfig(**{**SMALL.__dict__, "hotword_len": (3, 6), "utt_len": (8, 12),
                                               "train_hotwords": 3}))
    labels = {label for label, _ in corpus.bank}
    for r in corpus.train + corpus.test:
        for hw in r.hotwords:
            assert 3 <= hw.length <= 6
    for r in corpus.test:
        assert len(r.hotwords) == 1 and r.hotwords[0].text in labels
    for r in corpus.train:
        assert len(r.hotwords) == 3
        assert not any(label in r.text for label in labels)
    every = synthesize_dataset(SynthConfig(**{**SMALL.__dict__, "train_annotation": "all"}))
    r = every.train[0]
    n = len(r.token_ids)
    assert len(r.hotwords) == (n - 1) + (n - 2)


def test_synth_config_errors():
    for bad in ({"vocab_size": 5}, {"utt_len": (5, 3)}, {"hotword_len": (4, 9)}, {"train_annotation": "x"}):
        with pytest.raises(DataError):
            synthesize_dataset(SynthConfig(**{**SMALL.__dict__, **bad}))
    with pytest.raises(DataError):
        SynthConfig.from_dict({"bogus": 1})


def test_records_round_trip_and_validation(tmp_path):
    corpus = synthesize_dataset(SMALL)
    path = tmp_path / "d.jsonl"
    write_jsonl(corpus.test, path)
    loaded = load_dataset(path)
    assert [r.id for r in loaded] == [r.id for r in corpus.test]
    np.testing.assert_array_equal(loaded[0].features, corpus.test[0].features)
    write_jsonl(corpus.test[:1] * 2, path)
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(path)
    rec = corpus.test[0].to_record()
    rec["hotwords"][0]["span"] = [0, 99]
    with pytest.raises(DataError):
        UtteranceRecord.from_record(rec)


def test_retrieve_top1_and_empty_audio():
    corpus = synthesize_dataset(SMALL)
    model = ClarModel(SMALL_MODEL)
    bank = bank_from_candidates(model, corpus.bank)
    one = retrieve(corpus.test[0], bank, model, k=1)
    assert len(one) == 1
    empty = UtteranceRecord("silent", np.zeros((0, 4)), [1], "x", [])
    results = retrieve_many([corpus.test[0], empty], bank, model, k=3)
    assert len(results[0]) == 3 and len(results[1]) == 0


def test_threaded_retrieval_matches_serial(monkeypatch):
    corpus = synthesize_dataset(SMALL)
    model = ClarModel(SMALL_MODEL)
    bank = bank_from_candidates(model, corpus.bank)
    serial = retrieve_many(corpus.test, bank, model, k=4)
    monkeypatch.setenv("CLAR_THREADS", "3")
    threaded = retrieve_many(corpus.test, bank, model, k=4)
    assert [r.indices for r in serial] == [r.indices for r in threaded]


def test_prompt_emission():
    res = RetrievalResult([0, 1], ["a", "b"], [2.0, 1.0])
    art = emit_prompt(res, "Bias: {hotwords}!", "u1")
    assert art.prompt == "Bias: a, b!" and art.hotwords == ["a", "b"]
    assert parse_prompt(art.prompt, "Bias: {hotwords}!") == ["a", "b"]
    empty = emit_prompt(RetrievalResult([], [], []))
    assert parse_prompt(empty.prompt) == []
    with pytest.raises(ClarError):
        emit_prompt(res, "no placeholder")
    with pytest.raises(ClarError):
        emit_prompt(res, "{hotwords} {hotwords}")


def _cli(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_synth_twice_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert _cli(["synth", "--seed", 7, "--out", tmp_path / d], capsys)[0] == 0
    for name in ("train.jsonl", "test.jsonl", "bank.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_evaluate_perfect_predictions(tmp_path, capsys):
    corpus = synthesize_dataset(SMALL)
    write_corpus(corpus, tmp_path)
    rows = [{"format_version": 1, "utterance_id": r.id, "ranked": [{"label": r.hotwords[0].text, "score": 1.0}]}
            for r in corpus.test]
    write_jsonl(rows, tmp_path / "res.jsonl")
    code, out, _ = _cli(["evaluate", "--results", tmp_path / "res.jsonl", "--data", tmp_path / "test.jsonl",
                         "--bank", tmp_path / "bank.jsonl", "--out", tmp_path / "report.json"], capsys)
    assert code == 0 and "Recall@1" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["recall@1"] == 100.0 and report["format_version"] == 1


def test_cli_grad_check(tmp_path, capsys):
    code, out, _ = _cli(["grad-check", "--coords", 10, "--out", tmp_path / "gc.json"], capsys)
    assert code == 0
    assert json.loads(out)["max_relative_error"] < 1e-4


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = _cli(["retrieve", "--unknown-flag"], capsys)
    assert code == 2 and json.loads(err)["error"]["type"] == "usage"
    code, _, err = _cli(["evaluate", "--results", tmp_path / "missing.jsonl", "--data", tmp_path / "x.jsonl",
                         "--out", tmp_path / "r.json"], capsys)
    assert code == 1 and "no such file" in json.loads(err)["error"]["message"]


def test_cli_end_to_end(tmp_path, capsys):
    synth = dict(SMALL.__dict__, utt_len=list(SMALL.utt_len), hotword_len=list(SMALL.hotword_len))
    (tmp_path / "synth.json").write_text(json.dumps(synth))
    train_cfg = {"model": SMALL_MODEL.__dict__, "synth": None, "cif_epochs": 1, "joint_epochs": 1, "batch_size": 4}
    (tmp_path / "train.json").write_text(json.dumps(train_cfg))
    d = tmp_path / "data"
    assert _cli(["synth", "--config", tmp_path / "synth.json", "--out", d], capsys)[0] == 0
    assert _cli(["train", "--config", tmp_path / "train.json", "--data", d / "train.jsonl", "--heldout",
                 d / "test.jsonl", "--bank", d / "bank.jsonl", "--out", tmp_path / "run"], capsys)[0] == 0
    ckpt = tmp_path / "run" / "checkpoint.json"
    assert _cli(["retrieve", "--checkpoint", ckpt, "--bank", d / "bank.jsonl", "--data", d / "test.jsonl",
                 "--topk", 2, "--policy", "skip", "--tail", "drop", "--out", tmp_path / "res.jsonl",
                 "--prompts", tmp_path / "prompts.jsonl"], capsys)[0] == 0
    rows = [json.loads(line) for line in (tmp_path / "res.jsonl").read_text().splitlines()]
    assert len(rows) == SMALL.n_test and all(len(r["ranked"]) <= 2 for r in rows)
    assert _cli(["export-map", "--checkpoint", ckpt, "--bank", d / "bank.jsonl", "--data", d / "test.jsonl",
                 "--out", tmp_path / "map.json"], capsys)[0] == 0
    rec = json.loads((tmp_path / "map.json").read_text())
    assert rec["format_version"] == 1 and len(rec["candidates"]) == SMALL.bank_size
    code, _, err = _cli(["export-map", "--checkpoint", ckpt, "--bank", d / "bank.jsonl", "--data",
                         d / "test.jsonl", "--utterance", "nope", "--out", tmp_path / "m2.json"], capsys)
    assert code == 1 and "nope" in err


def test_cli_synth_reads_training_config(tmp_path, capsys):
    nested = {"synth": {**SMALL.__dict__, "utt_len": list(SMALL.utt_len), "hotword_len": list(SMALL.hotword_len)}}
    (tmp_path / "train.json").write_text(json.dumps(nested))
    assert _cli(["synth", "--config", tmp_path / "train.json", "--out", tmp_path / "d"], capsys)[0] == 0
    assert len(load_dataset(tmp_path / "d" / "test.jsonl")) == SMALL.n_test
