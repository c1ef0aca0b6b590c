from __future__ import annotations

import json

import numpy as np
import pytest

from scope_slr.cli import main
from scope_slr.encoders import Recognizer
from scope_slr.nn import checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """Full CLI pipeline on the overfit corpus with the desk preset."""
    d = tmp_path_factory.mktemp("cli")
    m = d / "corpus" / "manifest.json"
    common = ["--manifest", m, "--split", d / "split.json"]
    assert run("make-synthetic", "overfit", "--out", d / "corpus") == 0
    assert run("split", "--manifest", m, "--out", d / "split.json") == 0
    assert run("fit-stats", *common, "--out", d / "stats.json") == 0
    assert run("preprocess", "--manifest", m, "--stats", d / "stats.json", "--out", d / "seqs.bin") == 0
    seqs = ["--sequences", d / "seqs.bin"]
    assert run("train-align", *common, *seqs, "--epochs", 20, "--out", d / "align.ckpt") == 0
    assert run("train-gloss", *common, *seqs, "--align-checkpoint", d / "align.ckpt", "--out", d / "gloss.ckpt") == 0
    dec = [*common, *seqs, "--checkpoint", d / "gloss.ckpt", "--split-name", "dev"]
    assert run("decode", *dec, "--out", d / "decoded.json") == 0
    assert run("evaluate", "--manifest", m, "--decoded", d / "decoded.json", "--out", d / "eval.json") == 0
    return d, common, seqs, dec


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_overfit_dev_wer_logged(overfit_run):
    d, *_ = overfit_run
    final = _log(d / "gloss.ckpt.log.jsonl")[-1]
    assert final["phase"] == "final"
    assert final["train_wer"] == 0.0 and final["dev_wer"] == 0.0


def test_evaluate_matches_logged_dev_wer(overfit_run):
    d, *_ = overfit_run
    report = json.loads((d / "eval.json").read_text())
    assert report["wer"] == _log(d / "gloss.ckpt.log.jsonl")[-1]["dev_wer"]
    assert {"bleu1", "bleu4", "rouge_l", "samples"} <= set(report)
    assert all(s["ops"] for s in report["samples"])


def test_translate_stub_is_deterministic(overfit_run):
    d, _, _, dec = overfit_run
    assert run("translate", *dec, "--out", d / "t1.json") == 0
    assert run("translate", *dec, "--out", d / "t2.json") == 0
    assert (d / "t1.json").read_bytes() == (d / "t2.json").read_bytes()
    doc = json.loads((d / "t1.json").read_text())
    s = doc["samples"][0]
    assert s["translation"] == " ".join(s["nbest"][0]["glosses"])
    assert run("evaluate", "--manifest", d / "corpus" / "manifest.json", "--decoded", d / "t1.json",
               "--out", d / "t_eval.json") == 0
    assert json.loads((d / "t_eval.json").read_text())["text_metric_target"] == "translation"


def test_context_off_path(overfit_run):
    d, _, _, dec = overfit_run
    assert run("decode", *dec, "--context", "off", "--out", d / "off.json") == 0
    assert json.loads((d / "off.json").read_text())["run_config"]["train"]["use_context"] is False


def test_zero_epochs_checkpoint_is_initialisation(overfit_run):
    d, common, seqs, _ = overfit_run
    assert run("train-align", *common, *seqs, "--epochs", 0, "--seed", 9, "--out", d / "init.ckpt") == 0
    header, params = checkpoint.load(d / "init.ckpt")
    fresh = Recognizer.from_parts(header, params)
    cfg = fresh.model_cfg
    ref = Recognizer(cfg, fresh.train_cfg).params()
    assert all(np.array_equal(ref[k], params[k]) for k in ref)


def test_missing_manifest_exit_code(tmp_path):
    assert run("split", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "s.json") == 3


def test_bad_config_exit_code(tmp_path):
    assert run("split", "--manifest", tmp_path / "m.json", "--lr", "fast", "--out", tmp_path / "s.json") == 2


def test_dimension_mismatch_exit_code(overfit_run, tmp_path):
    d, common, seqs, _ = overfit_run
    code = run("train-gloss", *common, *seqs, "--align-checkpoint", d / "align.ckpt",
               "--embed-dim", 16, "--out", tmp_path / "g.ckpt")
    assert code == 2


def test_clean_workflow(tmp_path):
    fx = tmp_path / "fx"
    assert run("make-synthetic", "cleaning", "--out", fx) == 0
    assert run("clean", "mine", "--pairs", fx / "pairs.json", "--out", tmp_path / "pat.json") == 0
    pats = json.loads((tmp_path / "pat.json").read_text())["patterns"]
    split = [p for p in pats if p["kind"] == "C-S-I-C"]
    assert split == [{"kind": "C-S-I-C", "ref": ["NEWYORK"], "hyp": ["NEW", "YORK"], "frequency": 1}]
    assert run("clean", "propose", "--manifest", fx / "manifest.json", "--patterns", tmp_path / "pat.json",
               "--out", tmp_path / "rules.json") == 0
    rules = json.loads((tmp_path / "rules.json").read_text())
    for r in rules:
        r["approved"] = True
    (tmp_path / "rules.json").write_text(json.dumps(rules))
    assert run("clean", "apply", "--manifest", fx / "manifest.json", "--rules", tmp_path / "rules.json",
               "--out", tmp_path / "clean.json") == 0
    report = json.loads((tmp_path / "clean.json.report.json").read_text())
    assert report["vocab_before"] - report["vocab_after"] == 2


def test_clean_apply_rejects_conflicts(tmp_path):
    fx = tmp_path / "fx"
    run("make-synthetic", "cleaning", "--out", fx)
    rules = [{"from": ["MOM"], "to": ["MOTHER"], "kind": "synonym", "approved": True},
             {"from": ["MOTHER"], "to": ["MA"], "kind": "synonym", "approved": True}]
    (tmp_path / "rules.json").write_text(json.dumps(rules))
    assert run("clean", "apply", "--manifest", fx / "manifest.json", "--rules", tmp_path / "rules.json",
               "--out", tmp_path / "c.json") == 3
