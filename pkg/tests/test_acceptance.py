"""Acceptance suite: one test per criterion, each printing a pass/fail line."""

from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import exhaustive_topk, label_distribution, preferred_alignment, brute_edit_distance, random_log_lattice
from scope_slr import ctc
from scope_slr.cleaning import MergeRule, apply_rules, mine_patterns, propose_merges
from scope_slr.cli import main
from scope_slr.context import ContextWindow, EmbeddingConfig
from scope_slr.encoders import GlossEncoder, ModelConfig, Recognizer, TrainConfig, embedding_loss
from scope_slr.keypoints import PreprocessConfig, centralized_sequence, fit_stats, preprocess, standardize
from scope_slr.metrics import bleu, rouge_l, wer_align
from scope_slr.nn import AttentionLayer, LayerNorm, TemporalConv, Tensor, cross_entropy, grad_check
from scope_slr.pipeline import run_experiment
from scope_slr.synthetic import MotionBank, make_cleaning_fixture, make_context_corpus, make_overfit_corpus


def test_criterion_1_ctc_oracle(criterion):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, beam_ok = 0.0, 0
    for _ in range(200):
        T, V = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        lat = random_log_lattice(rng, T, V + 1)
        dist = label_distribution(lat)
        for seq, p in dist.items():
            loss, _ = ctc.ctc_loss(lat, seq)
            worst = max(worst, abs(math.exp(-loss) - p) / p)
        top = ctc.prefix_beam_search(lat, beam_width=len(dist) + 1, k=3)
        oracle = exhaustive_topk(lat, 3)
        beam_ok += [h.labels for h in top] == [s for s, _ in oracle]
    elapsed = time.perf_counter() - start
    ok = criterion(1, worst <= 1e-9 and beam_ok == 200 and elapsed < 30,
                   f"max rel err {worst:.2e}, beam top-3 exact {beam_ok}/200, {elapsed:.1f}s")
    assert ok


def _gradient_cases(rng):
    """name -> (tolerance, factory returning (fn, tensors))."""

    def ctc_case():
        lat = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        labels = [int(x) for x in rng.integers(1, 4, 2)]
        return (lambda: ctc.ctc_loss_tensor(lat, labels)), [lat]

    def emb_case():
        outs = [Tensor(rng.normal(size=5), requires_grad=True) for _ in range(3)]
        tgts = [rng.normal(size=5) for _ in range(3)]
        return (lambda: embedding_loss(outs, tgts)), outs

    def ce_case():
        logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        target = rng.integers(0, 6, 4)
        return (lambda: cross_entropy(logits, target)), [logits]

    def attn_case():
        layer = AttentionLayer(8, 2, rng)
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        mask = np.array([True, True, True, False, True])
        w = rng.normal(size=(5, 8))
        return (lambda: (layer(x, mask) * w).sum()), [x, layer.w_q, layer.w_k, layer.w_v, layer.out.weight]

    def ln_case():
        ln = LayerNorm(6)
        ln.gain.data = rng.normal(size=6)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = rng.normal(size=(4, 6))
        return (lambda: (ln(x) * w).sum()), [x, ln.gain, ln.shift]

    def conv_case():
        conv = TemporalConv(3, 4, 5, 2, rng)
        x = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
        w = rng.normal(size=(5, 4))
        return (lambda: (conv(x) * w).sum()), [x, conv.weight, conv.bias]

    def gloss_case():
        cfg = ModelConfig(hidden=8, feed_forward=16, heads=2, gloss_layers=2, embed_dim=6, vocab_size=3)
        enc = GlossEncoder(cfg, rng)
        e_t = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        window = ContextWindow(rng.normal(size=(3, 6)) * [[0], [1], [1]], np.array([False, True, True]))
        labels = [int(x) for x in rng.integers(1, 4, 2)]
        return (lambda: ctc.ctc_loss_tensor(enc(e_t, window), labels)), [e_t] + enc.parameters()

    return {"ctc_loss": (1e-5, ctc_case), "embedding_loss": (1e-4, emb_case),
            "cross_entropy": (1e-4, ce_case), "attention": (1e-4, attn_case),
            "layer_norm": (1e-4, ln_case), "temporal_conv": (1e-4, conv_case),
            "gloss_encoder_stack": (1e-4, gloss_case)}


def test_criterion_2_gradient_suite(criterion):
    # each "point" is a fresh random input/parameter draw; up to 4 coordinates
    # per tensor are probed at every point
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    results = {}
    for name, (tol, make) in _gradient_cases(rng).items():
        worst = 0.0
        for _ in range(10):
            fn, wrt = make()
            worst = max(worst, grad_check(fn, wrt, eps=1e-6, max_coords=4, rng=rng))
        results[name] = (worst, tol)
    elapsed = time.perf_counter() - start
    ok = all(w <= t for w, t in results.values()) and elapsed < 120
    detail = ", ".join(f"{k} {w:.1e}" for k, (w, _) in results.items())
    assert criterion(2, ok, f"{detail}; {elapsed:.1f}s")


def test_criterion_3_mwer_contract(criterion):
    rng = np.random.default_rng(303)
    exact, worst_grad = 0, 0.0
    for _ in range(50):
        lat = random_log_lattice(rng, 6, 4)
        hyp = tuple(int(x) for x in rng.integers(1, 4, int(rng.integers(0, 4))))
        ref = [int(x) for x in rng.integers(1, 4, int(rng.integers(1, 5)))]
        loss, _ = ctc.mwer_loss(lat, [hyp], ref)
        exact += loss == float(brute_edit_distance(ref, hyp))
        # three hypotheses with one error each against ref (1, 2)
        _, grad = ctc.mwer_loss(lat, [(1,), (2,), (1, 2, 3)], [1, 2])
        worst_grad = max(worst_grad, float(np.max(np.abs(grad))))
    ok = exact == 50 and worst_grad <= 1e-12
    assert criterion(3, ok, f"single-hypothesis exact {exact}/50, equal-risk max |grad| {worst_grad:.1e}")


def test_criterion_4_preprocessing(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    bank = MotionBank.create(["A", "B", "C", "D"], rng)
    raws = [bank.render(list(rng.choice(["A", "B", "C", "D"], 3)), rng) for _ in range(50)]
    cfg = PreprocessConfig()
    cents = [centralized_sequence(r, cfg) for r in raws]
    stats = fit_stats(cents[:40])
    scale_ok = True
    for raw in raws:
        base = preprocess(raw, stats, cfg)
        for s in (2.0, 4.0):
            scaled = raw.copy()
            scaled[..., :2] *= s
            scale_ok &= np.array_equal(preprocess(scaled, stats, cfg), base)
    roots = cfg.spec.root_positions()
    root_ok = all(np.all(c[:, roots, :] == 0.0) for c in cents)
    z = np.concatenate([standardize(c, stats) for c in cents[:40]])
    # group roots are identically zero, so their columns have no spread to normalise
    live = np.ones(z.shape[1:], dtype=bool)
    live[roots, :] = False
    mean_err = float(np.max(np.abs(z.mean(axis=0))))
    std_err = float(np.max(np.abs(z.std(axis=0)[live] - 1.0)))
    elapsed = time.perf_counter() - start
    ok = scale_ok and root_ok and mean_err <= 1e-6 and std_err <= 1e-3 and elapsed < 5
    assert criterion(4, ok, f"scale bit-exact {scale_ok}, roots zero {root_ok}, |mean| {mean_err:.1e}, "
                            f"|std-1| {std_err:.1e} (non-root), {elapsed:.2f}s")


def test_criterion_5_metrics(criterion):
    rng = np.random.default_rng(505)
    agree = 0
    for _ in range(500):
        ref = list(rng.choice(list("ABCD"), int(rng.integers(1, 6))))
        hyp = list(rng.choice(list("ABCD"), int(rng.integers(0, 6))))
        rep = wer_align(hyp, ref)
        agree += rep.ops == preferred_alignment(ref, hyp) and rep.errors == brute_edit_distance(ref, hyp)
    # hand-worked toy corpus, see test_metrics for the counts
    bp = math.exp(1 - 10 / 9)
    b = bleu(["the cat sat on the mat", "a dog runs"], ["the cat is on the mat", "the dog runs fast"])
    hand = {"bleu1": 100 * bp * 7 / 9, "bleu2": 100 * bp * (4 / 9) ** 0.5,
            "bleu3": 100 * bp * (4 / 45) ** (1 / 3), "bleu4": 0.0}
    bleu_ok = all(round(b[k], 4) == round(v, 4) for k, v in hand.items())
    rouge_hand = 100 * 2.44 * 0.75 / (0.75 + 1.44)
    rouge_ok = round(rouge_l(["A C D"], ["A B C D"]), 4) == round(rouge_hand, 4)
    ok = agree == 500 and bleu_ok and rouge_ok
    assert criterion(5, ok, f"alignment oracle {agree}/500, BLEU hand {bleu_ok}, ROUGE-L hand {rouge_ok}")


DESK_TRAIN = dict(lr=3e-3, batch_size=4, align_epochs=20, gloss_epochs=200, mwer_start_epoch=120)


@pytest.mark.slow
def test_criterion_6_overfit(criterion, tmp_path):
    start = time.perf_counter()
    manifest = make_overfit_corpus(tmp_path / "overfit", seed=0)
    T_max = max(len(t.glosses) for t in manifest.turns)
    res = run_experiment(manifest, ModelConfig.desk(), TrainConfig(seed=0, **DESK_TRAIN),
                         EmbeddingConfig(kind="mock", dim=32))
    elapsed = time.perf_counter() - start
    ok = res.train_wer == 0.0 and res.dev_wer <= 0.10 and elapsed < 300
    assert criterion(6, ok, f"{len(manifest.turns)} sequences, V={manifest.vocabulary.size}, "
                            f"train WER {res.train_wer:.3f}, dev WER {res.dev_wer:.3f}, "
                            f"gloss epochs {len(res.gloss_history)}, {elapsed:.0f}s ({T_max} glosses max)")


@pytest.mark.slow
def test_criterion_7_context_benefit(criterion, tmp_path):
    start = time.perf_counter()
    manifest = make_context_corpus(tmp_path / "ctx", seed=0)
    emb = EmbeddingConfig(kind="mock-bow", dim=32)
    gaps = []
    for seed in (0, 1, 2):
        wers = {}
        for use_context in (True, False):
            train = TrainConfig(seed=seed, lr=3e-3, batch_size=8, align_epochs=20, gloss_epochs=60,
                                mwer_start_epoch=40, use_context=use_context)
            res = run_experiment(manifest, ModelConfig.desk(), train, emb, ratios=(0.6, 0.2, 0.2), split_seed=seed)
            wers[use_context] = res.dev_wer
        gaps.append((wers[True], wers[False]))
    elapsed = time.perf_counter() - start
    ok = all(off - on >= 0.10 for on, off in gaps) and elapsed < 600
    detail = "; ".join(f"seed {i}: {on:.3f} vs {off:.3f}" for i, (on, off) in enumerate(gaps))
    assert criterion(7, ok, f"dev WER context vs context-free: {detail}; {elapsed:.0f}s")


def test_criterion_8_context_free_equivalence(criterion, tmp_path):
    rng = np.random.default_rng(808)
    identical = 0
    for i in range(20):
        heads = int(rng.choice([1, 2, 4]))
        cfg = ModelConfig(hidden=4 * heads * int(rng.integers(1, 3)), feed_forward=16, heads=heads,
                          align_layers=int(rng.integers(1, 3)), gloss_layers=int(rng.integers(1, 3)),
                          mlp_layers=1, conv_width=3, embed_dim=int(rng.integers(3, 9)), max_len=32,
                          vocab_size=int(rng.integers(2, 6)))
        ablation = "noise" if i % 2 else "zeros"
        rec = Recognizer(cfg, TrainConfig(seed=int(rng.integers(0, 10**6)), context_ablation=ablation),
                         ["<blank>"] + [f"G{k}" for k in range(cfg.vocab_size)])
        for p in rec.params().values():
            p += rng.normal(0, 0.1, p.shape)  # perturb so no parameter is at its init symmetry
        path = tmp_path / f"r{i}.ckpt"
        rec.save(path)
        on, off = Recognizer.load(path), Recognizer.load(path)
        off.train_cfg.use_context = False
        seq = rng.normal(size=(int(rng.integers(4, 20)), 77, 2))
        masked = ContextWindow(rng.normal(size=(3, cfg.embed_dim)), np.zeros(3, dtype=bool))
        valid = ContextWindow(rng.normal(size=(3, cfg.embed_dim)), np.ones(3, dtype=bool))
        lat_on, lat_off = on.lattice(seq, masked), off.lattice(seq, valid)
        nb_on, nb_off = on.recognize(seq, masked), off.recognize(seq, valid)
        same_nbest = [(h.labels, h.log_prob) for h in nb_on] == [(h.labels, h.log_prob) for h in nb_off]
        identical += np.array_equal(lat_on.data, lat_off.data) and same_nbest
    assert criterion(8, identical == 20, f"bit-identical lattices and N-best {identical}/20")


def test_criterion_9_cleaning(criterion):
    fx = make_cleaning_fixture(seed=0)
    pats = {(p.kind, p.ref_window, p.hyp_window): p.frequency for p in mine_patterns(fx.pairs)}
    planted = {k: v for k, v in fx.planted.items() if isinstance(k, tuple)}
    mined_ok = all(pats.get(k) == v for k, v in planted.items())
    rules = [MergeRule(r.source, r.target, r.kind, True, r.support)
             for r in propose_merges(mine_patterns(fx.pairs), fx.manifest.gloss_counts())]
    once, report = apply_rules(fx.manifest, rules)
    twice, _ = apply_rules(once, rules)
    idempotent = [t.glosses for t in twice.turns] == [t.glosses for t in once.turns]
    shrink = report.vocab_before - report.vocab_after
    expected = len(fx.planted["synonym_rules"])
    rule_pairs = sorted((r.source, r.target) for r in rules)
    ok = mined_ok and idempotent and shrink == expected and rule_pairs == sorted(fx.planted["synonym_rules"])
    assert criterion(9, ok, f"planted patterns exact {mined_ok}, rules {rule_pairs}, vocabulary shrink "
                            f"{shrink} (planted {expected}), idempotent {idempotent}")


def _cli_pipeline(workdir: Path) -> None:
    """Every CLI stage with relative paths, so the recorded run config is
    identical across working directories."""
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        m = "corpus/manifest.json"
        common = ["--manifest", m, "--split", "split.json", "--jobs", "2", "--embed-kind", "mock-bow",
                  "--cache-dir", "cache"]
        seqs = ["--sequences", "seqs.bin"]
        steps = [
            ["make-synthetic", "overfit", "--out", "corpus", "--seed", "3"],
            ["split", "--manifest", m, "--out", "split.json", "--seed", "3"],
            ["fit-stats", *common, "--out", "stats.json"],
            ["preprocess", *common, "--stats", "stats.json", "--out", "seqs.bin"],
            ["train-align", *common, *seqs, "--epochs", "3", "--out", "align.ckpt"],
            ["train-gloss", *common, *seqs, "--align-checkpoint", "align.ckpt", "--epochs", "4",
             "--mwer-start-epoch", "2", "--out", "gloss.ckpt"],
            ["decode", *common, *seqs, "--checkpoint", "gloss.ckpt", "--split-name", "test", "--out", "decoded.json"],
            ["translate", *common, *seqs, "--checkpoint", "gloss.ckpt", "--split-name", "test",
             "--out", "translated.json"],
            ["evaluate", "--manifest", m, "--decoded", "translated.json", "--out", "eval.json"],
            ["make-synthetic", "cleaning", "--out", "fx"],
            ["clean", "mine", "--pairs", "fx/pairs.json", "--out", "patterns.json"],
            ["clean", "propose", "--manifest", "fx/manifest.json", "--patterns", "patterns.json",
             "--out", "rules.json"],
        ]
        for argv in steps:
            code = main(argv)
            if code:
                raise AssertionError(f"{argv[0]} exited with {code}")
        rules = json.loads(Path("rules.json").read_text())
        Path("approved.json").write_text(json.dumps([{**r, "approved": True} for r in rules]))
        argv = ["clean", "apply", "--manifest", "fx/manifest.json", "--rules", "approved.json", "--out", "clean.json"]
        if main(argv):
            raise AssertionError("clean apply failed")
    finally:
        os.chdir(cwd)


ARTIFACTS = ["corpus/manifest.json", "corpus/keypoints/d000_0.skpt", "split.json", "stats.json", "seqs.bin",
             "align.ckpt", "align.ckpt.log.jsonl", "gloss.ckpt", "gloss.ckpt.log.jsonl", "decoded.json",
             "translated.json", "eval.json", "patterns.json", "rules.json",
             "clean.json", "clean.json.report.json"]


def test_criterion_10_reproducibility(criterion, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _cli_pipeline(tmp_path / "a")
    _cli_pipeline(tmp_path / "b")
    same = [name for name in ARTIFACTS
            if (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()]
    differing = sorted(set(ARTIFACTS) - set(same))
    assert criterion(10, not differing, f"{len(same)}/{len(ARTIFACTS)} artifacts byte-identical"
                                        + (f", differing: {differing}" if differing else ""))
