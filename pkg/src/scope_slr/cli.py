"""``scope-slr`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error, 5 external-service error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cleaning, synthetic
from .config import RunConfig, add_config_arguments, resolve
from .context import (EmbeddingProvider, PromptTemplate, TranslationClient, build_context, build_prompt)
from .dataset_io import load_manifest, load_split, split_dataset
from .encoders import Recognizer, decode_wer, train_alignment, train_gloss
from .errors import ConfigError, DataError, NumericError, ScopeError
from .keypoints import DatasetStats, GroupSpec, PreprocessConfig, fit_stats, standardize
from .metrics import bleu, corpus_wer, rouge_l, wer_align
from .nn import checkpoint
from .pipeline import align_samples, centralized, check_provider, gloss_samples

logger = logging.getLogger("scope_slr")


# helpers

def _dump_json(path: str | Path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def _read_json(path: str | Path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _need(cfg: RunConfig, name: str) -> str:
    value = getattr(cfg, name)
    if not value:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
    return value


def _preprocess_config(cfg: RunConfig) -> PreprocessConfig:
    p = cfg.preprocess
    spec = GroupSpec.load(cfg.group_spec) if cfg.group_spec else GroupSpec.default()
    return PreprocessConfig(p.eyelid_policy, p.eyelid_metric, p.eyelid_eps, p.min_confidence, spec)


def _split(cfg: RunConfig, manifest):
    if cfg.split:
        split = load_split(cfg.split)
        missing = sorted({t.dialogue_id for t in manifest.turns} - set(split.dialogues))
        if missing:
            raise DataError(f"split file does not cover dialogues {missing[:5]}")
        return split
    return split_dataset(manifest, cfg.ratio_tuple, cfg.seed)


def _load_sequences(cfg: RunConfig) -> tuple[dict, dict[str, np.ndarray]]:
    header, arrays = checkpoint.load(_need(cfg, "sequences"))
    if header.get("kind") != "sequences":
        raise DataError(f"{cfg.sequences} is not a preprocessed sequence file")
    return header, arrays


def _map(cfg: RunConfig, fn: Callable, items: Sequence) -> list:
    """Ordered map, threaded when ``--jobs`` > 1."""
    if cfg.jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(fn, items))


class _EpochLog:
    """Per-epoch JSON-lines log; the first line carries the run config."""

    def __init__(self, path: Path, cfg: RunConfig):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = path.open("w", encoding="utf-8")
        self.write({"run_config": cfg.to_json()})

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _train_guarded(out: Path, cfg: RunConfig, body: Callable[[_EpochLog], None]) -> None:
    """Run a training body; on failure leave a partial-run marker next to ``out``."""
    marker = out.with_name(out.name + ".partial")
    if marker.exists():
        marker.unlink()
    log = _EpochLog(out.with_name(out.name + ".log.jsonl"), cfg)
    try:
        body(log)
    except BaseException as exc:
        _dump_json(marker, {"error": f"{type(exc).__name__}: {exc}", "run_config": cfg.to_json()})
        raise
    finally:
        log.close()


# commands

def cmd_split(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    split = split_dataset(manifest, cfg.ratio_tuple, cfg.seed)
    doc = split.to_json()
    doc["run_config"] = cfg.to_json()
    _dump_json(args.out, doc)
    c = split.counts()
    print(f"{c['train']}/{c['dev']}/{c['test']} dialogues")
    return 0


def cmd_fit_stats(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"))
    split = _split(cfg, manifest)
    turns = split.turns(manifest, "train")
    cents = centralized(manifest, turns, _preprocess_config(cfg))
    stats = fit_stats([cents[t.uid] for t in turns])
    doc = stats.to_json()
    doc["run_config"] = cfg.to_json()
    _dump_json(args.out, doc)
    print(f"fitted statistics on {len(turns)} training turns ({stats.frame_count} frames)")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"))
    stats = DatasetStats.load(_need(cfg, "stats"))
    pre = _preprocess_config(cfg)

    def one(turn):
        try:
            return turn.uid, standardize(centralized(manifest, [turn], pre)[turn.uid], stats), None
        except DataError as exc:
            return turn.uid, None, str(exc)

    results = _map(cfg, one, manifest.turns)
    arrays = {uid: seq for uid, seq, _ in results if seq is not None}
    failures = [{"uid": uid, "error": err} for uid, _, err in results if err is not None]
    header = {"kind": "sequences", "stats": stats.to_json(), "failures": failures, "run_config": cfg.to_json()}
    checkpoint.save(args.out, header, arrays)
    print(f"preprocessed {len(arrays)} turns, {len(failures)} failed")
    for f in failures:
        print(f"  {f['uid']}: {f['error']}", file=sys.stderr)
    return 0


def _provider(cfg: RunConfig) -> EmbeddingProvider:
    return EmbeddingProvider(cfg.embedding)


def cmd_train_align(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    split = _split(cfg, manifest)
    header, seqs = _load_sequences(cfg)
    provider = _provider(cfg)
    check_provider(cfg.model, provider)
    rec = Recognizer(cfg.model, cfg.train, [], header["stats"])
    turns = [t for t in split.turns(manifest, "train") if t.uid in seqs]
    out = Path(args.out)

    def body(log: _EpochLog) -> None:
        history = train_alignment(rec, align_samples(manifest, turns, seqs, provider), on_epoch=log.write)
        rec.save(out, cfg.to_json())
        if history:
            print(f"alignment loss {history[-1]['loss']:.6f} after {len(history)} epochs")
        else:
            print("saved initial alignment encoder (0 epochs)")

    _train_guarded(out, cfg, body)
    return 0


def _gloss_recognizer(cfg: RunConfig, manifest) -> Recognizer:
    base = Recognizer.load(_need(cfg, "align_checkpoint"))
    if base.model_cfg.embed_dim != cfg.model.embed_dim:
        raise ConfigError("alignment checkpoint embed_dim differs from the configured embed_dim")
    return base.with_gloss_head(manifest.vocabulary.size, manifest.vocabulary.tokens, cfg.train)


def cmd_train_gloss(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    split = _split(cfg, manifest)
    _, seqs = _load_sequences(cfg)
    provider = _provider(cfg)
    rec = _gloss_recognizer(cfg, manifest)
    check_provider(rec.model_cfg, provider)
    train_turns = [t for t in split.turns(manifest, "train") if t.uid in seqs]
    dev_turns = [t for t in split.turns(manifest, "dev") if t.uid in seqs]
    train_s = gloss_samples(rec, manifest, train_turns, seqs, provider)
    dev_s = gloss_samples(rec, manifest, dev_turns, seqs, provider)
    out = Path(args.out)

    def body(log: _EpochLog) -> None:
        history = train_gloss(rec, train_s, dev_s, on_epoch=log.write)
        rec.save(out, cfg.to_json())
        summary = {"phase": "final", "train_wer": decode_wer(rec, train_s)[0] if train_s else None,
                   "dev_wer": decode_wer(rec, dev_s)[0] if dev_s else None, "epochs": len(history)}
        log.write(summary)
        print(f"train WER {summary['train_wer']}, dev WER {summary['dev_wer']}")

    _train_guarded(out, cfg, body)
    return 0


def _context_source(cfg: RunConfig, default: str) -> str:
    return default if cfg.context_source == "auto" else cfg.context_source


def _decode_dialogues(cfg: RunConfig, rec: Recognizer, manifest, turns, seqs, provider,
                      source: str, client: TranslationClient | None, template: PromptTemplate | None):
    """Decode (and optionally translate) turns dialogue by dialogue.

    With ``source == "own"`` the context of each turn is the translations
    produced for the earlier turns of the same dialogue.
    """
    wanted = {t.uid for t in turns}
    dialogues = manifest.dialogues()

    def run_dialogue(did: str) -> list[dict]:
        records, own_texts = [], []
        for turn in dialogues[did]:
            texts = own_texts if source == "own" else manifest.previous_texts(turn)
            record = {"uid": turn.uid}
            try:
                if turn.uid not in seqs:
                    raise DataError("no preprocessed sequence for this turn")
                window = build_context(texts, provider, rec.model_cfg.context_slots)
                nbest = rec.recognize(seqs[turn.uid], window)
                record["nbest"] = nbest.to_json(rec.vocabulary)
                if client is not None:
                    glosses = [h["glosses"] for h in record["nbest"]] or [[]]
                    prompt = build_prompt(glosses, texts, template)
                    record["prompt"] = prompt.render()
                    record["translation"] = client.translate(prompt)
                    own_texts.append(record["translation"])
            except (DataError, NumericError, ValueError) as exc:
                record["error"] = f"{type(exc).__name__}: {exc}"
                own_texts.append("")
            if turn.uid in wanted:
                records.append(record)
        return records

    per_dialogue = _map(cfg, run_dialogue, sorted({t.dialogue_id for t in turns}))
    return [r for recs in per_dialogue for r in recs]


def _decode_setup(cfg: RunConfig):
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    split = _split(cfg, manifest)
    _, seqs = _load_sequences(cfg)
    rec = Recognizer.load(_need(cfg, "checkpoint"))
    if rec.gloss is None:
        raise ConfigError("checkpoint has no gloss encoder; run train-gloss first")
    rec.train_cfg.beam_width = cfg.train.beam_width
    rec.train_cfg.nbest = cfg.train.nbest
    rec.train_cfg.use_context = cfg.train.use_context and rec.train_cfg.use_context
    provider = EmbeddingProvider(cfg.embedding)
    check_provider(rec.model_cfg, provider)
    if cfg.split_name not in ("train", "dev", "test"):
        raise ConfigError(f"unknown split name {cfg.split_name!r}")
    return manifest, split.turns(manifest, cfg.split_name), seqs, rec, provider


def _write_samples(args, cfg: RunConfig, records: list[dict], what: str) -> int:
    failures = [{"uid": r["uid"], "error": r["error"]} for r in records if "error" in r]
    doc = {"split": cfg.split_name, "samples": records, "failures": failures, "run_config": cfg.to_json()}
    _dump_json(args.out, doc)
    print(f"{what} {len(records) - len(failures)} turns, {len(failures)} failed")
    for f in failures:
        print(f"  {f['uid']}: {f['error']}", file=sys.stderr)
    return 0


def cmd_decode(args, cfg: RunConfig) -> int:
    manifest, turns, seqs, rec, provider = _decode_setup(cfg)
    records = _decode_dialogues(cfg, rec, manifest, turns, seqs, provider,
                                _context_source(cfg, "gold"), None, None)
    return _write_samples(args, cfg, records, "decoded")


def cmd_translate(args, cfg: RunConfig) -> int:
    manifest, turns, seqs, rec, provider = _decode_setup(cfg)
    client = TranslationClient(cfg.client)
    template = PromptTemplate(use_context=cfg.train.use_context)
    records = _decode_dialogues(cfg, rec, manifest, turns, seqs, provider,
                                _context_source(cfg, "own"), client, template)
    return _write_samples(args, cfg, records, "translated")


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    decoded = _read_json(args.decoded, "decode output")
    gold = {t.uid: t for t in manifest.turns}
    samples, hyps, refs, texts_h, texts_r, failures = [], [], [], [], [], list(decoded.get("failures", []))
    for rec in decoded.get("samples", []):
        uid = rec["uid"]
        if uid not in gold:
            failures.append({"uid": uid, "error": "not in manifest"})
            continue
        if "error" in rec:
            continue
        hyp = rec["nbest"][0]["glosses"] if rec.get("nbest") else []
        ref = list(gold[uid].glosses)
        report = wer_align(hyp, ref)
        samples.append({"uid": uid, "hyp": hyp, "ref": ref, "ops": report.ops, "wer": report.wer})
        hyps.append(hyp)
        refs.append(ref)
        if "translation" in rec:
            texts_h.append(rec["translation"])
            texts_r.append(gold[uid].text)
    if not samples:
        raise DataError("no decoded samples to evaluate")
    doc = {"wer": corpus_wer(hyps, refs), "samples": samples, "failures": failures,
           "run_config": cfg.to_json()}
    if texts_h and len(texts_h) == len(samples):
        doc["text_metric_target"] = "translation"
        doc.update(bleu(texts_h, texts_r, smooth=cfg.smooth, tokenization=cfg.tokenization))
        doc["rouge_l"] = rouge_l(texts_h, texts_r, tokenization=cfg.tokenization)
    else:
        doc["text_metric_target"] = "glosses"
        doc.update(bleu(hyps, refs, smooth=cfg.smooth))
        doc["rouge_l"] = rouge_l(hyps, refs)
    _dump_json(args.out, doc)
    print(f"WER {doc['wer']:.4f} over {len(samples)} turns; BLEU-4 {doc['bleu4']:.2f}; ROUGE-L {doc['rouge_l']:.2f}")
    return 0


def _pairs_from_args(args, cfg: RunConfig) -> list[tuple[list[str], list[str]]]:
    if args.pairs:
        doc = _read_json(args.pairs, "pairs file")
        try:
            return [(list(p["hyp"]), list(p["ref"])) for p in doc]
        except (KeyError, TypeError) as exc:
            raise DataError(f"pairs file entries need 'hyp' and 'ref' arrays: {exc}") from exc
    if not args.decoded:
        raise ConfigError("clean mine needs --pairs or --decoded with --manifest")
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    gold = {t.uid: t for t in manifest.turns}
    decoded = _read_json(args.decoded, "decode output")
    pairs = []
    for rec in decoded.get("samples", []):
        if rec.get("nbest") and rec["uid"] in gold:
            pairs.append((rec["nbest"][0]["glosses"], list(gold[rec["uid"]].glosses)))
    return pairs


def cmd_clean(args, cfg: RunConfig) -> int:
    if args.verb == "mine":
        log = cleaning.ProcessedPairLog(args.ledger) if args.ledger else None
        patterns = cleaning.mine_patterns(_pairs_from_args(args, cfg), log)
        _dump_json(args.out, {"patterns": [p.to_json() for p in patterns], "run_config": cfg.to_json()})
        if log is not None and args.mark_processed:
            log.add_patterns(patterns)
        print(f"{len(patterns)} patterns")
        for p in patterns[:10]:
            print(f"  {p.kind} {' '.join(p.ref_window)} -> {' '.join(p.hyp_window)} x{p.frequency}")
        return 0
    if args.verb == "propose":
        manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
        doc = _read_json(args.patterns, "patterns file")
        patterns = [cleaning.ConfusionPattern(p["kind"], tuple(p["ref"]), tuple(p["hyp"]), int(p["frequency"]))
                    for p in doc["patterns"]]
        rules = cleaning.propose_merges(patterns, manifest.gloss_counts(), cfg.threshold)
        Path(args.out).write_text(cleaning.dump_rules(rules), encoding="utf-8")
        print(f"{len(rules)} candidate rules (all unapproved; edit 'approved' to accept)")
        return 0
    manifest = load_manifest(_need(cfg, "manifest"), check_files=False)
    rules = cleaning.load_rules(args.rules)
    approved = [r for r in rules if r.approved]
    cleaned, report = cleaning.apply_rules(manifest, approved)
    doc = cleaned.to_json()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    rep = report.to_json()
    rep["skipped_unapproved"] = len(rules) - len(approved)
    rep["run_config"] = cfg.to_json()
    _dump_json(args.report or str(args.out) + ".report.json", rep)
    print(f"applied {len(approved)} rules; vocabulary {report.vocab_before} -> {report.vocab_after}")
    return 0


def cmd_make_synthetic(args, cfg: RunConfig) -> int:
    if args.kind == "overfit":
        m = synthetic.make_overfit_corpus(args.out, cfg.seed)
    elif args.kind == "context":
        m = synthetic.make_context_corpus(args.out, cfg.seed)
    else:
        fx = synthetic.make_cleaning_fixture(args.out, cfg.seed)
        _dump_json(Path(args.out) / "pairs.json", [{"hyp": h, "ref": r} for h, r in fx.pairs])
        m = fx.manifest
    print(f"wrote {len(m.turns)} turns to {args.out}")
    return 0


COMMANDS = {
    "split": (cmd_split, None), "fit-stats": (cmd_fit_stats, None), "preprocess": (cmd_preprocess, None),
    "train-align": (cmd_train_align, "align"), "train-gloss": (cmd_train_gloss, "gloss"),
    "decode": (cmd_decode, None), "evaluate": (cmd_evaluate, None), "translate": (cmd_translate, None),
    "clean": (cmd_clean, None), "make-synthetic": (cmd_make_synthetic, None),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add_config_arguments(common)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="scope-slr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("split", "fit-stats", "preprocess", "train-align", "train-gloss", "decode", "evaluate", "translate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--decoded", required=True, help="output of decode or translate")
    p = sub.add_parser("clean", parents=[common])
    p.add_argument("verb", choices=("mine", "propose", "apply"))
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", help="JSON array of {hyp, ref} gloss lists (mine)")
    p.add_argument("--decoded", help="decode output to pair with manifest glosses (mine)")
    p.add_argument("--ledger", help="processed-pair ledger, JSON lines (mine)")
    p.add_argument("--mark-processed", action="store_true", help="append mined patterns to the ledger")
    p.add_argument("--patterns", help="output of clean mine (propose)")
    p.add_argument("--rules", help="reviewed rules file (apply)")
    p.add_argument("--report", help="cleaning report path (apply)")
    p = sub.add_parser("make-synthetic", parents=[common])
    p.add_argument("kind", choices=("overfit", "context", "cleaning"))
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, phase = COMMANDS[args.command]
    try:
        cfg = resolve(args, phase=phase)
        if args.command == "clean":
            if args.verb == "propose" and not args.patterns:
                raise ConfigError("clean propose needs --patterns")
            if args.verb == "apply" and not args.rules:
                raise ConfigError("clean apply needs --rules")
        return fn(args, cfg)
    except ScopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
