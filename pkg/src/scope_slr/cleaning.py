"""Annotation cleaning from recognition errors.

Predictions are aligned against gold glosses; short confusion patterns in
the op strings point at synonyms (``C-S-C``) and at phrase/word splitting
disagreements (``C-S-I-C``, ``C-I-S-C``, ``C-D-S-C``, ``C-S-D-C``). Frequent
patterns become merge-rule candidates that a reviewer approves in a plain
JSON file before :func:`apply_rules` rewrites the manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .dataset_io import DialogueTurn, Manifest, build_vocabulary
from .errors import ConfigError, RuleConflictError
from .metrics import wer_align

PATTERN_KINDS = ("C-S-I-C", "C-I-S-C", "C-D-S-C", "C-S-D-C", "C-S-C")
_RULE_KIND = {"C-S-C": "synonym", "C-S-I-C": "split", "C-I-S-C": "split",
              "C-D-S-C": "join", "C-S-D-C": "join"}


@dataclass(frozen=True)
class ConfusionPattern:
    kind: str
    ref_window: tuple[str, ...]
    hyp_window: tuple[str, ...]
    frequency: int

    def sort_key(self):
        return (-self.frequency, self.kind, self.ref_window, self.hyp_window)

    def to_json(self) -> dict:
        return {"kind": self.kind, "ref": list(self.ref_window), "hyp": list(self.hyp_window),
                "frequency": self.frequency}


@dataclass
class MergeRule:
    source: tuple[str, ...]
    target: tuple[str, ...]
    kind: str
    approved: bool = False
    support: int = 0

    def __post_init__(self):
        self.source, self.target = tuple(self.source), tuple(self.target)
        if not self.source or not self.target:
            raise ValueError("merge rules need non-empty source and target")
        if self.source == self.target:
            raise ValueError(f"rule maps {list(self.source)} to itself")
        if self.kind not in ("synonym", "split", "join"):
            raise ValueError(f"unknown rule kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"from": list(self.source), "to": list(self.target), "kind": self.kind,
                "approved": self.approved, "support": self.support}

    @classmethod
    def from_json(cls, doc: dict) -> MergeRule:
        return cls(tuple(doc["from"]), tuple(doc["to"]), doc["kind"], bool(doc.get("approved", False)),
                   int(doc.get("support", 0)))


def load_rules(path: str | Path) -> list[MergeRule]:
    try:
        docs = json.loads(Path(path).read_text(encoding="utf-8"))
        return [MergeRule.from_json(d) for d in docs]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read rules file {path}: {exc}") from exc


def dump_rules(rules: Sequence[MergeRule]) -> str:
    return json.dumps([r.to_json() for r in rules], ensure_ascii=False, indent=1) + "\n"


def pair_key(ref_window: Sequence[str], hyp_window: Sequence[str]) -> str:
    return json.dumps([list(ref_window), list(hyp_window)], ensure_ascii=False, separators=(",", ":"))


class ProcessedPairLog:
    """Insert-only set of reviewed (ref window, hyp window) pairs, optionally
    mirrored to an append-only JSON-lines file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._keys: set[str] = set()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._keys.add(json.loads(line)["key"])

    def __contains__(self, pattern) -> bool:
        if isinstance(pattern, ConfusionPattern):
            return pair_key(pattern.ref_window, pattern.hyp_window) in self._keys
        ref, hyp = pattern
        return pair_key(ref, hyp) in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def add(self, ref_window: Sequence[str], hyp_window: Sequence[str]) -> bool:
        key = pair_key(ref_window, hyp_window)
        if key in self._keys:
            return False
        self._keys.add(key)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key}, ensure_ascii=False) + "\n")
        return True

    def add_patterns(self, patterns: Iterable[ConfusionPattern]) -> int:
        return sum(self.add(p.ref_window, p.hyp_window) for p in patterns)


def _windows(ops: list[str], ref: list[str], hyp: list[str], start: int, length: int):
    """Reference and hypothesis tokens covered by ops[start:start+length]."""
    i = sum(1 for op in ops[:start] if op != "I")
    j = sum(1 for op in ops[:start] if op != "D")
    ref_w, hyp_w = [], []
    for op in ops[start:start + length]:
        if op in "CSD":
            ref_w.append(ref[i])
            i += 1
        if op in "CSI":
            hyp_w.append(hyp[j])
            j += 1
    return ref_w, hyp_w


def find_patterns(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[str, tuple[str, ...], tuple[str, ...]]]:
    """Every (kind, ref middle, hyp middle) occurrence in one aligned pair.

    Windows exclude the bracketing ``C`` anchors. Occurrences may share an
    anchor, so ``C-S-C-S-C`` yields two ``C-S-C`` hits.
    """
    hyp, ref = list(hyp), list(ref)
    ops = wer_align(hyp, ref).op_list
    found = []
    for kind in PATTERN_KINDS:
        pat = kind.split("-")
        n = len(pat)
        for start in range(len(ops) - n + 1):
            if ops[start:start + n] == pat:
                ref_w, hyp_w = _windows(ops, ref, hyp, start + 1, n - 2)
                found.append((kind, tuple(ref_w), tuple(hyp_w)))
    return found


def mine_patterns(pairs: Sequence[tuple[Sequence[str], Sequence[str]]],
                  log: ProcessedPairLog | None = None) -> list[ConfusionPattern]:
    """Aggregate confusion patterns over (predicted, gold) pairs.

    Patterns whose window pair is already in ``log`` are skipped. Output is
    sorted by frequency (descending), then kind and windows.
    """
    if not pairs:
        raise ValueError("mine_patterns needs at least one pair")
    counts: dict[tuple, int] = {}
    for hyp, ref in pairs:
        for kind, ref_w, hyp_w in find_patterns(hyp, ref):
            if log is not None and (ref_w, hyp_w) in log:
                continue
            counts[(kind, ref_w, hyp_w)] = counts.get((kind, ref_w, hyp_w), 0) + 1
    patterns = [ConfusionPattern(k, r, h, c) for (k, r, h), c in counts.items()]
    return sorted(patterns, key=ConfusionPattern.sort_key)


def propose_merges(patterns: Sequence[ConfusionPattern], gloss_counts: dict[str, int],
                   threshold: int = 3) -> list[MergeRule]:
    """Unapproved rule candidates from patterns seen at least ``threshold`` times.

    Synonyms map the rarer gloss (by corpus count) onto the more frequent one;
    on a tie the predicted gloss maps onto the gold one. Splits rewrite a gold
    phrase gloss into the predicted words, joins the reverse.
    """
    rules: dict[tuple, MergeRule] = {}
    for p in patterns:
        if p.frequency < threshold:
            continue
        kind = _RULE_KIND[p.kind]
        if kind == "synonym":
            (r,), (h,) = p.ref_window, p.hyp_window
            if gloss_counts.get(r, 0) >= gloss_counts.get(h, 0):
                source, target = (h,), (r,)
            else:
                source, target = (r,), (h,)
        else:
            source, target = p.ref_window, p.hyp_window
        key = (source, target)
        if key in rules:
            rules[key].support += p.frequency
        else:
            rules[key] = MergeRule(source, target, kind, False, p.frequency)
    return sorted(rules.values(), key=lambda r: (-r.support, r.kind, r.source, r.target))


def check_rules(rules: Sequence[MergeRule]) -> None:
    """Reject unapproved, conflicting or cyclic rule sets."""
    unapproved = [r for r in rules if not r.approved]
    if unapproved:
        raise RuleConflictError(f"{len(unapproved)} rule(s) are not approved, e.g. {unapproved[0].to_json()}")
    seen: dict[tuple, tuple] = {}
    for r in rules:
        if r.source in seen and seen[r.source] != r.target:
            raise RuleConflictError(f"conflicting rules for {list(r.source)}: "
                                    f"{list(seen[r.source])} vs {list(r.target)}")
        seen[r.source] = r.target
    sources = {tok for r in rules for tok in r.source}
    targets = {tok for r in rules for tok in r.target}
    both = sorted(sources & targets)
    if both:
        raise RuleConflictError(f"cyclic rule set: {both} appear both as sources and as targets")


def rewrite(glosses: Sequence[str], rules: Sequence[MergeRule], counts: dict[int, int] | None = None) -> list[str]:
    """Left-to-right, longest-match rewriting of one gloss sequence."""
    by_len = sorted(range(len(rules)), key=lambda i: -len(rules[i].source))
    out: list[str] = []
    i = 0
    glosses = list(glosses)
    while i < len(glosses):
        for idx in by_len:
            src = rules[idx].source
            if tuple(glosses[i:i + len(src)]) == src:
                out.extend(rules[idx].target)
                i += len(src)
                if counts is not None:
                    counts[idx] = counts.get(idx, 0) + 1
                break
        else:
            out.append(glosses[i])
            i += 1
    return out


@dataclass
class CleaningReport:
    applications: list[dict] = field(default_factory=list)
    vocab_before: int = 0
    vocab_after: int = 0
    removed: list[str] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    turns_changed: int = 0

    def to_json(self) -> dict:
        return {"applications": self.applications, "vocab_before": self.vocab_before,
                "vocab_after": self.vocab_after, "removed": self.removed, "added": self.added,
                "turns_changed": self.turns_changed}


def apply_rules(manifest: Manifest, rules: Sequence[MergeRule]) -> tuple[Manifest, CleaningReport]:
    """Rewrite every gloss sequence with approved ``rules``; rebuild the vocabulary."""
    rules = list(rules)
    check_rules(rules)
    counts: dict[int, int] = {}
    turns, changed = [], 0
    for t in manifest.turns:
        new = tuple(rewrite(t.glosses, rules, counts))
        if new != t.glosses:
            changed += 1
        turns.append(DialogueTurn(t.dialogue_id, t.turn_index, t.signer_id, t.text, new, t.keypoint_path))
    vocab = build_vocabulary(turns) if rules else manifest.vocabulary
    before = set(manifest.vocabulary.tokens[1:])
    after = set(vocab.tokens[1:])
    report = CleaningReport(
        applications=[{**r.to_json(), "count": counts.get(i, 0)} for i, r in enumerate(rules)],
        vocab_before=manifest.vocabulary.size, vocab_after=vocab.size,
        removed=sorted(before - after), added=sorted(after - before), turns_changed=changed)
    return Manifest(turns, vocab, manifest.root), report
