"""WER with C/S/I/D alignment strings, corpus BLEU-1..4 and ROUGE-L."""

from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

# Preference among equal-cost edits when walking the alignment.
_OP_ORDER = ("C", "S", "D", "I")

_CJK = re.compile(r"[\u3040-\u30ff\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff\uff00-\uffef\u3000-\u303f]")


@dataclass(frozen=True)
class AlignmentReport:
    correct: int
    substitutions: int
    deletions: int
    insertions: int
    ops: str  # hyphen-joined, e.g. "C-S-I-C"

    @property
    def ref_length(self) -> int:
        return self.correct + self.substitutions + self.deletions

    @property
    def hyp_length(self) -> int:
        return self.correct + self.substitutions + self.insertions

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_length

    @property
    def op_list(self) -> list[str]:
        return self.ops.split("-") if self.ops else []

    def to_dict(self) -> dict:
        return {"wer": self.wer, "ops": self.ops, "C": self.correct, "S": self.substitutions,
                "D": self.deletions, "I": self.insertions}


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Unit-cost Levenshtein distance."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def wer_align(hyp: Sequence, ref: Sequence) -> AlignmentReport:
    """Minimum-edit alignment of ``hyp`` against ``ref``.

    The alignment is read from the start of both sequences, taking the first
    of C > S > D > I that stays on an optimal path, so edits are placed as
    early as possible and the op string is deterministic.
    """
    hyp, ref = list(hyp), list(ref)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    n, m = len(ref), len(hyp)
    # suffix[i][j] = distance between ref[i:] and hyp[j:]
    suffix = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n:
                suffix[i][j] = m - j
            elif j == m:
                suffix[i][j] = n - i
            else:
                suffix[i][j] = min(suffix[i + 1][j + 1] + (ref[i] != hyp[j]),
                                   suffix[i + 1][j] + 1,
                                   suffix[i][j + 1] + 1)
    ops: list[str] = []
    i = j = 0
    while i < n or j < m:
        here = suffix[i][j]
        for op in _OP_ORDER:
            if op == "C" and i < n and j < m and ref[i] == hyp[j] and suffix[i + 1][j + 1] == here:
                i, j = i + 1, j + 1
            elif op == "S" and i < n and j < m and ref[i] != hyp[j] and suffix[i + 1][j + 1] + 1 == here:
                i, j = i + 1, j + 1
            elif op == "D" and i < n and suffix[i + 1][j] + 1 == here:
                i += 1
            elif op == "I" and j < m and suffix[i][j + 1] + 1 == here:
                j += 1
            else:
                continue
            ops.append(op)
            break
    counts = Counter(ops)
    return AlignmentReport(counts["C"], counts["S"], counts["D"], counts["I"], "-".join(ops))


def corpus_wer(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    """Total errors over total reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not refs:
        raise ValueError("empty corpus")
    errors = sum(edit_distance(list(h), list(r)) for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("WER is undefined for empty references")
    return errors / total


def tokenize(text: str, mode: str = "auto") -> list[str]:
    """``char``: every non-space character; ``space``: whitespace split;
    ``auto``: CJK characters individually, other runs by whitespace."""
    text = unicodedata.normalize("NFC", text).strip()
    if mode == "space":
        return text.split()
    if mode == "char":
        return [c for c in text if not c.isspace()]
    if mode != "auto":
        raise ValueError(f"unknown tokenization mode {mode!r}")
    out: list[str] = []
    for chunk in text.split():
        buf = ""
        for c in chunk:
            if _CJK.match(c):
                if buf:
                    out.append(buf)
                    buf = ""
                out.append(c)
            else:
                buf += c
        if buf:
            out.append(buf)
    return out


def _as_tokens(items, mode: str) -> list[list[str]]:
    return [tokenize(x, mode) if isinstance(x, str) else list(x) for x in items]


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps, refs, max_n: int = 4, smooth: str = "none", tokenization: str = "auto") -> dict[str, float]:
    """Corpus BLEU-1..max_n on a 0-100 scale, one reference per hypothesis.

    Items may be strings (tokenized per ``tokenization``) or token lists.
    ``smooth="add-one"`` adds one to numerator and denominator for n >= 2.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        raise ValueError("empty corpus")
    if smooth not in ("none", "add-one"):
        raise ValueError(f"unknown smoothing {smooth!r}")
    H, R = _as_tokens(hyps, tokenization), _as_tokens(refs, tokenization)
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    for h, r in zip(H, R):
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n] += max(len(h) - n + 1, 0)
    c = sum(len(h) for h in H)
    r = sum(len(x) for x in R)
    bp = 1.0 if c > r else (math.exp(1.0 - r / c) if c > 0 else 0.0)
    scores: dict[str, float] = {}
    log_sum = 0.0
    zero = False
    for n in range(1, max_n + 1):
        m, d = matches[n], totals[n]
        if smooth == "add-one" and n > 1:
            m, d = m + 1, d + 1
        if m == 0 or d == 0:
            zero = True
        else:
            log_sum += math.log(m / d)
        scores[f"bleu{n}"] = 0.0 if zero else 100.0 * bp * math.exp(log_sum / n)
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyps, refs, beta: float = 1.2, tokenization: str = "auto") -> float:
    """Mean sentence-level ROUGE-L F-score on a 0-100 scale."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        raise ValueError("empty corpus")
    H, R = _as_tokens(hyps, tokenization), _as_tokens(refs, tokenization)
    b2 = beta * beta
    total = 0.0
    for h, r in zip(H, R):
        lcs = lcs_length(h, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(h), lcs / len(r)
        total += (1 + b2) * p * rec / (rec + b2 * p)
    return 100.0 * total / len(H)
