"""Exact CTC machinery in log space.

Lattices are ``(T, V + 1)`` arrays of log-probabilities with column 0 the
blank. Hypothesis scores are always exact label-sequence probabilities from
the forward recursion, never raw beam scores.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CTCInfeasibleError, ZeroProbabilityError
from .metrics import edit_distance
from .nn import tensor as tt
from .nn.tensor import Tensor

BLANK = 0
NEG_INF = -np.inf


def min_frames(labels) -> int:
    """Fewest frames that can emit ``labels``: one per label plus a blank
    between each adjacent repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check(lattice: np.ndarray, labels) -> tuple[np.ndarray, list[int]]:
    lattice = np.asarray(lattice, dtype=np.float64)
    if lattice.ndim != 2:
        raise ValueError(f"lattice must be 2-D (T, V+1), got shape {lattice.shape}")
    labels = [int(x) for x in labels]
    n_sym = lattice.shape[1]
    for x in labels:
        if x == BLANK or not 0 < x < n_sym:
            raise ValueError(f"label id {x} is blank or outside the lattice vocabulary")
    need = min_frames(labels)
    if lattice.shape[0] < need:
        raise CTCInfeasibleError(
            f"label sequence of length {len(labels)} needs {need} frames, lattice has {lattice.shape[0]}")
    return lattice, labels


def _lse(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    total = sum(np.exp(x - safe) for x in xs)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(total), m)


def _forward_backward(lattice: np.ndarray, labels: list[int]):
    T = lattice.shape[0]
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    # s-2 transition allowed into non-blank states whose label differs from s-2
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lattice[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S], NEG_INF)
        alpha[t] = emit[t] + _lse(stay, step, jump)

    # beta[t, s]: log prob of finishing from state s at time t, excluding emit[t, s]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    if S > 2:
        skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.where(skip_next, np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S], NEG_INF)
        beta[t] = _lse(stay, step, jump)

    if S > 1:
        logp = float(_lse(alpha[T - 1, S - 1:S], alpha[T - 1, S - 2:S - 1])[0])
    else:
        logp = float(alpha[T - 1, 0])
    return ext, alpha, beta, logp


def label_sequence_probability(lattice, labels, with_grad: bool = False):
    """log p(labels | lattice), summed over every CTC alignment.

    With ``with_grad`` also returns d logp / d lattice (the state occupation
    probabilities summed per symbol), treating lattice entries as free.
    """
    lattice, labels = _check(lattice, labels)
    ext, alpha, beta, logp = _forward_backward(lattice, labels)
    if not with_grad:
        return logp
    if not np.isfinite(logp):
        raise ZeroProbabilityError(f"labels {labels} have zero probability under the lattice")
    occ = np.exp(alpha + beta - logp)  # (T, S)
    grad = np.zeros_like(lattice)
    for s, sym in enumerate(ext):
        grad[:, sym] += occ[:, s]
    return logp, grad


def ctc_loss(lattice, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the lattice."""
    logp, grad = label_sequence_probability(lattice, labels, with_grad=True)
    return -logp, -grad


def ctc_log_prob(lattice: Tensor, labels) -> Tensor:
    """Differentiable log p(labels | lattice) node."""
    logp, grad = label_sequence_probability(lattice.data, labels, with_grad=True)
    return tt.function("ctc_log_prob", np.asarray(logp), (lattice,), (grad,))


def ctc_loss_tensor(lattice: Tensor, labels) -> Tensor:
    return ctc_log_prob(lattice, labels) * -1.0


def greedy_decode(lattice) -> list[int]:
    """Best path: per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(lattice), axis=1)
    out: list[int] = []
    prev = None
    for sym in best:
        sym = int(sym)
        if sym != prev and sym != BLANK:
            out.append(sym)
        prev = sym
    return out


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    log_prob: float
    posterior: float = 0.0


@dataclass
class NBestList:
    hypotheses: list[Hypothesis]
    beam_width: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __getitem__(self, i: int) -> Hypothesis:
        return self.hypotheses[i]

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def to_json(self, vocabulary: list[str] | None = None) -> list[dict]:
        out = []
        for h in self.hypotheses:
            glosses = [vocabulary[i] for i in h.labels] if vocabulary else list(h.labels)
            out.append({"glosses": glosses, "log_prob": h.log_prob, "posterior": h.posterior})
        return out

    @classmethod
    def from_json(cls, items: list[dict], vocabulary: list[str] | None = None,
                  beam_width: int = 0) -> NBestList:
        index = {g: i for i, g in enumerate(vocabulary)} if vocabulary else None
        hyps = []
        for item in items:
            labels = tuple(index[g] for g in item["glosses"]) if index else tuple(item["glosses"])
            hyps.append(Hypothesis(labels, float(item["log_prob"]), float(item["posterior"])))
        return cls(hyps, beam_width)


def rank_key(labels: tuple[int, ...], log_prob: float):
    """Sort key: higher probability first, then shorter, then lexicographic ids."""
    return (-log_prob, len(labels), labels)


def _lae(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


def renormalize(log_probs) -> np.ndarray:
    lp = np.asarray(log_probs, dtype=np.float64)
    m = lp.max()
    w = np.exp(lp - m)
    return w / w.sum()


def prefix_beam_search(lattice, beam_width: int = 10, k: int = 3) -> NBestList:
    """CTC prefix beam search returning the top-``k`` label sequences.

    Tracks blank-ending and non-blank-ending mass per prefix. Surviving
    prefixes are rescored exactly before ranking.
    """
    if not beam_width >= k >= 1:
        raise ValueError(f"need beam_width >= k >= 1, got beam_width={beam_width}, k={k}")
    lattice = np.asarray(lattice, dtype=np.float64)
    T, n_sym = lattice.shape
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    lae = _lae
    rows = lattice.tolist()
    for t in range(T):
        row = rows[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = lae(pb, pnb)
            cell = nxt[prefix]
            cell[0] = lae(cell[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                cell[1] = lae(cell[1], pnb + row[last])
            for c in range(1, n_sym):
                ext = prefix + (c,)
                mass = pb + row[c] if c == last else total + row[c]
                ecell = nxt[ext]
                ecell[1] = lae(ecell[1], mass)
        scored = [(p, lae(b, nb)) for p, (b, nb) in nxt.items()]
        scored = [item for item in scored if item[1] > NEG_INF] or scored[:1]
        scored.sort(key=lambda item: rank_key(item[0], item[1]))
        beams = {p: tuple(nxt[p]) for p, _ in scored[:beam_width]}

    rescored = [(p, label_sequence_probability(lattice, p)) for p in beams if min_frames(p) <= T]
    rescored.sort(key=lambda item: rank_key(item[0], item[1]))
    top = rescored[:k]
    post = renormalize([lp for _, lp in top])
    hyps = [Hypothesis(p, lp, float(q)) for (p, lp), q in zip(top, post)]
    return NBestList(hyps, beam_width)


def mwer_loss(lattice, hypotheses, reference, baseline: str = "none") -> tuple[float, np.ndarray]:
    """Expected word errors over the renormalised N-best and its lattice gradient.

    ``hypotheses`` is an :class:`NBestList` or a sequence of label sequences;
    their probabilities are recomputed exactly from ``lattice``. The error
    count per hypothesis is a constant. ``baseline="mean"`` subtracts the
    N-best mean error from every count.
    """
    if isinstance(hypotheses, NBestList):
        hypotheses = [h.labels for h in hypotheses.hypotheses]
    if not hypotheses:
        raise ValueError("mwer_loss needs at least one hypothesis")
    lattice = np.asarray(lattice, dtype=np.float64)
    reference = list(reference)
    risks = np.array([float(edit_distance(list(h), reference)) for h in hypotheses])
    if baseline == "mean":
        risks = risks - risks.mean()
    elif baseline != "none":
        raise ValueError(f"unknown MWER baseline {baseline!r}")
    logps, grads = [], []
    for h in hypotheses:
        lp, g = label_sequence_probability(lattice, h, with_grad=True)
        logps.append(lp)
        grads.append(g)
    post = renormalize(logps)
    loss = float(np.dot(post, risks))
    grad = np.zeros_like(lattice)
    for n, g in enumerate(grads):
        # d loss / d logp_n = post_n * sum_m post_m (R_n - R_m); exactly zero for equal risks
        coeff = post[n] * float(np.dot(post, risks[n] - risks))
        if coeff != 0.0:
            grad += coeff * g
    return loss, grad


def mwer_loss_tensor(lattice: Tensor, hypotheses, reference, baseline: str = "none") -> Tensor:
    loss, grad = mwer_loss(lattice.data, hypotheses, reference, baseline)
    return tt.function("mwer_loss", np.asarray(loss), (lattice,), (grad,))
