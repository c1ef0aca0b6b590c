"""Synthetic corpora for offline end-to-end runs.

Each gloss owns a motion template: a smooth, non-rigid displacement of the
selected keypoints played over a few frames. Sequences concatenate the
templates of their glosses, then add a random camera scale, a random image
offset and jitter. ``make_context_corpus`` gives two glosses (``P`` and
``Q``) the same template, so only the dialogue context tells them apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import NUM_POINTS, DialogueTurn, Manifest, Vocabulary, save_manifest, write_keypoints
from .keypoints import GroupSpec

EYELID_SPAN_PX = 24.0


@dataclass
class MotionBank:
    """Base pose plus one displacement template per motion name."""
    base: np.ndarray                 # (133, 2) pixels
    templates: dict[str, np.ndarray]  # name -> (frames, 133, 2)

    @classmethod
    def create(cls, names: Sequence[str], rng: np.random.Generator, frames: int = 6,
               amplitude: float = 30.0, spec: GroupSpec | None = None) -> MotionBank:
        spec = spec or GroupSpec.default()
        base = rng.uniform(-150.0, 150.0, (NUM_POINTS, 2))
        base[63] = (-EYELID_SPAN_PX / 2, 0.0)
        base[64] = (EYELID_SPAN_PX / 2, 0.0)
        sel = np.asarray(spec.selected_indices)
        envelope = np.sin(np.pi * (np.arange(frames) + 0.5) / frames)[:, None, None]
        templates = {}
        for name in names:
            disp = np.zeros((NUM_POINTS, 2))
            disp[sel] = rng.normal(0.0, amplitude, (len(sel), 2))
            drift = np.zeros((NUM_POINTS, 2))
            drift[sel] = rng.normal(0.0, amplitude / 2, (len(sel), 2))
            phase = np.linspace(-1.0, 1.0, frames)[:, None, None]
            templates[name] = envelope * disp[None] + phase * drift[None]
        return cls(base, templates)

    def render(self, motions: Sequence[str], rng: np.random.Generator, rest: int = 2, gap: int = 1,
               jitter: float = 1.5, confidence: float = 0.9) -> np.ndarray:
        """Raw (T, 133, 3) pose array for a sequence of motion names."""
        still = lambda n: np.zeros((n, NUM_POINTS, 2))
        parts = [still(rest)]
        for i, m in enumerate(motions):
            if i:
                parts.append(still(gap))
            parts.append(self.templates[m])
        parts.append(still(rest))
        disp = np.concatenate(parts, axis=0)
        T = disp.shape[0]
        xy = self.base[None] + disp + rng.normal(0.0, jitter, (T, NUM_POINTS, 2))
        xy[:, 63] = self.base[63]
        xy[:, 64] = self.base[64]
        scale = rng.uniform(0.8, 1.25)
        offset = rng.uniform(300.0, 700.0, 2)
        xy = xy * scale + offset
        conf = np.full((T, NUM_POINTS, 1), confidence)
        return np.concatenate([xy, conf], axis=2)


def _write(root: Path, turns: list[DialogueTurn], poses: dict[str, np.ndarray], vocab: Sequence[str]) -> Manifest:
    root.mkdir(parents=True, exist_ok=True)
    (root / "keypoints").mkdir(exist_ok=True)
    for t in turns:
        write_keypoints(root / t.keypoint_path, poses[t.uid])
    manifest = Manifest(turns, Vocabulary(vocab), root)
    save_manifest(manifest, root / "manifest.json")
    return manifest


OVERFIT_GLOSSES = ("HELLO", "YOU", "NAME", "WHAT", "GOOD", "THANKS")
_WORDS = {"HELLO": "hello", "YOU": "you", "NAME": "name", "WHAT": "what", "GOOD": "good", "THANKS": "thanks"}


def make_overfit_corpus(root: str | Path, seed: int = 0, dialogues: int = 16) -> Manifest:
    """Single-turn dialogues over a 6-gloss vocabulary, 4-5 glosses each, T <= 40.

    Glosses are dealt from reshuffled decks so every gloss occurs about
    equally often; the same gloss never appears twice in a row.
    """
    rng = np.random.default_rng(seed)
    bank = MotionBank.create(OVERFIT_GLOSSES, rng, frames=6)
    deck: list[str] = []
    turns, poses = [], {}
    for n in range(dialogues):
        glosses: list[str] = []
        while len(glosses) < 4 + n % 2:
            pick = next((g for g in deck if not glosses or g != glosses[-1]), None)
            if pick is None:
                deck += [OVERFIT_GLOSSES[i] for i in rng.permutation(len(OVERFIT_GLOSSES))]
                continue
            deck.remove(pick)
            glosses.append(pick)
        did = f"d{n:03d}"
        text = " ".join(_WORDS[g] for g in glosses) + f" {n}"
        turn = DialogueTurn(did, 0, f"s{n % 3}", text, tuple(glosses), f"keypoints/{did}_0.skpt")
        poses[turn.uid] = bank.render(glosses, rng)
        turns.append(turn)
    return _write(Path(root), turns, poses, OVERFIT_GLOSSES)


CONTEXT_GLOSSES = ("HELLO", "SICK", "BUY", "P", "Q")
_TOPICS = {
    "A": ("SICK", "i feel sick and tired", "P", "take this medicine", "P"),
    "B": ("BUY", "i want to buy food", "Q", "pay at the counter", "Q"),
}


def make_context_corpus(root: str | Path, seed: int = 0, pairs: int = 20) -> Manifest:
    """Four-turn dialogues whose last two turns are ambiguous without context.

    Dialogues come in pairs (one per topic) that open with the same greeting,
    so a text-aware split keeps every pair together and both topics appear in
    every split. Turn 1 names the topic (``SICK`` or ``BUY``); turns 2 and 3
    sign a motion shared by ``P`` and ``Q``, labelled ``P`` after ``SICK`` and
    ``Q`` after ``BUY``. Every sentence carries a dialogue tag word so texts
    are unique outside the shared greeting.
    """
    rng = np.random.default_rng(seed)
    bank = MotionBank.create(("HELLO", "SICK", "BUY", "PQ"), rng, frames=6)
    motion = {"HELLO": "HELLO", "SICK": "SICK", "BUY": "BUY", "P": "PQ", "Q": "PQ"}
    turns, poses = [], {}
    for p in range(pairs):
        greeting = f"hello there friend g{p}"
        for topic in ("A", "B"):
            did = f"p{p:03d}{topic}"
            tag = f"t{p}{topic.lower()}"
            gloss1, text1, gloss2, text2, gloss3 = _TOPICS[topic]
            script = [(("HELLO",), greeting), ((gloss1,), f"{text1} {tag}"),
                      ((gloss2,), f"{text2} {tag}"), ((gloss3,), f"thank you {tag}")]
            for idx, (glosses, text) in enumerate(script):
                turn = DialogueTurn(did, idx, f"s{p % 4}", text, glosses, f"keypoints/{did}_{idx}.skpt")
                poses[turn.uid] = bank.render([motion[g] for g in glosses], rng)
                turns.append(turn)
    return _write(Path(root), turns, poses, CONTEXT_GLOSSES)


@dataclass
class CleaningFixture:
    manifest: Manifest
    pairs: list[tuple[list[str], list[str]]]   # (predicted, gold)
    planted: dict                              # expected mining results


def make_cleaning_fixture(root: str | Path | None = None, seed: int = 0) -> CleaningFixture:
    """Gold corpus plus predictions with planted confusions.

    * ``MOM`` is predicted as ``MOTHER`` five times (``C-S-C``); ``MOTHER``
      is far more frequent in the gold corpus, so the synonym rule is
      ``MOM -> MOTHER``.
    * ``CAR`` is predicted as ``AUTO`` four times (``C-S-C``); rule ``AUTO -> CAR``.
    * ``NEWYORK`` is predicted as ``NEW YORK`` once (``C-S-I-C``).
    """
    rng = np.random.default_rng(seed)
    fillers = ["I", "GO", "HOME", "TODAY", "WANT", "EAT"]
    gold: list[tuple[str, ...]] = []
    pairs: list[tuple[list[str], list[str]]] = []

    def filler(k: int) -> list[str]:
        return [fillers[i] for i in rng.integers(0, len(fillers), k)]

    for _ in range(5):
        g = ["I", "MOM", "GO"]
        gold.append(tuple(g))
        pairs.append((["I", "MOTHER", "GO"], g))
    for _ in range(4):
        g = ["MY", "AUTO", "HOME"]  # gold uses the rare spelling
        gold.append(tuple(g))
        pairs.append((["MY", "CAR", "HOME"], g))
    g = ["I", "NEWYORK", "GO"]
    gold.append(tuple(g))
    pairs.append((["I", "NEW", "YORK", "GO"], g))
    for _ in range(12):
        gold.append(("MOTHER", "WANT", "EAT"))
        gold.append(("CAR", "GO", "HOME"))
    for _ in range(6):
        g = filler(3)
        gold.append(tuple(g))
        pairs.append((list(g), g))
    turns = [DialogueTurn(f"c{i:03d}", 0, "s0", f"sentence {i}", gl, f"keypoints/c{i:03d}_0.skpt")
             for i, gl in enumerate(gold)]
    vocab = Vocabulary()
    for t in turns:
        for tok in t.glosses:
            vocab.add(tok)
    manifest = Manifest(turns, vocab, Path(root) if root else Path("."))
    if root is not None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        save_manifest(manifest, root / "manifest.json")
    planted = {
        ("C-S-C", ("MOM",), ("MOTHER",)): 5,
        ("C-S-C", ("AUTO",), ("CAR",)): 4,
        ("C-S-I-C", ("NEWYORK",), ("NEW", "YORK")): 1,
        "synonym_rules": [(("MOM",), ("MOTHER",)), (("AUTO",), ("CAR",))],
    }
    return CleaningFixture(manifest, pairs, planted)
