"""Corpus model, keypoint file format and the leakage-free splitter.

Manifest JSON::

    {"turns": [{"dialogue_id", "turn_index", "signer_id", "text",
                "glosses": [...], "keypoints": "relative/path.skpt"}, ...],
     "vocabulary": ["<blank>", ...]}          # optional

Keypoint files are little-endian: ``b"SKPT"``, u32 version, u32 T, then
T * 133 * 3 float32 values (frame, point, (x, y, confidence)).
"""

from __future__ import annotations

import json
import struct
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import KeypointFormatError, ManifestError, SplitInfeasibleError

BLANK_TOKEN = "<blank>"
NUM_POINTS = 133
KEYPOINT_MAGIC = b"SKPT"
KEYPOINT_VERSION = 1
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class DialogueTurn:
    dialogue_id: str
    turn_index: int
    signer_id: str
    text: str
    glosses: tuple[str, ...]
    keypoint_path: str

    @property
    def key(self) -> tuple[str, int]:
        return (self.dialogue_id, self.turn_index)

    @property
    def uid(self) -> str:
        return f"{self.dialogue_id}#{self.turn_index}"

    def to_json(self) -> dict:
        return {"dialogue_id": self.dialogue_id, "turn_index": self.turn_index,
                "signer_id": self.signer_id, "text": self.text,
                "glosses": list(self.glosses), "keypoints": self.keypoint_path}


class Vocabulary:
    """Ordered gloss inventory; id 0 is always the CTC blank."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = [BLANK_TOKEN]
        self.index: dict[str, int] = {BLANK_TOKEN: 0}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def size(self) -> int:
        """Number of glosses, excluding the blank."""
        return len(self.tokens) - 1

    def encode(self, glosses: Sequence[str]) -> list[int]:
        try:
            return [self.index[g] for g in glosses]
        except KeyError as exc:
            raise ManifestError(f"gloss {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> Vocabulary:
        if not tokens or tokens[0] != BLANK_TOKEN:
            raise ManifestError(f"vocabulary must start with the reserved {BLANK_TOKEN!r} entry")
        if len(set(tokens)) != len(tokens):
            raise ManifestError("vocabulary contains duplicate entries")
        return cls(tokens[1:])


@dataclass
class Manifest:
    turns: list[DialogueTurn]
    vocabulary: Vocabulary
    root: Path = field(default_factory=Path)

    def dialogues(self) -> dict[str, list[DialogueTurn]]:
        out: dict[str, list[DialogueTurn]] = {}
        for turn in self.turns:
            out.setdefault(turn.dialogue_id, []).append(turn)
        for turns in out.values():
            turns.sort(key=lambda t: t.turn_index)
        return out

    def previous_texts(self, turn: DialogueTurn) -> list[str]:
        """Texts of the earlier turns of the same dialogue, oldest first."""
        return [t.text for t in self.dialogues()[turn.dialogue_id] if t.turn_index < turn.turn_index]

    def keypoint_file(self, turn: DialogueTurn) -> Path:
        return self.root / turn.keypoint_path

    def gloss_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for turn in self.turns:
            for g in turn.glosses:
                counts[g] = counts.get(g, 0) + 1
        return counts

    def to_json(self) -> dict:
        return {"turns": [t.to_json() for t in self.turns], "vocabulary": list(self.vocabulary.tokens)}


def normalize_sentence(text: str) -> str:
    """Sentence identity used for leakage checks: NFC plus outer whitespace trim."""
    return unicodedata.normalize("NFC", text).strip()


def build_vocabulary(turns: Iterable[DialogueTurn]) -> Vocabulary:
    vocab = Vocabulary()
    for turn in turns:
        for g in turn.glosses:
            vocab.add(g)
    return vocab


_TURN_KEYS = ("dialogue_id", "turn_index", "signer_id", "text", "glosses", "keypoints")


def _parse_turn(i: int, rec) -> DialogueTurn:
    where = f"turns[{i}]"
    if not isinstance(rec, dict):
        raise ManifestError(f"{where}: expected an object")
    missing = [k for k in _TURN_KEYS if k not in rec]
    if missing:
        raise ManifestError(f"{where}: missing keys {missing}")
    idx = rec["turn_index"]
    if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
        raise ManifestError(f"{where}: turn_index must be a non-negative integer")
    glosses = rec["glosses"]
    if not isinstance(glosses, list) or not all(isinstance(g, str) and g for g in glosses):
        raise ManifestError(f"{where}: glosses must be a list of non-empty strings")
    if BLANK_TOKEN in glosses:
        raise ManifestError(f"{where}: the reserved {BLANK_TOKEN!r} symbol cannot appear in annotations")
    for k in ("dialogue_id", "signer_id", "text", "keypoints"):
        if not isinstance(rec[k], str):
            raise ManifestError(f"{where}: {k} must be a string")
    return DialogueTurn(rec["dialogue_id"], idx, rec["signer_id"], rec["text"], tuple(glosses), rec["keypoints"])


def validate_manifest(manifest: Manifest, check_files: bool = True, require_glosses: bool = True) -> None:
    seen: dict[tuple[str, int], int] = {}
    dupes = []
    for i, turn in enumerate(manifest.turns):
        if turn.key in seen:
            dupes.append(turn.key)
        seen[turn.key] = i
    if dupes:
        names = ", ".join(f"({d!r}, {t})" for d, t in dupes)
        raise ManifestError(f"duplicate (dialogue_id, turn_index) pairs: {names}")
    gaps = []
    for did, turns in manifest.dialogues().items():
        if [t.turn_index for t in turns] != list(range(len(turns))):
            gaps.append(did)
    if gaps:
        raise ManifestError(f"turn indices are not contiguous from 0 in dialogues: {gaps}")
    if require_glosses:
        empty = [t.uid for t in manifest.turns if not t.glosses]
        if empty:
            raise ManifestError(f"turns without glosses: {empty}")
    unknown = sorted({g for t in manifest.turns for g in t.glosses if g not in manifest.vocabulary})
    if unknown:
        raise ManifestError(f"glosses missing from the vocabulary: {unknown}")
    if check_files:
        bad = []
        for turn in manifest.turns:
            path = manifest.keypoint_file(turn)
            if not path.is_file():
                bad.append(f"{turn.uid}: missing keypoint file {path}")
                continue
            try:
                read_keypoint_header(path)
            except KeypointFormatError as exc:
                bad.append(f"{turn.uid}: {exc}")
        if bad:
            raise ManifestError("keypoint problems:\n  " + "\n  ".join(bad))


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("turns"), list):
        raise ManifestError(f"{path}: top level must be an object with a 'turns' array")
    turns = [_parse_turn(i, rec) for i, rec in enumerate(doc["turns"])]
    if doc.get("vocabulary") is not None:
        vocab = Vocabulary.from_list(doc["vocabulary"])
    else:
        vocab = build_vocabulary(turns)
    manifest = Manifest(turns, vocab, path.parent)
    validate_manifest(manifest, check_files=check_files)
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# keypoint files

def write_keypoints(path: str | Path, poses: np.ndarray) -> None:
    poses = np.asarray(poses)
    if poses.ndim != 3 or poses.shape[1:] != (NUM_POINTS, 3) or poses.shape[0] < 1:
        raise KeypointFormatError(f"keypoints must have shape (T>=1, {NUM_POINTS}, 3), got {poses.shape}")
    header = KEYPOINT_MAGIC + struct.pack("<II", KEYPOINT_VERSION, poses.shape[0])
    Path(path).write_bytes(header + np.ascontiguousarray(poses, dtype="<f4").tobytes())


def read_keypoint_header(path: str | Path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != KEYPOINT_MAGIC:
        raise KeypointFormatError(f"{path}: not a keypoint file (bad magic or truncated header)")
    version, T = struct.unpack("<II", head[4:])
    if version != KEYPOINT_VERSION:
        raise KeypointFormatError(f"{path}: unsupported keypoint version {version}")
    return T


def load_keypoints(path: str | Path) -> np.ndarray:
    """Raw pose tensor of shape (T, 133, 3) as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != KEYPOINT_MAGIC:
        raise KeypointFormatError(f"{path}: not a keypoint file (bad magic or truncated header)")
    version, T = struct.unpack("<II", raw[4:12])
    if version != KEYPOINT_VERSION:
        raise KeypointFormatError(f"{path}: unsupported keypoint version {version}")
    if T < 1:
        raise KeypointFormatError(f"{path}: zero frames")
    expected = T * NUM_POINTS * 3 * 4
    if len(raw) - 12 != expected:
        raise KeypointFormatError(
            f"{path}: shape mismatch, header says {T} frames ({expected} bytes) but payload has {len(raw) - 12} bytes")
    poses = np.frombuffer(raw, dtype="<f4", offset=12).reshape(T, NUM_POINTS, 3).astype(np.float64)
    if not np.all(np.isfinite(poses)):
        raise KeypointFormatError(f"{path}: non-finite values in keypoints")
    conf = poses[:, :, 2]
    if np.any(conf < 0) or np.any(conf > 1):
        raise KeypointFormatError(f"{path}: confidence values outside [0, 1]")
    return poses


# splitting

@dataclass
class SplitAssignment:
    dialogues: dict[str, str]
    seed: int
    ratios: tuple[float, float, float]

    def split_of(self, turn: DialogueTurn) -> str:
        return self.dialogues[turn.dialogue_id]

    def turns(self, manifest: Manifest, split: str) -> list[DialogueTurn]:
        return [t for t in manifest.turns if self.dialogues.get(t.dialogue_id) == split]

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for v in self.dialogues.values() if v == s) for s in SPLITS}

    def to_json(self) -> dict:
        return {"dialogues": dict(sorted(self.dialogues.items())), "seed": self.seed,
                "ratios": list(self.ratios)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> SplitAssignment:
        mapping = doc.get("dialogues", doc)
        mapping = {k: v for k, v in mapping.items() if k not in ("seed", "ratios")}
        bad = {k: v for k, v in mapping.items() if v not in SPLITS}
        if bad:
            raise ManifestError(f"split file has unknown split names: {bad}")
        return cls(mapping, int(doc.get("seed", 0)), tuple(doc.get("ratios", (0.8, 0.05, 0.15))))


def load_split(path: str | Path) -> SplitAssignment:
    try:
        return SplitAssignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read split file {path}: {exc}") from exc


def _components(manifest: Manifest) -> list[list[str]]:
    """Groups of dialogues linked by any shared sentence text."""
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict[str, str] = {}
    for turn in manifest.turns:
        parent.setdefault(turn.dialogue_id, turn.dialogue_id)
        key = normalize_sentence(turn.text)
        if key in owner:
            a, b = find(owner[key]), find(turn.dialogue_id)
            if a != b:
                parent[max(a, b)] = min(a, b)
        else:
            owner[key] = turn.dialogue_id
    groups: dict[str, list[str]] = {}
    for did in parent:
        groups.setdefault(find(did), []).append(did)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def _targets(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    base = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[: n - sum(base)]:
        base[i] += 1
    return base


def split_dataset(manifest: Manifest, ratios: Sequence[float] = (0.8, 0.05, 0.15), seed: int = 0) -> SplitAssignment:
    """Assign whole dialogues to train/dev/test.

    Dialogues sharing any sentence text are assigned together, so no sentence
    crosses splits and no dev/test sentence can occur inside a training
    dialogue. Realised dialogue counts must land within one dialogue of the
    targets; otherwise :class:`SplitInfeasibleError` is raised.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    comps = _components(manifest)
    n = sum(len(c) for c in comps)
    targets = _targets(n, ratios)
    rng = np.random.default_rng(seed)
    order = [comps[i] for i in rng.permutation(len(comps))]
    order.sort(key=len, reverse=True)  # stable: keeps the shuffled order within equal sizes
    filled = [0, 0, 0]
    assignment: dict[str, str] = {}
    for comp in order:
        deficits = [targets[i] - filled[i] for i in range(3)]
        best = max(range(3), key=lambda i: (deficits[i], -i))
        filled[best] += len(comp)
        for did in comp:
            assignment[did] = SPLITS[best]
    off = [SPLITS[i] for i in range(3) if abs(filled[i] - targets[i]) > 1]
    if off:
        biggest = max(len(c) for c in comps)
        raise SplitInfeasibleError(
            f"cannot meet split targets {dict(zip(SPLITS, targets))} within one dialogue "
            f"(realised {dict(zip(SPLITS, filled))}); largest group of text-linked dialogues has {biggest} dialogues")
    return SplitAssignment(assignment, seed, ratios)


def leaked_sentences(manifest: Manifest, split: SplitAssignment) -> list[str]:
    """Brute-force audit: dev/test sentences present in any training dialogue,
    plus sentences shared between splits."""
    by_split: dict[str, set[str]] = {s: set() for s in SPLITS}
    for turn in manifest.turns:
        by_split[split.split_of(turn)].add(normalize_sentence(turn.text))
    leaks = set()
    for a in SPLITS:
        for b in SPLITS:
            if a < b:
                leaks |= by_split[a] & by_split[b]
    return sorted(leaks)
