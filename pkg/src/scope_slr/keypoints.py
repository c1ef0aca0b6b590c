"""Keypoint preprocessing: eyelid-span scaling, group centralisation, z-scoring.

All indices refer to the 133-point COCO-WholeBody layout (0-based).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateEyelidError, PreprocessError
from .dataset_io import NUM_POINTS

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class GroupSpec:
    selected_indices: tuple[int, ...]
    groups: dict[str, tuple[int, ...]]
    roots: dict[str, int]
    eyelid: tuple[int, int] = (63, 64)

    def __post_init__(self):
        sel = list(self.selected_indices)
        if len(set(sel)) != len(sel):
            raise ValueError("selected_indices contains duplicates")
        if any(not 0 <= i < NUM_POINTS for i in sel + list(self.eyelid)):
            raise ValueError(f"indices must lie in [0, {NUM_POINTS})")
        covered: list[int] = []
        for name, idx in self.groups.items():
            if name not in self.roots:
                raise ValueError(f"group {name!r} has no root")
            if self.roots[name] not in idx:
                raise ValueError(f"root {self.roots[name]} of group {name!r} is not a member of the group")
            covered.extend(idx)
        if len(covered) != len(set(covered)):
            raise ValueError("groups overlap")
        if sorted(covered) != sorted(sel):
            raise ValueError("groups must partition the selected indices")
        if set(self.roots) - set(self.groups):
            raise ValueError("roots defined for unknown groups")

    @property
    def num_points(self) -> int:
        return len(self.selected_indices)

    def root_of_selected(self) -> np.ndarray:
        """For each selected point (in output order), the raw index of its group root."""
        lookup = {i: self.roots[name] for name, idx in self.groups.items() for i in idx}
        return np.array([lookup[i] for i in self.selected_indices], dtype=np.int64)

    def root_positions(self) -> list[int]:
        """Output-row positions of the group roots."""
        pos = {raw: k for k, raw in enumerate(self.selected_indices)}
        return [pos[r] for r in self.roots.values()]

    def to_json(self) -> dict:
        return {"selected_indices": list(self.selected_indices),
                "groups": {k: list(v) for k, v in self.groups.items()},
                "roots": dict(self.roots), "eyelid": list(self.eyelid)}

    @classmethod
    def from_json(cls, doc: dict) -> GroupSpec:
        return cls(tuple(doc["selected_indices"]),
                   {k: tuple(v) for k, v in doc["groups"].items()},
                   {k: int(v) for k, v in doc["roots"].items()},
                   tuple(doc.get("eyelid", (63, 64))))

    @classmethod
    def load(cls, path: str | Path) -> GroupSpec:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> GroupSpec:
        text = resources.files("scope_slr").joinpath("data/group_spec.json").read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))


@dataclass
class DatasetStats:
    mean: np.ndarray  # (P, 2)
    std: np.ndarray   # (P, 2)
    frame_count: int

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "frame_count": self.frame_count}

    @classmethod
    def from_json(cls, doc: dict) -> DatasetStats:
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64),
                   int(doc["frame_count"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> DatasetStats:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def identity(cls, num_points: int = 77) -> DatasetStats:
        return cls(np.zeros((num_points, 2)), np.ones((num_points, 2)), 0)


@dataclass
class PreprocessConfig:
    eyelid_policy: str = "drop-frame"        # or "abort-sequence"
    eyelid_metric: str = "x"                 # or "euclidean"
    eyelid_eps: float = 1e-6
    min_confidence: float = 0.3
    spec: GroupSpec = field(default_factory=GroupSpec.default)


def eyelid_span(frame: np.ndarray, eyelid: Sequence[int] = (63, 64), metric: str = "x") -> float:
    a, b = frame[eyelid[0], :2], frame[eyelid[1], :2]
    if metric == "x":
        return abs(a[0] - b[0])
    if metric == "euclidean":
        return float(math.hypot(a[0] - b[0], a[1] - b[1]))
    raise ValueError(f"unknown eyelid metric {metric!r}")


def iris_normalize(frame: np.ndarray, eyelid: Sequence[int] = (63, 64), eps: float = 1e-6,
                   metric: str = "x") -> np.ndarray:
    """Divide every coordinate of a (133, 2) frame by the lower-eyelid span."""
    frame = np.asarray(frame, dtype=np.float64)
    span = eyelid_span(frame, eyelid, metric)
    if not span > eps:
        raise DegenerateEyelidError(f"eyelid span {span:g} is not above {eps:g}")
    return frame[:, :2] / span


def centralize(frames: np.ndarray, spec: GroupSpec) -> np.ndarray:
    """Select the group layout's points and express each relative to its group root.

    frames: (T, 133, 2) -> (T, P, 2).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 2:
        raise ValueError(f"centralize expects (T, N, 2), got {frames.shape}")
    sel = np.asarray(spec.selected_indices)
    return frames[:, sel, :] - frames[:, spec.root_of_selected(), :]


def fit_stats(train_sequences: Sequence[np.ndarray]) -> DatasetStats:
    """Per-joint, per-axis mean and population std over every training frame.

    Sums are exact (``math.fsum``), so the result does not depend on the
    order sequences are given in.
    """
    seqs = [np.asarray(s, dtype=np.float64) for s in train_sequences]
    seqs = [s for s in seqs if s.shape[0] > 0]
    if not seqs:
        raise ValueError("fit_stats needs at least one frame")
    stacked = np.concatenate(seqs, axis=0)  # (N, P, 2)
    n = stacked.shape[0]
    cols = stacked.reshape(n, -1).T
    mean = np.array([math.fsum(c) / n for c in cols])
    var = np.array([math.fsum((c - m) ** 2) / n for c, m in zip(cols, mean)])
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    shape = stacked.shape[1:]
    return DatasetStats(mean.reshape(shape), std.reshape(shape), n)


def standardize(seq: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return (np.asarray(seq, dtype=np.float64) - stats.mean) / stats.std


def scale_frames(raw: np.ndarray, config: PreprocessConfig) -> tuple[np.ndarray, list[int]]:
    """Confidence filter and per-frame eyelid scaling.

    Returns the scaled (T', 133, 2) frames and the kept raw frame indices.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[1:] != (NUM_POINTS, 3):
        raise PreprocessError("input", f"expected (T, {NUM_POINTS}, 3), got {raw.shape}")
    sel = np.asarray(config.spec.selected_indices)
    kept, out = [], []
    for t, frame in enumerate(raw):
        if frame[sel, 2].mean() < config.min_confidence:
            continue
        try:
            out.append(iris_normalize(frame, config.spec.eyelid, config.eyelid_eps, config.eyelid_metric))
        except DegenerateEyelidError as exc:
            if config.eyelid_policy == "abort-sequence":
                raise PreprocessError("iris_normalize", f"frame {t}: {exc}") from exc
            if config.eyelid_policy != "drop-frame":
                raise PreprocessError("iris_normalize", f"unknown eyelid policy {config.eyelid_policy!r}")
            continue
        kept.append(t)
    if not out:
        raise PreprocessError("iris_normalize", "no usable frames remain after filtering")
    return np.stack(out), kept


def centralized_sequence(raw: np.ndarray, config: PreprocessConfig | None = None) -> np.ndarray:
    """Everything up to (not including) standardisation: (T', P, 2)."""
    config = config or PreprocessConfig()
    scaled, _ = scale_frames(raw, config)
    try:
        return centralize(scaled, config.spec)
    except ValueError as exc:
        raise PreprocessError("centralize", str(exc)) from exc


def preprocess(raw: np.ndarray, stats: DatasetStats, config: PreprocessConfig | None = None) -> np.ndarray:
    """Full pipeline: (T, 133, 3) raw poses -> (T', P, 2) model input."""
    seq = centralized_sequence(raw, config)
    if stats.mean.shape != seq.shape[1:]:
        raise PreprocessError("standardize", f"stats shape {stats.mean.shape} does not match {seq.shape[1:]}")
    out = standardize(seq, stats)
    if not np.all(np.isfinite(out)):
        raise PreprocessError("standardize", "non-finite values after standardisation")
    return out
