"""Glue between the corpus, preprocessing, embeddings and the trainers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .context import ContextWindow, EmbeddingConfig, EmbeddingProvider, build_context
from .dataset_io import DialogueTurn, Manifest, SplitAssignment, load_keypoints, split_dataset
from .encoders import (AlignSample, GlossSample, ModelConfig, Recognizer, TrainConfig, decode_wer,
                       train_alignment, train_gloss)
from .errors import ConfigError
from .keypoints import DatasetStats, PreprocessConfig, centralized_sequence, fit_stats, standardize

logger = logging.getLogger(__name__)


def centralized(manifest: Manifest, turns: Sequence[DialogueTurn],
                config: PreprocessConfig | None = None) -> dict[str, np.ndarray]:
    config = config or PreprocessConfig()
    return {t.uid: centralized_sequence(load_keypoints(manifest.keypoint_file(t)), config) for t in turns}


def prepare_sequences(manifest: Manifest, split: SplitAssignment, config: PreprocessConfig | None = None
                      ) -> tuple[DatasetStats, dict[str, np.ndarray]]:
    """Fit statistics on the train split and standardise every turn."""
    cents = centralized(manifest, manifest.turns, config)
    train = [cents[t.uid] for t in split.turns(manifest, "train")]
    stats = fit_stats(train)
    return stats, {uid: standardize(c, stats) for uid, c in cents.items()}


def contexts_for(manifest: Manifest, turns: Sequence[DialogueTurn], provider: EmbeddingProvider,
                 slots: int, previous: dict[str, list[str]] | None = None) -> dict[str, ContextWindow]:
    """Context windows from gold preceding texts, or from ``previous`` when given."""
    out = {}
    for t in turns:
        texts = previous[t.uid] if previous is not None else manifest.previous_texts(t)
        out[t.uid] = build_context(texts, provider, slots)
    return out


def align_samples(manifest: Manifest, turns: Sequence[DialogueTurn], seqs: dict[str, np.ndarray],
                  provider: EmbeddingProvider) -> list[AlignSample]:
    return [AlignSample(t.uid, seqs[t.uid], provider.embed(t.text).vector) for t in turns]


def gloss_samples(rec: Recognizer, manifest: Manifest, turns: Sequence[DialogueTurn],
                  seqs: dict[str, np.ndarray], provider: EmbeddingProvider) -> list[GlossSample]:
    windows = contexts_for(manifest, turns, provider, rec.model_cfg.context_slots)
    vocab_index = {g: i for i, g in enumerate(rec.vocabulary)}
    return [GlossSample(t.uid, rec.encode_motion(seqs[t.uid]), windows[t.uid],
                        [vocab_index[g] for g in t.glosses]) for t in turns]


def check_provider(model_cfg: ModelConfig, provider: EmbeddingProvider) -> None:
    if provider.dim != model_cfg.embed_dim:
        raise ConfigError(f"embedding provider dimension {provider.dim} does not match "
                          f"the model's embed_dim {model_cfg.embed_dim}")


@dataclass
class ExperimentResult:
    recognizer: Recognizer
    split: SplitAssignment
    align_history: list[dict] = field(default_factory=list)
    gloss_history: list[dict] = field(default_factory=list)
    train_wer: float = float("nan")
    dev_wer: float = float("nan")


def run_experiment(manifest: Manifest, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   emb_cfg: EmbeddingConfig, ratios=(0.8, 0.05, 0.15), split_seed: int = 0,
                   dev_every_epoch: bool = False) -> ExperimentResult:
    """Split, preprocess, train both stages and score train/dev WER in memory."""
    split = split_dataset(manifest, ratios, split_seed)
    stats, seqs = prepare_sequences(manifest, split)
    provider = EmbeddingProvider(emb_cfg)
    check_provider(model_cfg, provider)
    rec = Recognizer(model_cfg, train_cfg, [], stats.to_json())
    train_turns = split.turns(manifest, "train")
    dev_turns = split.turns(manifest, "dev")
    align_hist = train_alignment(rec, align_samples(manifest, train_turns, seqs, provider))
    rec = rec.with_gloss_head(manifest.vocabulary.size, manifest.vocabulary.tokens, train_cfg)
    train_s = gloss_samples(rec, manifest, train_turns, seqs, provider)
    dev_s = gloss_samples(rec, manifest, dev_turns, seqs, provider)
    gloss_hist = train_gloss(rec, train_s, dev_s if dev_every_epoch else ())
    result = ExperimentResult(rec, split, align_hist, gloss_hist)
    result.train_wer = decode_wer(rec, train_s)[0]
    if dev_s:
        result.dev_wer = decode_wer(rec, dev_s)[0]
    return result
