"""Two-stage recogniser: an alignment encoder trained to match frozen sentence
embeddings, then a context-conditioned gloss encoder trained with CTC and
N-best expected word error.

Wiring::

    seq (T, P, 2) -> flatten -> Linear -> GELU -> Linear -> GELU
                  -> strided temporal conv -> (+ positions) = D (T', hidden)
    D -> transformer(align_layers) = E_t ; Linear(mean_pool(E_t)) = E_out (d_e)
    [E_t ; ctx_proj(context) + slot_emb] -> Linear -> transformer(gloss_layers)
                  -> drop context rows -> Linear -> log_softmax = lattice (T', V+1)
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ctc
from .context import ContextWindow
from .errors import ConfigError, CTCInfeasibleError
from .metrics import corpus_wer
from .nn import tensor as tt
from .nn.layers import Linear, Module, TemporalConv, TransformerEncoder, l2_loss, mean_pool_time
from .nn.optim import AdamW
from .nn.tensor import Tensor, parameter

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    num_points: int = 77
    hidden: int = 1568
    feed_forward: int = 3136
    heads: int = 8
    align_layers: int = 2
    gloss_layers: int = 4
    mlp_layers: int = 2
    conv_width: int = 5
    conv_stride: int = 2
    embed_dim: int = 1536
    context_slots: int = 3
    positional: bool = True
    max_len: int = 512
    vocab_size: int = 0  # glosses excluding blank

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.mlp_layers < 1 or self.conv_stride < 1 or self.conv_width < 1:
            raise ConfigError("mlp_layers, conv_stride and conv_width must be positive")
        if self.context_slots < 0:
            raise ConfigError("context_slots must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        base = dict(hidden=32, feed_forward=64, heads=4, align_layers=2, gloss_layers=2,
                    embed_dim=32, max_len=64)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.01
    align_epochs: int = 20
    gloss_epochs: int = 60
    mwer_weight: float = 1.0
    mwer_start_epoch: int = 40
    mwer_baseline: str = "none"
    beam_width: int = 10
    nbest: int = 3
    use_context: bool = True
    context_ablation: str = "zeros"  # zeros | noise
    dropout: float = 0.0
    label_smoothing: float = 0.0

    def validate(self) -> None:
        if self.dropout != 0.0 or self.label_smoothing != 0.0:
            raise ConfigError("dropout and label smoothing are not implemented; leave them at 0")
        if self.context_ablation not in ("zeros", "noise"):
            raise ConfigError(f"unknown context ablation {self.context_ablation!r}")
        if self.mwer_baseline not in ("none", "mean"):
            raise ConfigError(f"unknown MWER baseline {self.mwer_baseline!r}")
        if not self.beam_width >= self.nbest >= 1:
            raise ConfigError("need beam_width >= nbest >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


class FeatureExtractor(Module):
    """Per-frame MLP followed by a strided temporal convolution."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d_in = cfg.num_points * 2
        self.mlp = [Linear(d_in if i == 0 else cfg.hidden, cfg.hidden, rng) for i in range(cfg.mlp_layers)]
        self.conv = TemporalConv(cfg.hidden, cfg.hidden, cfg.conv_width, cfg.conv_stride, rng)

    def __call__(self, seq) -> Tensor:
        x = np.asarray(seq.data if isinstance(seq, Tensor) else seq, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError(f"expected a (T, P, 2) motion sequence, got shape {x.shape}")
        if x.shape[0] < self.conv.stride:
            raise ValueError(f"sequence of {x.shape[0]} frames is shorter than the conv stride {self.conv.stride}")
        h = seq.reshape(x.shape[0], -1) if isinstance(seq, Tensor) else Tensor(x.reshape(x.shape[0], -1))
        for layer in self.mlp:
            h = tt.gelu(layer(h))
        return self.conv(h)


class AlignmentEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.extractor = FeatureExtractor(cfg, rng)
        self.positions = parameter(rng.normal(0.0, 0.02, (cfg.max_len, cfg.hidden))) if cfg.positional else None
        self.encoder = TransformerEncoder(cfg.align_layers, cfg.hidden, cfg.heads, cfg.feed_forward, rng)
        self.out_proj = Linear(cfg.hidden, cfg.embed_dim, rng)

    def features(self, seq) -> Tensor:
        """D: extracted motion features with positional embeddings added."""
        d = self.extractor(seq)
        if self.positions is not None:
            n = d.shape[0]
            if n > self.positions.shape[0]:
                raise ValueError(f"{n} steps exceed the positional table of {self.positions.shape[0]}")
            d = d + self.positions[:n]
        return d

    def __call__(self, seq) -> tuple[Tensor, Tensor]:
        e_t = self.encoder(self.features(seq))
        return e_t, self.out_proj(mean_pool_time(e_t))


class GlossEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.vocab_size < 1:
            raise ConfigError("gloss encoder needs a vocabulary of at least one gloss")
        self.ctx_proj = Linear(cfg.embed_dim, cfg.hidden, rng)
        self.slot_emb = parameter(rng.normal(0.0, 0.02, (max(cfg.context_slots, 1), cfg.hidden)))
        self.hidden_in = Linear(cfg.hidden, cfg.hidden, rng)
        self.encoder = TransformerEncoder(cfg.gloss_layers, cfg.hidden, cfg.heads, cfg.feed_forward, rng)
        self.classifier = Linear(cfg.hidden, cfg.vocab_size + 1, rng)
        self.slots = cfg.context_slots
        self.embed_dim = cfg.embed_dim

    def __call__(self, e_t, window: ContextWindow) -> Tensor:
        e_t = e_t if isinstance(e_t, Tensor) else Tensor(e_t)
        n = e_t.shape[0]
        if window.slots.shape != (self.slots, self.embed_dim):
            raise ValueError(f"context window has shape {window.slots.shape}, "
                             f"expected ({self.slots}, {self.embed_dim})")
        if self.slots:
            ctx = self.ctx_proj(Tensor(window.slots)) + self.slot_emb[: self.slots]
            h = tt.concat([e_t, ctx], axis=0)
            mask = np.concatenate([np.ones(n, dtype=bool), np.asarray(window.mask, dtype=bool)])
        else:
            h, mask = e_t, np.ones(n, dtype=bool)
        h = self.encoder(self.hidden_in(h), mask)
        return tt.log_softmax(self.classifier(h[:n]), axis=-1)


def embedding_loss(outputs: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Batch mean of Euclidean distances between pooled outputs and text embeddings."""
    if len(outputs) != len(targets) or not outputs:
        raise ValueError("embedding_loss needs equally many (>0) outputs and targets")
    total = None
    for out, tgt in zip(outputs, targets):
        d = l2_loss(out, Tensor(tgt))
        total = d if total is None else total + d
    return total * (1.0 / len(outputs))


# samples and windows

@dataclass
class AlignSample:
    uid: str
    seq: np.ndarray        # (T, P, 2)
    target: np.ndarray     # (d_e,)


@dataclass
class GlossSample:
    uid: str
    e_t: np.ndarray        # (T', hidden), from the frozen alignment encoder
    window: ContextWindow
    labels: list[int]


def effective_window(window: ContextWindow, train: TrainConfig, salt: int = 0) -> ContextWindow:
    """The window the gloss encoder actually sees under ``train``'s context mode.

    With context off every slot is masked; the ablation chooses whether the
    masked slots hold zeros or Gaussian noise.
    """
    if train.use_context:
        return window
    empty = ContextWindow.empty(window.dim, window.slots.shape[0])
    if train.context_ablation == "noise":
        return empty.with_noise(np.random.default_rng([train.seed, salt]))
    return empty


class Recognizer:
    """Alignment and gloss encoders plus the metadata needed to run them."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
                 vocabulary: Sequence[str] = (), stats: dict | None = None):
        model_cfg.validate()
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg or TrainConfig()
        self.vocabulary = list(vocabulary)
        self.stats = stats
        rng = np.random.default_rng(self.train_cfg.seed)
        self.align = AlignmentEncoder(model_cfg, rng)
        self.gloss = GlossEncoder(model_cfg, rng) if model_cfg.vocab_size else None

    def encode_motion(self, seq) -> np.ndarray:
        e_t, _ = self.align(seq)
        return e_t.data

    def lattice(self, seq, window: ContextWindow, salt: int = 0) -> Tensor:
        return self.gloss(self.encode_motion(seq), effective_window(window, self.train_cfg, salt))

    def recognize(self, seq, window: ContextWindow, beam_width: int | None = None,
                  k: int | None = None) -> ctc.NBestList:
        """Top-``k`` gloss-id sequences for one motion sequence."""
        beam_width = beam_width or self.train_cfg.beam_width
        k = k or self.train_cfg.nbest
        return ctc.prefix_beam_search(self.lattice(seq, window).data, beam_width, k)

    # persistence

    def header(self, run_config: dict | None = None) -> dict:
        return {"kind": "scope-recognizer",
                "model_config": dataclasses.asdict(self.model_cfg),
                "train_config": dataclasses.asdict(self.train_cfg),
                "vocabulary": self.vocabulary, "stats": self.stats,
                "run_config": run_config or {}}

    def params(self) -> dict[str, np.ndarray]:
        out = {f"align.{k}": v for k, v in self.align.state_dict().items()}
        if self.gloss is not None:
            out.update({f"gloss.{k}": v for k, v in self.gloss.state_dict().items()})
        return out

    def save(self, path, run_config: dict | None = None) -> None:
        from .nn import checkpoint
        checkpoint.save(path, self.header(run_config), self.params())

    @classmethod
    def from_parts(cls, header: dict, params: dict[str, np.ndarray]) -> Recognizer:
        if header.get("kind") != "scope-recognizer":
            raise ConfigError("checkpoint is not a recognizer checkpoint")
        model_cfg = ModelConfig(**header["model_config"])
        train_cfg = TrainConfig(**header["train_config"])
        rec = cls(model_cfg, train_cfg, header.get("vocabulary", []), header.get("stats"))
        rec.align.load_state_dict({k[6:]: v for k, v in params.items() if k.startswith("align.")})
        gloss = {k[6:]: v for k, v in params.items() if k.startswith("gloss.")}
        if rec.gloss is not None:
            rec.gloss.load_state_dict(gloss)
        elif gloss:
            raise ConfigError("checkpoint has gloss parameters but no vocabulary size")
        return rec

    @classmethod
    def load(cls, path) -> Recognizer:
        from .nn import checkpoint
        header, params = checkpoint.load(path)
        return cls.from_parts(header, params)

    def with_gloss_head(self, vocab_size: int, vocabulary: Sequence[str], train_cfg: TrainConfig) -> Recognizer:
        """Copy of this recogniser with a freshly initialised gloss encoder."""
        cfg = dataclasses.replace(self.model_cfg, vocab_size=vocab_size)
        rec = Recognizer(cfg, train_cfg, vocabulary, self.stats)
        rec.align.load_state_dict(self.align.state_dict())
        rng = np.random.default_rng([train_cfg.seed, 1])
        rec.gloss = GlossEncoder(cfg, rng)
        return rec


# training

def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train_alignment(rec: Recognizer, samples: Sequence[AlignSample], epochs: int | None = None,
                    on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Fit the alignment encoder to the text embeddings (AdamW, cosine schedule)."""
    cfg = rec.train_cfg
    cfg.validate()
    epochs = cfg.align_epochs if epochs is None else epochs
    if not samples and epochs:
        raise ValueError("train_alignment needs at least one sample")
    for s in samples:
        if s.target.shape != (rec.model_cfg.embed_dim,):
            raise ConfigError(f"text embedding for {s.uid} has dimension {s.target.shape[0]}, "
                              f"model expects {rec.model_cfg.embed_dim}")
    rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = -(-len(samples) // cfg.batch_size) if samples else 0
    opt = AdamW(list(rec.align.named_parameters()), cfg.lr, max(epochs * steps_per_epoch, 1),
                cfg.min_lr, cfg.weight_decay)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for batch in _batches(len(samples), cfg.batch_size, rng):
            opt.zero_grad()
            outs = [rec.align(samples[i].seq)[1] for i in batch]
            loss = embedding_loss(outs, [samples[i].target for i in batch])
            loss.backward()
            lr = opt.step()
            total += loss.item() * len(batch)
        record = {"phase": "align", "epoch": epoch, "loss": total / len(samples), "lr": lr}
        history.append(record)
        if on_epoch:
            on_epoch(record)
    return history


def decode_wer(rec: Recognizer, samples: Sequence[GlossSample]) -> tuple[float, list[list[int]]]:
    """Corpus WER of the beam top-1 over ``samples``, plus the hypotheses."""
    hyps = []
    for i, s in enumerate(samples):
        lattice = rec.gloss(s.e_t, effective_window(s.window, rec.train_cfg, i))
        nbest = ctc.prefix_beam_search(lattice.data, rec.train_cfg.beam_width, 1)
        hyps.append(list(nbest.best.labels) if len(nbest) else [])
    return corpus_wer(hyps, [s.labels for s in samples]), hyps


def train_gloss(rec: Recognizer, train: Sequence[GlossSample], dev: Sequence[GlossSample] = (),
                epochs: int | None = None, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """CTC (+ weighted MWER from ``mwer_start_epoch``) training of the gloss encoder.

    Only gloss-encoder parameters are optimised; the alignment encoder is
    consumed through precomputed ``e_t`` arrays and is never touched.
    """
    cfg = rec.train_cfg
    cfg.validate()
    if rec.gloss is None:
        raise ConfigError("recogniser has no gloss encoder")
    epochs = cfg.gloss_epochs if epochs is None else epochs
    usable = []
    for s in train:
        need = ctc.min_frames(s.labels)
        if s.e_t.shape[0] < need:
            logger.warning("skipping %s: %d steps cannot emit %d labels (need %d)",
                           s.uid, s.e_t.shape[0], len(s.labels), need)
            continue
        usable.append(s)
    skipped = len(train) - len(usable)
    if not usable and epochs:
        raise CTCInfeasibleError("no training sample is long enough for its label sequence")
    rng = np.random.default_rng([cfg.seed, 3])
    steps_per_epoch = -(-len(usable) // cfg.batch_size) if usable else 0
    opt = AdamW(list(rec.gloss.named_parameters()), cfg.lr, max(epochs * steps_per_epoch, 1),
                cfg.min_lr, cfg.weight_decay)
    salts = {s.uid: i for i, s in enumerate(usable)}
    history = []
    for epoch in range(epochs):
        use_mwer = cfg.mwer_weight > 0 and epoch >= cfg.mwer_start_epoch
        ctc_total = mwer_total = 0.0
        for batch in _batches(len(usable), cfg.batch_size, rng):
            opt.zero_grad()
            for i in batch:
                s = usable[i]
                lattice = rec.gloss(s.e_t, effective_window(s.window, cfg, salts[s.uid]))
                loss = ctc.ctc_loss_tensor(lattice, s.labels)
                ctc_total += loss.item()
                if use_mwer:
                    nbest = ctc.prefix_beam_search(lattice.data, cfg.beam_width, cfg.nbest)
                    mwer = ctc.mwer_loss_tensor(lattice, nbest, s.labels, cfg.mwer_baseline)
                    mwer_total += mwer.item()
                    loss = loss + mwer * cfg.mwer_weight
                (loss * (1.0 / len(batch))).backward()
            lr = opt.step()
        record = {"phase": "gloss", "epoch": epoch, "ctc_loss": ctc_total / len(usable),
                  "mwer_loss": mwer_total / len(usable) if use_mwer else None, "lr": lr,
                  "skipped": skipped}
        if dev:
            record["dev_wer"] = decode_wer(rec, dev)[0]
        history.append(record)
        if on_epoch:
            on_epoch(record)
    return history
