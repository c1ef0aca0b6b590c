"""Run configuration: one resolved view of defaults, a JSON config file,
``SCOPE_*`` environment variables and command-line flags (in increasing
precedence).

Config file layout::

    {"seed": 0, "manifest": "...", "model": {"hidden": 32, ...},
     "train": {"lr": 0.003, ...}, "embedding": {"kind": "mock", ...},
     "client": {"mode": "stub", ...}, "preprocess": {"eyelid_policy": "drop-frame", ...}}

Environment variables are ``SCOPE_<FIELD>`` for top-level fields and
``SCOPE_<SECTION>_<FIELD>`` for section fields, e.g. ``SCOPE_TRAIN_LR``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .context import ClientConfig, EmbeddingConfig
from .encoders import ModelConfig, TrainConfig
from .errors import ConfigError


@dataclass
class PreprocessSettings:
    eyelid_policy: str = "drop-frame"
    eyelid_metric: str = "x"
    eyelid_eps: float = 1e-6
    min_confidence: float = 0.3


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    manifest: str | None = None
    split: str | None = None
    split_name: str = "dev"
    ratios: str = "0.8,0.05,0.15"
    group_spec: str | None = None
    stats: str | None = None
    sequences: str | None = None
    align_checkpoint: str | None = None
    checkpoint: str | None = None
    cache_dir: str | None = None
    context_source: str = "auto"  # auto | gold | own
    smooth: str = "none"
    tokenization: str = "auto"
    threshold: int = 3
    desk: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)

    @property
    def ratio_tuple(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(x) for x in self.ratios.split(","))
        except ValueError as exc:
            raise ConfigError(f"cannot parse ratios {self.ratios!r}") from exc
        if len(parts) != 3:
            raise ConfigError(f"ratios needs three comma-separated fractions, got {self.ratios!r}")
        return parts

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "embedding": EmbeddingConfig,
            "client": ClientConfig, "preprocess": PreprocessSettings}
# flag prefix per section; model/train/preprocess field names do not collide
FLAG_PREFIX = {"model": "", "train": "", "preprocess": "", "embedding": "embed-", "client": "llm-"}
# fields that are derived rather than configured
DERIVED = {("model", "vocab_size"), ("train", "seed"), ("embedding", "dim"), ("embedding", "cache_dir")}
TOP_LEVEL = [f for f in fields(RunConfig) if f.name not in SECTIONS]


def _kind(default: Any) -> type:
    return type(default) if default is not None else str


def coerce(value: Any, default: Any, name: str) -> Any:
    kind = _kind(default)
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    if isinstance(value, str):
        text = value.strip()
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ConfigError(f"{name}: expected on/off, got {value!r}")
        try:
            return kind(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r} as {kind.__name__}") from exc
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{name}: expected {kind.__name__}, got {type(value).__name__}")


def _flag(section: str | None, name: str) -> str:
    prefix = FLAG_PREFIX[section] if section else ""
    return "--" + prefix + name.replace("_", "-")


def _dest(section: str | None, name: str) -> str:
    return f"cfg__{section}__{name}" if section else f"cfg__{name}"


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """One flag per configurable field; defaults stay None so unset flags
    can be told apart from explicit values."""
    parser.add_argument("--config", help="JSON run configuration file")
    for f in TOP_LEVEL:
        parser.add_argument(_flag(None, f.name), dest=_dest(None, f.name), default=None, metavar=f.name.upper())
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if (section, f.name) in DERIVED:
                continue
            parser.add_argument(_flag(section, f.name), dest=_dest(section, f.name), default=None,
                                metavar=f.name.upper())
    parser.add_argument("--context", dest="cfg__train__use_context", default=None, metavar="on|off",
                        help="alias of --use-context")
    parser.add_argument("--epochs", dest="epochs", type=int, default=None,
                        help="epochs for the current training phase")


def _apply(cfg: RunConfig, section: str | None, name: str, value: Any, origin: str) -> None:
    target = getattr(cfg, section) if section else cfg
    current = getattr(target, name)
    default_type = current
    if current is None:
        default_type = next(f.default for f in fields(type(target)) if f.name == name) or ""
    setattr(target, name, coerce(value, default_type, f"{origin} {section + '.' if section else ''}{name}"))


def _apply_mapping(cfg: RunConfig, doc: Mapping, origin: str) -> None:
    for key, value in doc.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: section {key!r} must be an object")
            known = {f.name for f in fields(SECTIONS[key])}
            for sub, v in value.items():
                if sub not in known:
                    raise ConfigError(f"{origin}: unknown field {key}.{sub}")
                _apply(cfg, key, sub, v, origin)
        elif key in {f.name for f in TOP_LEVEL}:
            _apply(cfg, None, key, value, origin)
        else:
            raise ConfigError(f"{origin}: unknown field {key!r}")


def resolve(args: argparse.Namespace | None = None, env: Mapping[str, str] | None = None,
            phase: str | None = None) -> RunConfig:
    """Build the RunConfig: defaults < config file < environment < flags."""
    env = os.environ if env is None else env
    values = vars(args) if args is not None else {}
    cfg = RunConfig()
    desk_flag = values.get("cfg__desk")
    path = values.get("config") or env.get("SCOPE_CONFIG")
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    desk = coerce(desk_flag if desk_flag is not None else env.get("SCOPE_DESK", doc.get("desk", True)), True, "desk")
    if desk:
        cfg.model = ModelConfig.desk()
        cfg.train = TrainConfig(lr=3e-3, batch_size=4, gloss_epochs=200, mwer_start_epoch=120)
    _apply_mapping(cfg, doc, f"config file {path}")
    for f in TOP_LEVEL:
        key = f"SCOPE_{f.name.upper()}"
        if key in env:
            _apply(cfg, None, f.name, env[key], "environment")
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            key = f"SCOPE_{section.upper()}_{f.name.upper()}"
            if key in env and (section, f.name) not in DERIVED:
                _apply(cfg, section, f.name, env[key], "environment")
    for dest, value in values.items():
        if not dest.startswith("cfg__") or value is None:
            continue
        parts = dest.split("__")[1:]
        section, name = (parts[0], parts[1]) if len(parts) == 2 else (None, parts[0])
        _apply(cfg, section, name, value, "flag")
    epochs = values.get("epochs")
    if epochs is not None:
        if phase == "align":
            cfg.train.align_epochs = epochs
        elif phase == "gloss":
            cfg.train.gloss_epochs = epochs
        else:
            raise ConfigError("--epochs only applies to training commands")
    finalize(cfg)
    return cfg


def finalize(cfg: RunConfig) -> None:
    """Derive linked fields and validate."""
    cfg.train.seed = cfg.seed
    cfg.embedding.dim = cfg.model.embed_dim
    cfg.embedding.cache_dir = cfg.cache_dir
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if cfg.context_source not in ("auto", "gold", "own"):
        raise ConfigError(f"unknown context source {cfg.context_source!r}")
    cfg.ratio_tuple
    cfg.model.validate()
    cfg.train.validate()
