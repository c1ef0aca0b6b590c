from __future__ import annotations

import argparse
import json

import pytest

from scope_slr.config import add_config_arguments, resolve
from scope_slr.errors import ConfigError


def _args(argv):
    p = argparse.ArgumentParser()
    add_config_arguments(p)
    return p.parse_args(argv)


def test_precedence_flag_env_file_default(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 0.5, "batch_size": 2}, "seed": 4}))
    env = {"SCOPE_TRAIN_LR": "0.25"}
    cfg = resolve(_args(["--config", str(tmp_path / "c.json")]), env)
    assert cfg.train.lr == 0.25 and cfg.train.batch_size == 2 and cfg.seed == 4
    cfg = resolve(_args(["--config", str(tmp_path / "c.json"), "--lr", "0.125"]), env)
    assert cfg.train.lr == 0.125
    assert cfg.train.seed == 4


def test_desk_preset_and_full_scale():
    assert resolve(_args([]), {}).model.hidden == 32
    full = resolve(_args(["--desk", "off"]), {})
    assert full.model.hidden == 1568 and full.model.embed_dim == 1536
    assert full.embedding.dim == 1536


def test_context_alias_and_epochs():
    cfg = resolve(_args(["--context", "off", "--epochs", "7"]), {}, phase="gloss")
    assert cfg.train.use_context is False and cfg.train.gloss_epochs == 7
    with pytest.raises(ConfigError):
        resolve(_args(["--epochs", "3"]), {})


def test_bad_values_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        resolve(_args(["--lr", "fast"]), {})
    with pytest.raises(ConfigError):
        resolve(_args(["--dropout", "0.1"]), {})
    (tmp_path / "c.json").write_text('{"train": {"nope": 1}}')
    with pytest.raises(ConfigError, match="unknown field"):
        resolve(_args(["--config", str(tmp_path / "c.json")]), {})
    with pytest.raises(ConfigError):
        resolve(_args(["--ratios", "0.5,0.5"]), {})


def test_embedding_prefix_flags():
    cfg = resolve(_args(["--embed-kind", "mock-bow", "--llm-mode", "stub", "--embed-seed", "3"]), {})
    assert cfg.embedding.kind == "mock-bow" and cfg.embedding.seed == 3
