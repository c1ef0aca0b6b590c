from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    from scope_slr.encoders import ModelConfig

    return ModelConfig(num_points=77, hidden=8, feed_forward=16, heads=2, align_layers=1,
                       gloss_layers=1, mlp_layers=1, conv_width=3, conv_stride=2,
                       embed_dim=6, context_slots=3, max_len=32, vocab_size=4)


_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the line is printed immediately and
    again in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((number, passed, detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
