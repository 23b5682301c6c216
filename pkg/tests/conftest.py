import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pglight.calibrate import CalibrationSet, builtin_set
from pglight.model import TOY_CONFIG, ModelConfig, random_init


@pytest.fixture
def toy_config():
    return TOY_CONFIG


@pytest.fixture
def toy_model():
    return random_init(TOY_CONFIG, seed=7)


@pytest.fixture
def wide_config():
    return ModelConfig(num_layers=4, hidden=16, num_query_heads=8, num_kv_groups=4, head_dim=4, ffn_dim=24, vocab=48)


@pytest.fixture
def calib():
    return builtin_set(TOY_CONFIG.vocab, seed=3, n=4, length=12)


def zero_modules(w, layers=None):
    """Zero every module weight matrix of the given layers (all by default)."""
    w = w.copy()
    for i, lw in enumerate(w.layers):
        if layers is None or i in layers:
            for name in ("W_Q", "W_K", "W_V", "W_O", "W_gate", "W_up", "W_down"):
                setattr(lw, name, np.zeros_like(getattr(lw, name)))
    return w


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
