import sys

import numpy as np
import pytest

from focalattn.attention import dfa_warm_start
from focalattn.decoder import DecoderConfig, init_params


def perturbed(params, seed=123, scale=0.3):
    """Shift every array off its initial value so zero offsets do not hide bugs."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    for k, a in out.arrays.items():
        out.arrays[k] = a + scale * rng.normal(size=a.shape)
    return out


@pytest.fixture
def tiny_fixture():
    """C=3, N=16, d=8 decoder with a learnable bias, one scene and its labels."""
    cfg = DecoderConfig(num_classes=3, feature_dim=8, input_dim=5, num_layers=2, num_heads=2,
                        ffn_dim=8, iou_hidden_dim=6, seed=7)
    rng = np.random.default_rng(11)
    params = perturbed(init_params(cfg, dfa_warm_start([0.6, 0.3, 0.1])))
    x = rng.normal(size=(16, 5)) * 2
    lab = rng.integers(0, 3, size=16)
    y = np.zeros((3, 16))
    y[lab, np.arange(16)] = 1
    return cfg, params, x, y


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
