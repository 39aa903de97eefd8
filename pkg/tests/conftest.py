import sys

import numpy as np
import pytest
import torch

from mimco.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_enc_cfg():
    # 32x32 inputs, 8-pixel tokens -> 4x4 tokens; 16-pixel mask cells -> 2x2 cells
    return EncoderConfig(image_size=32, token_patch=8, embed_dim=8, depth=1, heads=2,
                         mlp_ratio=2.0)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def central_difference(f, x: torch.Tensor, direction: torch.Tensor, h: float = 1e-5) -> float:
    """Directional derivative of scalar f at x along `direction` by central differences."""
    with torch.no_grad():
        return (f(x + h * direction).item() - f(x - h * direction).item()) / (2 * h)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(n))
