import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ccl_av.model import ModelConfig, StreamConfig  # noqa: E402
from ccl_av.tarp import GridMeta  # noqa: E402


def tiny_config(variant="ccl", dtype="float32", n_a=2, n_v=3, depth=1, grid=None, **kw) -> ModelConfig:
    return ModelConfig(
        audio=StreamConfig(depth=depth, dim=8, heads=2, n_lct=n_v),
        video=StreamConfig(depth=depth, dim=16, heads=2, n_lct=n_a),
        grid=grid or GridMeta(t_a=8, t_v=4, h=2, w=2),
        text_dim=8,
        t_embed_dim=8,
        n_text_tokens=2,
        variant=variant,
        dtype=dtype,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
