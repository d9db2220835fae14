import numpy as np
import pytest

from regionfeat.attention import AttentionParams, EmbeddingConfig
from regionfeat.types import RoI


def random_params(rng, k=4, ce=4, cg=3, cf=3, scale=0.3):
    return AttentionParams(
        v_box=rng.normal(0, scale, (ce, 4 * ce)),
        w_box_hat=rng.normal(0, scale, (k, cg, ce)),
        w_im=rng.normal(0, scale, (cg, 2 * ce)),
        w_app=rng.normal(0, scale, (k, cf)),
    )


def random_roi(rng, height, width, min_side=0.5):
    """A box with random real corners that overlaps the map."""
    w = rng.uniform(min_side, width)
    h = rng.uniform(min_side, height)
    x1 = rng.uniform(-0.25 * w, width - 0.75 * w)
    y1 = rng.uniform(-0.25 * h, height - 0.75 * h)
    return RoI(x1, y1, x1 + w, y1 + h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return EmbeddingConfig(dim=4, transform_dim=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
