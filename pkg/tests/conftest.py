import numpy as np
import pytest
import torch

from pixocr.model import build_model, preset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def toy_model():
    return build_model(preset("toy"), seed=0)


def rand_image(rng, size=64):
    return torch.from_numpy(rng.random((1, 3, size, size))).float()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
