import numpy as np
import pytest

from ilens import resources, scorer
from ilens.datasets import toy_scene


@pytest.fixture(scope="session")
def toy_model():
    return scorer.load_weights(resources.toy_weights())


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 16x16 scorer; fast enough for exhaustive oracles."""
    recipe = scorer.default_architecture(16, channels=(3, 4, 4))
    return scorer.init_model(recipe, (16, 16, 3), seed=3)


@pytest.fixture
def tiny_image():
    rng = np.random.default_rng(11)
    return scorer.GridImage(rng.uniform(0.05, 0.95, size=(16, 16, 3)), grid=(4, 4))


@pytest.fixture(scope="session")
def scene0():
    return scorer.GridImage(toy_scene(0))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
