import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from decaf import optics, phantom  # noqa: E402
from decaf.volume import Grid3D  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_grid():
    return Grid3D(64, 64, 8, 0.1625, 0.1625, 0.5, -1.75)


@pytest.fixture(scope="session")
def small_grid():
    return Grid3D(16, 16, 2, 0.25, 0.25, 0.5, 0.0)


@pytest.fixture(scope="session")
def annular():
    return phantom.make_setup("annular24")


def all_setups():
    return {name: phantom.make_setup(name) for name in phantom.PRESETS}


@pytest.fixture(scope="session")
def setups():
    return all_setups()


@pytest.fixture(scope="session")
def small_stack(small_grid, annular):
    return optics.build_tf_stack(annular, small_grid)


@pytest.fixture(scope="session")
def trained_cnn():
    """DnCNN-lite trained at noise level 5 with the default recipe (shared by several tests)."""
    from decaf import denoiser

    data = denoiser.make_texture_dataset(64, 64, 0, denoiser.level_to_std(5))
    return denoiser.train_dncnn(denoiser.DncnnLiteConfig(), data, 5, seed=0, epochs=30)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whether it passed or failed."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
