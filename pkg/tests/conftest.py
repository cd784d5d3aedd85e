import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msm_iv.dgp import BUILTINS, simulate  # noqa: E402
from msm_iv.msm import MsmSpec  # noqa: E402


@pytest.fixture(scope="session")
def desk():
    return BUILTINS["desk"]()


@pytest.fixture(scope="session")
def msm():
    return MsmSpec("1.1")


@pytest.fixture(scope="session")
def desk_panel(desk):
    return simulate(desk, 4000, seed=123)


@pytest.fixture(autouse=True)
def _quiet_merges():
    from msm_iv.errors import MergedCellWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MergedCellWarning)
        yield


def rng(seed=0):
    return np.random.default_rng(seed)
