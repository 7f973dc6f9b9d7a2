import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajrl.config import load_config

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


@pytest.fixture(scope="session")
def pointmass_rc():
    return load_config(CONFIGS / "pointmass.ini")


@pytest.fixture(scope="session")
def toy_rc():
    return load_config(CONFIGS / "toy1d.ini")


@pytest.fixture(scope="session")
def dubins_rc():
    return load_config(CONFIGS / "dubins.ini")


@pytest.fixture(scope="session")
def manipulator_rc():
    return load_config(CONFIGS / "manipulator.ini")
