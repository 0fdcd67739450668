"""Shared fixtures: shipped configs and a couple of small layouts."""

from pathlib import Path

import numpy as np
import pytest

from evsched.config import load_scenario
from evsched.model import Menu, build_layout

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def tiny_scenario():
    return load_scenario(CONFIG_DIR / "tiny.toml")


@pytest.fixture(scope="session")
def smoke_scenario():
    return load_scenario(CONFIG_DIR / "smoke.toml")


@pytest.fixture(scope="session")
def weekday_scenario():
    return load_scenario(CONFIG_DIR / "weekday.toml")


@pytest.fixture(scope="session")
def tri_layout():
    """Three-item layout used by many small examples: one immediate item
    plus two that share a 2-slot window."""
    return build_layout(Menu(items=((1.0, 1), (1.0, 2), (2.0, 2)), rate_kw=1.0))


@pytest.fixture(scope="session")
def kw10_layout():
    """10 kW menu with mixed windows, sized for bound arithmetic by hand."""
    return build_layout(Menu(items=((10.0, 2), (20.0, 2), (30.0, 3)), rate_kw=10.0))


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
