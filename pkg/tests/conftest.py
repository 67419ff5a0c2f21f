import os
from importlib import resources

import numpy as np
import pytest

from dopf.grid_model import build_admittance, build_incidence, load_network, random_radial_network

DATA = resources.files("dopf") / "data"


def data_path(name: str) -> str:
    return str(DATA / name)


@pytest.fixture
def feeder8():
    return load_network(data_path("feeder8.json"))


@pytest.fixture
def feeder8_mats(feeder8):
    return feeder8, build_admittance(feeder8), build_incidence(feeder8)


@pytest.fixture
def two_node():
    return load_network(data_path("two_node.json"))


@pytest.fixture
def overvoltage_net(feeder8):
    return feeder8.with_operating_point(0.3, {"pv1": 0.9})


def random_fixtures(count=5, max_nodes=20, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_radial_network(rng, int(rng.integers(4, max_nodes + 1)), name=f"random{k}") for k in range(count)]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


os.environ.setdefault("DOPF_LOG", "off")
