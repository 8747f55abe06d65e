import json

import numpy as np
import pytest

from eikfnet.config import RunConfig
from eikfnet.data import generate_synthetic, plant_structures, save_distances, save_series


@pytest.fixture(scope="session")
def planted():
    """The 12-sensor, three-community dataset used across the suite."""
    dist, adjacency, incidence = plant_structures(12, 3, seed=0)
    syn = generate_synthetic(12, 2000, adjacency, incidence, seed=0)
    return dist, syn


@pytest.fixture(scope="session")
def small_planted():
    dist, adjacency, incidence = plant_structures(6, 2, seed=1)
    syn = generate_synthetic(6, 300, adjacency, incidence, seed=1)
    return dist, syn


def small_config(**model) -> RunConfig:
    cfg = RunConfig()
    cfg.data.tau, cfg.data.upsilon = 4, 3
    cfg.model.d, cfg.model.num_hyperedges = 6, 3
    for k, v in model.items():
        setattr(cfg.model, k, v)
    cfg.train.epochs, cfg.train.batch = 3, 16
    return cfg


@pytest.fixture
def dataset_dir(tmp_path, small_planted):
    """A config.json plus series/distance files on disk, for CLI runs."""
    dist, syn = small_planted
    save_series(tmp_path / "series.csv", syn.series)
    save_distances(tmp_path / "distances.csv", syn.series.sensor_ids, dist)
    cfg = small_config().to_dict()
    cfg["data"]["series_path"] = "series.csv"
    cfg["data"]["distance_path"] = "distances.csv"
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    return tmp_path


def write_config(path, base, **sections):
    cfg = json.loads((base / "config.json").read_text())
    for section, values in sections.items():
        cfg[section].update(values)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
