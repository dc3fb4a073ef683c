import json

import numpy as np
import pytest

from utils.attention import AttentionEngine
from utils.config import EngineConfig, GuidanceConfig, LossWeights
from utils.grid import Grid2D
from utils.layout_data import Layout

PROMPT = ("a", "red", "apple", "and", "a", "yellow", "clock")


@pytest.fixture(autouse=True)
def isolated_run_store(tmp_path, monkeypatch):
    """Keep the run registry inside the test's temporary directory"""
    monkeypatch.setenv("DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    monkeypatch.delenv("TOLO_COLOR_TABLE", raising=False)


@pytest.fixture
def engine_config():
    return EngineConfig()


@pytest.fixture
def weights():
    return LossWeights()


@pytest.fixture
def guidance():
    return GuidanceConfig()


@pytest.fixture
def engine(engine_config):
    return AttentionEngine(engine_config, seed=0)


@pytest.fixture
def overlap_layout():
    """Two 240 px boxes shifted by 80 px: IoU exactly 0.5"""
    return Layout(
        id="overlap",
        prompt=PROMPT,
        boxes=((96.0, 96.0, 336.0, 336.0), (176.0, 96.0, 416.0, 336.0)),
        concepts=((1, 2), (5, 6)),
        category="spatial",
    )


@pytest.fixture
def disjoint_layout():
    return Layout(
        id="disjoint",
        prompt=PROMPT,
        boxes=((32.0, 32.0, 224.0, 224.0), (288.0, 288.0, 480.0, 480.0)),
        concepts=((1, 2), (5, 6)),
        category="spatial",
    )


@pytest.fixture
def write_layout(tmp_path):
    def write(layout, name="layout.json"):
        path = tmp_path / name
        path.write_text(json.dumps(layout.to_record()))
        return path

    return write


@pytest.fixture
def indicator():
    """Square grid with ones on rows r0:r1 and columns c0:c1"""

    def make(size, rows, cols):
        data = np.zeros((size, size))
        data[rows[0]:rows[1], cols[0]:cols[1]] = 1.0
        return Grid2D(data)

    return make
