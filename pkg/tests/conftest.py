import sys

import numpy as np
import pytest

from nmarest.core_model import ResponseModel
from nmarest.simulation import generate_scenario, scenario

# Frozen oracle values (independent enumeration / hand evaluation).
S1_TRUE_THETA = 0.35367138674518583
S1_RESPONSE_RATE = 0.6951048176730854


@pytest.fixture
def s1_response():
    return ResponseModel.from_spec("1, x1, y", phi=(-1.0, -0.5, 0.75))


@pytest.fixture
def s1_data():
    data, _ = generate_scenario(scenario(1, 2000), seed=11)
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[cid])
