import numpy as np
import pytest

from oran_cm.sim_env import CellSite, ChannelParams, Scenario, ScenarioSpec, UserEquipment, make_suite
from oran_cm.rl_train import fit_scenario_norm


@pytest.fixture(scope="session")
def suite():
    return make_suite(5, seed=0)


@pytest.fixture(scope="session")
def small_suite():
    return make_suite(2, seed=100, N=4, M=16)


@pytest.fixture(scope="session")
def small_norm(small_suite):
    return fit_scenario_norm(small_suite, seed=0, random_rollouts=2)


def hand_scenario(P, positions=((0.0, 0.0), (100.0, 0.0)), channel=None, threshold=6.0):
    """Scenario with an explicit RSRP matrix and cell positions."""
    P = np.asarray(P, dtype=float)
    N, M = P.shape
    cells = tuple(CellSite(i, positions[i], "macro" if i == 0 else "small", 46.0 if i == 0 else 30.0)
                  for i in range(N))
    ues = tuple(UserEquipment(j, (0.0, 0.0)) for j in range(M))
    spec = ScenarioSpec(seed=0, N=N, M=M, n_macro=1, channel=channel or ChannelParams(),
                        edge_gap_threshold=threshold, cells=cells, ues=ues)
    return Scenario(spec, cells, ues, P)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
