import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oran_cm.sim_env import (
    CELL_CENTER, CELL_EDGE, Action, CellSite, ChannelParams, EpisodeFinished, GraphState, InvalidAction,
    RewardConfig, Scenario, ScenarioSpec, apply_action, capacity, capacity_and_rate, cell_adjacency,
    classify_ues, combine_reward, generate_deployment, initial_graph, make_suite, network_throughput,
    path_loss_rsrp, reward, valid_actions,
)

from conftest import hand_scenario

UNIT = ChannelParams(noise_floor=0.0, bandwidth=1.0)


# --- path loss and deployment ---------------------------------------------


def test_rsrp_at_reference_distance():
    assert path_loss_rsrp(30.0, 1.0, ChannelParams()) == -10.0


def test_rsrp_at_100m():
    assert path_loss_rsrp(46.0, 100.0, ChannelParams()) == pytest.approx(-54.0, abs=1e-12)


def test_generation_is_deterministic():
    a = generate_deployment(ScenarioSpec(seed=3))
    b = generate_deployment(ScenarioSpec(seed=3))
    assert np.array_equal(a[2], b[2])
    assert a[0] == b[0] and a[1] == b[1]


def test_generated_matrix_is_well_formed():
    spec = ScenarioSpec(seed=1)
    cells, ues, P = generate_deployment(spec)
    fin = np.isfinite(P)
    assert fin.any(axis=0).all()
    assert (fin.sum(axis=0) <= spec.channel.top_k_reports).all()
    assert (P[fin] >= spec.channel.visibility_floor).all()
    for c in cells:
        assert 0 <= c.position[0] <= spec.area[0] and 0 <= c.position[1] <= spec.area[1]
    macro = [c.tx_power for c in cells if c.kind == "macro"]
    small = [c.tx_power for c in cells if c.kind == "small"]
    assert min(macro) > max(small)


def test_infeasible_fixed_geometry_fails():
    from oran_cm.sim_env import InfeasibleScenario, UserEquipment

    cells = (CellSite(0, (0.0, 0.0), "macro", -100.0),)
    ues = (UserEquipment(0, (900.0, 900.0)),)
    spec = ScenarioSpec(seed=0, N=1, M=1, n_macro=1, cells=cells, ues=ues)
    with pytest.raises(InfeasibleScenario, match="infeasible scenario"):
        generate_deployment(spec)


# --- capacity and rate ------------------------------------------------------


def test_capacity_unit_snr():
    assert capacity(np.array([[0.0]]), UNIT)[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_capacity_10db():
    assert capacity(np.array([[10.0]]), UNIT)[0, 0] == pytest.approx(math.log2(11.0), rel=1e-14)
    assert math.log2(11.0) == pytest.approx(3.4594, abs=1e-4)


def test_capacity_zero_on_unreported():
    assert capacity(np.array([[-np.inf]]), UNIT)[0, 0] == 0.0


def test_rate_splits_capacity_by_load():
    snr = 10 * math.log10(15.0)  # C = log2(16) = 4
    P = np.array([[snr, snr]])
    A_u = np.array([[1.0, 1.0]])
    C, R = capacity_and_rate(P, A_u, UNIT)
    assert C[0, 0] == pytest.approx(4.0, rel=1e-14)
    assert R[0, 0] == pytest.approx(2.0, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rate_bounded_by_capacity(seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(-110, -50, size=(3, 6))
    P[rng.random(P.shape) < 0.3] = -np.inf
    A_u = np.zeros((3, 6))
    for j in range(6):
        fin = np.flatnonzero(np.isfinite(P[:, j]))
        if fin.size and rng.random() < 0.7:
            A_u[rng.choice(fin), j] = 1.0
    C, R = capacity_and_rate(P, A_u, ChannelParams())
    assert (C >= 0).all() and (R <= C).all()
    single = A_u.sum(axis=1) == 1
    assert np.array_equal(R[single], C[single])


# --- classification and graph ---------------------------------------------


def test_classify_gap_rule():
    P = np.array([[-70.0, -70.0, -70.0], [-80.0, -73.0, -np.inf]])
    assert classify_ues(P, 6.0) == [CELL_CENTER, CELL_EDGE, CELL_CENTER]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-30, 30))
def test_classify_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    P = rng.uniform(-110, -50, size=(4, 5))
    P[rng.random(P.shape) < 0.3] = -np.inf
    Q = P.copy()
    Q[:, 2] = Q[:, 2] + shift
    assert classify_ues(P, 6.0) == classify_ues(Q, 6.0)


def test_adjacency_two_cells():
    cells = (CellSite(0, (0.0, 0.0), "macro", 46.0), CellSite(1, (100.0, 0.0), "small", 30.0))
    assert np.array_equal(cell_adjacency(cells, 500.0), [[0, 1], [1, 0]])


def test_initial_graph_center_ue_connected_to_best():
    sc = hand_scenario([[-70.0], [-80.0]])
    s = sc.initial_state()
    assert s.A_u[0, 0] == 1 and s.terminal


def test_initial_graph_edge_ues_unconnected_in_order():
    sc = hand_scenario([[-70.0, -72.0, -60.0], [-71.0, -73.0, -90.0]])
    s = sc.initial_state()
    assert s.unconnected == (0, 1)
    assert s.A_u[:, :2].sum() == 0 and s.A_u[0, 2] == 1 and s.t == 0


def test_valid_actions_count_and_order():
    P = np.array([[-70.0], [-71.0], [-72.0]])
    s = GraphState(np.zeros((3, 3)), np.zeros((3, 1)), (0,))
    acts = valid_actions(s, P)
    assert [a.cell_id for a in acts] == [0, 1, 2]
    P[1, 0] = P[2, 0] = -np.inf
    assert len(valid_actions(s, P)) == 1


def test_valid_actions_terminal_raises():
    s = GraphState(np.zeros((1, 1)), np.ones((1, 1)), ())
    with pytest.raises(EpisodeFinished):
        valid_actions(s, np.zeros((1, 1)))


def test_apply_action_transitions():
    P = np.array([[-70.0, -70.0], [-71.0, -np.inf]])
    s = GraphState(np.zeros((2, 2)), np.zeros((2, 2)), (0, 1))
    s1 = apply_action(s, Action(0, 1), P)
    assert s1.A_u[:, 0].sum() == 1 and s1.A_u[1, 0] == 1 and s1.t == 1 and not s1.terminal
    assert s.A_u.sum() == 0  # original untouched
    with pytest.raises(InvalidAction):
        apply_action(s1, Action(0, 1), P)
    with pytest.raises(InvalidAction):
        apply_action(s1, Action(1, 1), P)
    s2 = apply_action(s1, Action(1, 0), P)
    assert s2.terminal


# --- throughput and reward --------------------------------------------------


def test_throughput_examples():
    snr = 10 * math.log10(15.0)
    P = np.array([[snr, snr]])
    assert network_throughput(np.zeros((1, 2)), P, UNIT) == 0.0
    assert network_throughput(np.array([[1.0, 0.0]]), P, UNIT) == pytest.approx(4.0, rel=1e-14)
    assert network_throughput(np.array([[1.0, 1.0]]), P, UNIT) == pytest.approx(4.0, rel=1e-14)


def test_combine_reward_hand_value():
    assert combine_reward(8.0, 10.0, [1.0, 3.0], 0.5, 2) == 3.0


def test_reward_lambda_zero_is_delta_throughput():
    sc = hand_scenario([[-70.0, -72.0, -60.0], [-71.0, -73.0, -90.0]])
    cfg = RewardConfig(lam=0.0, utility="sum")
    s0 = sc.initial_state()
    s1, r = sc.step(s0, sc.valid_actions(s0)[1], cfg)
    assert r == sc.throughput(s1) - sc.throughput(s0)


def test_reward_telescopes_over_episode(suite):
    cfg = RewardConfig(lam=0.0, utility="sum")
    for sc in suite:
        s = sc.initial_state()
        u0 = sc.throughput(s)
        deltas = []
        while not s.terminal:
            nxt = apply_action(s, sc.valid_actions(s)[0], sc.P)
            deltas.append(sc.throughput(nxt) - sc.throughput(s))
            s = nxt
        # consecutive utilities are within a factor 2, so every difference is exact
        # and the exactly-rounded sum of the increments reproduces U(G_T) - U(G_0)
        assert math.fsum(deltas) == sc.throughput(s) - u0


def test_column_sums_stay_binary(suite):
    for sc in suite[:2]:
        s = sc.initial_state()
        while not s.terminal:
            assert set(np.unique(s.A_u.sum(axis=0))) <= {0.0, 1.0}
            s = apply_action(s, sc.valid_actions(s)[-1], sc.P)
        assert (s.A_u.sum(axis=0) == 1).all()


def test_episode_length_is_edge_count(suite):
    for sc in suite:
        s, n = sc.initial_state(), 0
        while not s.terminal:
            s = apply_action(s, sc.valid_actions(s)[0], sc.P)
            n += 1
        assert n == len(sc.edge_ues)


def test_suite_has_edge_ues(suite):
    assert all(len(sc.edge_ues) > 0 for sc in suite)
    assert make_suite(1, seed=0)[0].P.shape == (6, 50)
