import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from oran_cm.attacks import (
    ArchitectureMismatch, AttackConfig, TargetSpec, attack_state, attacked_episode, blackbox_transfer,
    digital_attack, patch_attack, pgd_solve, physical_attack, select_target,
)
from oran_cm.chain import record
from oran_cm.gnn import GnnParams
from oran_cm.sim_env import Action, RewardConfig

import gradcheck


# --- projected gradient ascent ---------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5), st.sampled_from([np.inf, 2]), st.integers(1, 3))
@example(784, 1.0, 2, 2)  # random restart start must be projected onto the L2 ball
def test_pgd_stays_in_ball(seed, budget, p, restarts):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 4, 5))
    mask = rng.random((3, 4, 5)) < 0.7

    def objective(x):
        return (A * x).sum(axis=(1, 2)) + np.sin(x).sum(axis=(1, 2)), A + np.cos(x)

    x0 = np.zeros((3, 4, 5))
    res = pgd_solve(objective, x0, budget, 7, 0.4 * budget + 0.01, restarts, rng, mask, p)
    d = res.x - x0
    assert (d[~mask] == 0).all()
    if p == np.inf:
        assert np.abs(d).max() <= budget + 1e-9
    else:
        assert np.sqrt((d**2).sum(axis=(1, 2))).max() <= budget + 1e-9


def test_pgd_budget_zero_is_neutral():
    res = pgd_solve(lambda x: (x.sum(axis=1), np.ones_like(x)), np.zeros((2, 3)), 0.0, 10, 1.0)
    assert not res.x.any()


def test_pgd_finds_box_corner():
    res = pgd_solve(lambda x: (-((x - 5.0) ** 2).sum(axis=1), -2 * (x - 5.0)), np.zeros((1, 4)), 1.0, 10, 0.25)
    np.testing.assert_array_equal(res.x, np.ones((1, 4)))


def test_pgd_per_row_budgets():
    res = pgd_solve(lambda x: (x.sum(axis=1), np.ones_like(x)), np.zeros((3, 2)), np.array([0.0, 1.0, 2.0]),
                    5, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_array_equal(res.x, [[0, 0], [1, 1], [2, 2]])


# --- step-level attacks -----------------------------------------------------


def _state(seed=4):
    sc, batch, norm, params, _ = gradcheck.fixture(seed)
    return sc, batch, norm, params


def test_target_selection():
    acts = [Action(3, 0), Action(3, 2), Action(3, 4)]
    assert select_target(acts, [0.2, 0.5, 0.3], TargetSpec("macro-overload", 2)) == 1
    assert select_target(acts, [0.2, 0.5, 0.3], TargetSpec("macro-overload", 1)) == 0  # fallback: least likely
    assert select_target(acts, [0.6, 0.1, 0.3], TargetSpec("worst-action")) == 1
    with pytest.raises(ValueError):
        select_target(acts, [0.2, 0.5, 0.3], TargetSpec("macro-overload", 1), macro_cells=[0])


@pytest.mark.parametrize("surface", ["physical", "digital"])
def test_zero_budget_leaves_action(surface):
    sc, batch, norm, params = _state()
    res = attack_state(params, norm, batch, AttackConfig(surface=surface, budget=0.0), np.random.default_rng(0))
    assert res.action_after == res.action_before and res.norm == 0.0


@pytest.mark.parametrize("budget", [1.0, 6.0, 15.0])
def test_physical_perturbation_respects_budget_and_mask(budget):
    sc, batch, norm, params = _state(6)
    res = attack_state(params, norm, batch, AttackConfig(surface="physical", budget=budget, steps=10),
                       np.random.default_rng(0))
    assert res.norm <= budget + 1e-9
    assert (res.delta[~np.isfinite(sc.P)] == 0).all()
    assert res.objective >= res.clean_objective


def test_digital_features_stay_in_expanded_box():
    sc, batch, norm, params = _state(8)
    eps = 0.064
    res = digital_attack(params, norm, batch, AttackConfig(surface="digital", budget=eps, steps=10))
    tape = record(params, norm, batch, dXc=res.delta[0][None], dXu=res.delta[1][None])
    clean = record(params, norm, batch)
    n = len(batch.actions[0])
    # benign features of this state lie in [0, 1] (norm was fitted on them)
    assert clean.Xc[0, :n].min() >= -1e-12 and clean.Xc[0, :n].max() <= 1 + 1e-12
    assert tape.Xc[0, :n].min() >= -eps - 1e-12 and tape.Xc[0, :n].max() <= 1 + eps + 1e-12
    # one shared perturbation for all candidates
    np.testing.assert_allclose(tape.Xc[0] - clean.Xc[0], np.broadcast_to(res.delta[0], clean.Xc[0].shape))


def test_surrogate_architecture_must_match():
    sc, batch, norm, params = _state()
    with pytest.raises(ArchitectureMismatch):
        attack_state(params, norm, batch, AttackConfig(budget=3.0), np.random.default_rng(0),
                     attacker=GnnParams.init(0, d=4))


# --- episode-level attacks --------------------------------------------------


def test_patch_with_full_mask_equals_physical(small_suite, small_norm):
    sc = small_suite[0]
    params = GnnParams.init(3)
    phys = physical_attack(params, small_norm, sc, AttackConfig(surface="physical", budget=9.0, steps=5, seed=2))
    full = frozenset(range(sc.M))
    patch = patch_attack(params, small_norm, sc, AttackConfig(surface="patch", budget=9.0, steps=5, seed=2,
                                                              patch_mask=full))
    assert np.array_equal(phys.final_state.A_u, patch.final_state.A_u)
    for a, b in zip(phys.steps, patch.steps):
        assert np.array_equal(a.delta, b.delta) and a.trace == b.trace


def test_patch_zero_outside_mask(small_suite, small_norm):
    sc = small_suite[1]
    mask = frozenset({0, 1, 2, 3})
    ep = patch_attack(GnnParams.init(1), small_norm, sc, AttackConfig(surface="patch", budget=9.0, steps=4,
                                                                      patch_mask=mask))
    for st_ in ep.steps:
        assert not st_.delta[:, 4:].any()


def test_identity_surrogate_equals_whitebox(small_suite, small_norm):
    sc = small_suite[0]
    params = GnnParams.init(5)
    cfg = AttackConfig(surface="physical", budget=9.0, steps=5, seed=1)
    wb = physical_attack(params, small_norm, sc, cfg)
    bb = blackbox_transfer(params, params.copy(), small_norm, sc, cfg)
    assert np.array_equal(wb.final_state.A_u, bb.final_state.A_u)
    assert [s.action_after for s in wb.steps] == [s.action_after for s in bb.steps]


def test_attacked_transitions_use_true_rsrp(small_suite, small_norm):
    sc = small_suite[1]
    cfg = AttackConfig(surface="physical", budget=15.0, steps=5)
    ep = attacked_episode(GnnParams.init(2), small_norm, sc, cfg, RewardConfig())
    state, total = sc.initial_state(), 0.0
    for st_ in ep.steps:
        state, r = sc.step(state, sc.valid_actions(state)[st_.action_after], RewardConfig())
        total += r
    assert np.array_equal(state.A_u, ep.final_state.A_u) and total == ep.reward


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(surface="patch", budget=1.0)
    with pytest.raises(ValueError):
        AttackConfig(budget=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(p=1)
    assert AttackConfig(budget=8.0, steps=20).alpha == pytest.approx(1.0)
