import numpy as np
import pytest

from oran_cm.checkpoint import Checkpoint
from oran_cm.defense import (
    DefenseConfig, ObservedExperience, finetune, hinge_regularizer, perturbed_rollout, regularized_update,
)
from oran_cm.gnn import GnnParams
from oran_cm.rl_train import dqn_update, rollout_episode
from oran_cm.sim_env import RewardConfig, valid_actions


def _items(small_suite, n=6, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for sc in small_suite:
        state = sc.initial_state()
        while not state.terminal:
            acts = sc.valid_actions(state)
            items.append((sc.P, state, acts))
            state, _ = sc.step(state, acts[int(rng.integers(len(acts)))], RewardConfig())
    return items[:n]


def _batch(small_suite, small_norm, n=8):
    rng = np.random.default_rng(3)
    out = []
    for k, sc in enumerate(small_suite):
        e, _, _ = rollout_episode(GnnParams.init(1), small_norm, sc, 1.0, rng, RewardConfig(), k)
        out += e
    return out[:n]


def test_hinge_terms_bounded_below(small_suite, small_norm):
    cfg = DefenseConfig(hinge_cap=0.3, inner_steps=5)
    res = hinge_regularizer(GnnParams.init(2), small_norm, _items(small_suite, 10), small_suite[0].channel, cfg,
                            np.random.default_rng(0))
    assert (res.terms >= -0.3).all()
    assert res.value == pytest.approx(res.terms.sum())


def test_hinge_inactive_gives_zero_gradient(small_suite, small_norm):
    items = _items(small_suite, 10)
    params = GnnParams.init(4)
    cfg = DefenseConfig(hinge_cap=0.0, inner_steps=0, pnr_train_range=(0.0,))
    res = hinge_regularizer(params, small_norm, items, small_suite[0].channel, cfg, np.random.default_rng(0))
    # at zero budget the best competitor never beats the top-1 action
    assert (res.margins <= 0).all()
    assert res.value == 0.0
    assert all(not g.any() for g in res.grads.values())


def test_hinge_skips_single_candidate_states(small_suite, small_norm):
    items = [it for it in _items(small_suite, 40) if len(it[2]) == 1]
    res = hinge_regularizer(GnnParams.init(0), small_norm, items, small_suite[0].channel, DefenseConfig(),
                            np.random.default_rng(0))
    assert res.value == 0.0 and res.margins.size == 0


def test_hinge_gradient_matches_finite_difference(small_suite, small_norm):
    items = [it for it in _items(small_suite, 10) if len(it[2]) >= 2][:3]
    params = GnnParams.init(7)
    cfg = DefenseConfig(inner_steps=0, pnr_train_range=(0.0,), hinge_cap=10.0)
    res = hinge_regularizer(params, small_norm, items, small_suite[0].channel, cfg, np.random.default_rng(0))
    h = 1e-6
    for name in ("final_w", "l0_uc_W"):
        pp, pm = params.copy(), params.copy()
        pp.arrays[name].flat[1] += h
        pm.arrays[name].flat[1] -= h
        vp = hinge_regularizer(pp, small_norm, items, small_suite[0].channel, cfg, np.random.default_rng(0)).value
        vm = hinge_regularizer(pm, small_norm, items, small_suite[0].channel, cfg, np.random.default_rng(0)).value
        assert res.grads[name].flat[1] == pytest.approx((vp - vm) / (2 * h), rel=1e-5, abs=1e-10)


def test_kappa_zero_equals_dqn_update(small_suite, small_norm):
    batch = _batch(small_suite, small_norm)
    p, t = GnnParams.init(3), GnnParams.init(4)
    a, la = regularized_update(p, t, small_norm, batch, small_suite, 0.95, 1e-2, DefenseConfig(kappa=0.0),
                               np.random.default_rng(0))
    b, lb = dqn_update(p, t, small_norm, batch, small_suite, 0.95, 1e-2)
    assert a.equal(b) and la == lb


def test_regularized_update_changes_params(small_suite, small_norm):
    batch = _batch(small_suite, small_norm)
    p = GnnParams.init(3)
    a, loss = regularized_update(p, p.copy(), small_norm, batch, small_suite, 0.95, 1e-2,
                                 DefenseConfig(inner_steps=3), np.random.default_rng(0))
    assert not a.equal(p) and np.isfinite(loss)


def test_perturbed_rollout_rewards_come_from_truth(small_suite, small_norm):
    sc = small_suite[0]
    cfg = DefenseConfig(kind="adversarial", inner_steps=3)
    exps = perturbed_rollout(GnnParams.init(2), small_norm, sc, 0, cfg, np.random.default_rng(0), RewardConfig())
    assert len(exps) == len(sc.edge_ues)
    perturbed = 0
    for e in exps:
        assert isinstance(e, ObservedExperience)
        a = valid_actions(e.state, sc.P)[e.action]
        nxt, r = sc.step(e.state, a, RewardConfig())
        assert r == e.reward and np.array_equal(nxt.A_u, e.next_state.A_u)
        assert np.array_equal(np.isfinite(e.P_obs), np.isfinite(sc.P))
        fin = np.isfinite(sc.P)
        assert np.abs(e.P_obs[fin] - sc.P[fin]).max() <= max(cfg.pnr_train_range) + 1e-9
        perturbed += not np.array_equal(e.P_obs, sc.P)
    assert perturbed > 0


def test_zero_episodes_returns_unchanged_checkpoint(small_suite, small_norm):
    ck = Checkpoint(GnnParams.init(5), small_norm)
    out = finetune(ck, small_suite, DefenseConfig(finetune_episodes=0))
    assert out.params.equal(ck.params) and out.defense["kind"] == "regularized"


@pytest.mark.parametrize("kind", ["adversarial", "regularized"])
def test_finetune_runs_and_tags_checkpoint(small_suite, small_norm, kind):
    from oran_cm.rl_train import TrainConfig

    ck = Checkpoint(GnnParams.init(5), small_norm)
    cfg = DefenseConfig(kind=kind, finetune_episodes=4, inner_steps=2, reg_states=4)
    out = finetune(ck, small_suite, cfg, TrainConfig(batch_size=8))
    assert out.defense["kind"] == kind and out.defense["config"]["finetune_episodes"] == 4
    assert not out.params.equal(ck.params)
    again = finetune(ck, small_suite, cfg, TrainConfig(batch_size=8))
    assert again.params.equal(out.params)


def test_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(kind="other")
    with pytest.raises(ValueError):
        DefenseConfig(kappa=-1)


def test_regularized_loss_respects_hinge_lower_bound(small_suite, small_norm):
    batch = _batch(small_suite, small_norm)
    p, t = GnnParams.init(3), GnnParams.init(4)
    cfg = DefenseConfig(kappa=2.0, hinge_cap=0.1, inner_steps=3, reg_states=8)
    _, loss = regularized_update(p, t, small_norm, batch, small_suite, 0.95, 0.0, cfg, np.random.default_rng(0))
    _, td = dqn_update(p, t, small_norm, batch, small_suite, 0.95, 0.0)
    assert loss >= td - cfg.kappa * cfg.hinge_cap * cfg.reg_states - 1e-12


def test_zero_pnr_rollout_is_benign(small_suite, small_norm):
    sc = small_suite[0]
    cfg = DefenseConfig(kind="adversarial", pnr_train_range=(0.0,), inner_steps=3)
    exps = perturbed_rollout(GnnParams.init(2), small_norm, sc, 0, cfg, np.random.default_rng(0), RewardConfig())
    assert all(np.array_equal(e.P_obs, sc.P) for e in exps)
