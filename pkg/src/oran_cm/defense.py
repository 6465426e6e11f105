"""Robust training against RSRP perturbations.

Two fine-tuning procedures for a trained checkpoint:

* adversarial fine-tuning: benign and attacked episodes alternate; in an
  attacked episode the policy acts on a PGD-perturbed RSRP matrix while
  rewards and transitions come from the true one, and the perturbed
  observation is what gets replayed;
* regularized fine-tuning: the TD loss plus ``kappa`` times a hinge penalty on
  the worst-case (over an L-inf ball of RSRP noise) gap between the best
  competing action and the benign top-1 action.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import gnn
from .attacks import AttackConfig, TargetSpec, physical_step, select_target
from .chain import candidate_batch, record
from .checkpoint import Checkpoint
from .rl_train import (
    Experience, ReplayBuffer, TrainConfig, clip_grads, greedy_suite_rates, coverage_rate,
    policy_scores, rollout_episode, td_loss_and_grads, _gnn_inputs,
)
from .sim_env import RewardConfig, Scenario, valid_actions

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "regularized"
    pnr_train_range: tuple = (3.0, 6.0, 9.0, 12.0, 15.0)
    kappa: float = 0.5
    hinge_cap: float = 0.5
    inner_steps: int = 10
    inner_restarts: int = 1
    use_probs: bool = True  # Q-bar as softmax probabilities; False uses raw scores
    reg_states: int = 8  # states of each minibatch that enter the regularizer
    finetune_episodes: int = 200
    explore_eps: float = 0.05
    lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adversarial", "regularized"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kappa < 0 or self.hinge_cap < 0:
            raise ValueError("kappa and hinge_cap must be non-negative")
        if len(self.pnr_train_range) == 0:
            raise ValueError("pnr_train_range must be non-empty")


# ---------------------------------------------------------------------------
# hinge regularizer


def _margin_and_cotangent(q, mask, a_star, use_probs):
    """Worst competitor gap ``max_{a != a*} Qbar_a - Qbar_{a*}`` and d gap / d q."""
    S, K = q.shape
    rows = np.arange(S)
    if use_probs:
        vals = gnn.softmax(q, mask)
    else:
        vals = np.where(mask, q, -np.inf)
    others = np.where(mask, vals, -np.inf)
    others[rows, a_star] = -np.inf
    a_hat = np.argmax(others, axis=1)
    margin = vals[rows, a_hat] - vals[rows, a_star]
    e = np.zeros((S, K))
    e[rows, a_hat] += 1.0
    e[rows, a_star] -= 1.0
    if use_probs:
        # d p_i / d q_j = p_i (delta_ij - p_j)
        dq = vals * e - vals * (vals * e).sum(axis=1, keepdims=True)
    else:
        dq = e
    return margin, np.where(mask, dq, 0.0)


@dataclass
class HingeResult:
    value: float
    grads: dict
    margins: np.ndarray  # worst-case margin per regularized state
    terms: np.ndarray  # max(margin, -hinge_cap) per regularized state


def hinge_regularizer(params, norm, items: Sequence[tuple], channel, cfg: DefenseConfig,
                      rng: np.random.Generator, budgets=None) -> HingeResult:
    """Sum over states of ``max(worst-case margin, -hinge_cap)`` and its gradient.

    ``items`` are ``(P, state, actions)`` triples; states with fewer than two
    candidates are skipped. ``budgets`` (dB, one per kept state) defaults to
    draws from ``cfg.pnr_train_range``. The gradient w.r.t. the parameters is
    taken at the PGD worst case, which is held fixed.
    """
    kept = [it for it in items if len(it[2]) >= 2]
    if not kept:
        return HingeResult(0.0, gnn.zero_grads(params), np.zeros(0), np.zeros(0))
    batch = candidate_batch(kept, channel)
    S = batch.S
    if budgets is None:
        budgets = rng.choice(np.asarray(cfg.pnr_train_range, float), size=S)
    budgets = np.broadcast_to(np.asarray(budgets, float), (S,))
    a_star = np.argmax(np.where(batch.mask, record(params, norm, batch).q, -np.inf), axis=1)
    mask = np.isfinite(batch.P)

    from .attacks import pgd_solve

    def objective(dP):
        tape = record(params, norm, batch, dP=dP)
        margin, dq = _margin_and_cotangent(tape.q, batch.mask, a_star, cfg.use_probs)
        return margin, tape.backward(dq, wrt=("P",))["P"]

    alpha = 2.5 * budgets / cfg.inner_steps if cfg.inner_steps else np.zeros(S)
    res = pgd_solve(objective, np.zeros(batch.P.shape), budgets, cfg.inner_steps, alpha,
                    cfg.inner_restarts, rng, mask, np.inf)
    tape = record(params, norm, batch, dP=res.x)
    margin, dq = _margin_and_cotangent(tape.q, batch.mask, a_star, cfg.use_probs)
    terms = np.maximum(margin, -cfg.hinge_cap)
    active = margin > -cfg.hinge_cap
    grads = tape.backward(dq * active[:, None], wrt=("params",))["params"]
    return HingeResult(float(terms.sum()), grads, margin, terms)


def _experience_items(batch: Sequence[Experience], scenarios):
    items = []
    for e in batch:
        P = scenarios[e.scenario].P
        items.append((P, e.state, valid_actions(e.state, P)))
    return items


def regularized_update(params, target_params, norm, batch, scenarios, gamma, lr, cfg: DefenseConfig,
                       rng: np.random.Generator, reward_scale: float = 1e8, grad_clip: float = 0.0):
    """TD-MSE + kappa * hinge penalty, one SGD step. Returns ``(params, loss)``."""
    from .rl_train import dqn_update

    if cfg.kappa == 0:
        return dqn_update(params, target_params, norm, batch, scenarios, gamma, lr, reward_scale, grad_clip)
    td, grads = td_loss_and_grads(params, target_params, norm, batch, scenarios, gamma, reward_scale)
    reg_batch = list(batch)[: cfg.reg_states] if cfg.reg_states else list(batch)
    hinge = hinge_regularizer(params, norm, _experience_items(reg_batch, scenarios), scenarios[0].channel, cfg, rng)
    total = {k: g + cfg.kappa * hinge.grads[k] for k, g in grads.items()}
    loss = td + cfg.kappa * hinge.value
    if lr == 0:
        return params.copy(), loss
    return params.axpy(-lr, clip_grads(total, grad_clip)), loss


# ---------------------------------------------------------------------------
# perturbed rollouts


@dataclass(frozen=True)
class ObservedExperience(Experience):
    """Experience whose Q(s, a) input is built from an observed (perturbed) RSRP matrix."""

    P_obs: Optional[np.ndarray] = None


def perturbed_rollout(params, norm, scenario: Scenario, scenario_index: int, cfg: DefenseConfig,
                      rng: np.random.Generator, reward_cfg: RewardConfig, target=TargetSpec()):
    """Episode where the policy acts on a PGD-perturbed RSRP matrix at every step."""
    state = scenario.initial_state()
    exps = []
    while not state.terminal:
        actions = scenario.valid_actions(state)
        batch = candidate_batch([(scenario.P, state, actions)], scenario.channel)
        pnr = float(rng.choice(np.asarray(cfg.pnr_train_range, float)))
        P_obs = scenario.P
        if pnr > 0 and len(actions) > 1:
            probs = record(params, norm, batch).probs[0]
            t = select_target(actions, probs, target, scenario.macro_cells)
            acfg = AttackConfig(surface="physical", budget=pnr, steps=cfg.inner_steps, target=target)
            dP = physical_step(params, norm, batch, acfg, t, rng).x
            P_obs = np.where(np.isfinite(scenario.P), scenario.P + dP, -np.inf)
        if rng.random() < cfg.explore_eps:
            k = int(rng.integers(len(actions)))
        else:
            k = int(np.argmax(policy_scores(params, norm, P_obs, state, actions, scenario.channel)))
        nxt, r = scenario.step(state, actions[k], reward_cfg)
        exps.append(ObservedExperience(scenario_index, state, k, r, nxt, nxt.terminal, P_obs=P_obs))
        state = nxt
    return exps


def _prime_observed(exp: Experience, norm, scenarios):
    """Replace the Q(s, a) input of an observed experience by its perturbed view."""
    if not isinstance(exp, ObservedExperience) or exp.P_obs is None or id(norm) in exp.cache:
        return
    from .rl_train import _cached_inputs

    _, nxt_in = _cached_inputs(exp, norm, scenarios)
    sc = scenarios[exp.scenario]
    q_in = _gnn_inputs(record(gnn.GnnParams.zeros(), norm, candidate_batch([(exp.P_obs, exp.next_state, [])], sc.channel)))
    exp.cache[id(norm)] = (q_in, nxt_in)


def finetune(ckpt: Checkpoint, scenarios: Sequence[Scenario], cfg: DefenseConfig,
             train_cfg: TrainConfig = TrainConfig(), keep_best: bool = False) -> Checkpoint:
    """Fine-tune ``ckpt`` with the defense selected by ``cfg.kind``.

    Adversarial: benign and perturbed episodes alternate 1:1 and plain DQN
    updates are applied. Regularized: benign episodes with regularized
    updates. Zero episodes return the checkpoint unchanged.
    """
    meta = {"kind": cfg.kind, "config": asdict(cfg)}
    if cfg.finetune_episodes == 0:
        return replace(ckpt, params=ckpt.params.copy(), defense=meta)
    from .rl_train import dqn_update

    rng = np.random.default_rng(cfg.seed)
    params = ckpt.params.copy()
    target = params.copy()
    norm = ckpt.norm
    reward_cfg = ckpt.reward
    buffer = ReplayBuffer(train_cfg.capacity, rng)
    updates = 0
    best = (-np.inf, params.copy())
    eval_every = max(1, train_cfg.eval_every)
    for ep in range(cfg.finetune_episodes):
        k = int(rng.integers(len(scenarios)))
        if cfg.kind == "adversarial" and ep % 2 == 1:
            exps = perturbed_rollout(params, norm, scenarios[k], k, cfg, rng, reward_cfg)
        else:
            exps, _, _ = rollout_episode(params, norm, scenarios[k], cfg.explore_eps, rng, reward_cfg, k)
        for exp in exps:
            _prime_observed(exp, norm, scenarios)
            buffer.push(exp)
            if len(buffer) < train_cfg.batch_size:
                continue
            batch = buffer.sample(train_cfg.batch_size)
            if cfg.kind == "regularized":
                params, _ = regularized_update(params, target, norm, batch, scenarios, train_cfg.gamma, cfg.lr,
                                               cfg, rng, train_cfg.reward_scale, train_cfg.grad_clip)
            else:
                params, _ = dqn_update(params, target, norm, batch, scenarios, train_cfg.gamma, cfg.lr,
                                       train_cfg.reward_scale, train_cfg.grad_clip)
            updates += 1
            if updates % train_cfg.target_sync == 0:
                target = params.copy()
        if keep_best and ((ep + 1) % eval_every == 0 or ep + 1 == cfg.finetune_episodes):
            cov = coverage_rate(np.concatenate(greedy_suite_rates(params, norm, scenarios, reward_cfg)))
            if cov > best[0]:
                best = (cov, params.copy())
            log.info("finetune %s episode %d coverage %.4g", cfg.kind, ep + 1, cov)
    final = best[1] if keep_best else params
    return replace(ckpt, params=final, defense=meta)
