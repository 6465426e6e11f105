"""Deep Q-learning of the graph scorer.

Q(s, a) is the score of the candidate graph obtained by applying ``a`` to
``s``, i.e. the graph of the next state. Rewards are divided by
``TrainConfig.reward_scale`` before entering the TD target so the scorer
works in O(1) units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import candidate_batch, candidate_features, record
from .features import NormStats, fit_norm
from . import gnn
from .gnn import GnnParams
from .sim_env import GraphState, RewardConfig, Scenario, valid_actions

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Experience:
    scenario: int  # index into the training suite; P is looked up, not copied
    state: GraphState
    action: int
    reward: float
    next_state: GraphState
    terminal: bool
    # derived GNN inputs, filled on first replay (keyed by NormStats identity)
    cache: dict = field(default_factory=dict, compare=False, repr=False)


class ReplayBuffer:
    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.items: list[Experience] = []
        self.position = 0

    def push(self, exp: Experience):
        if len(self.items) < self.capacity:
            self.items.append(exp)
        else:
            self.items[self.position] = exp
        self.position = (self.position + 1) % self.capacity

    def sample(self, batch_size: int) -> list[Experience]:
        n = min(batch_size, len(self.items))
        idx = self.rng.choice(len(self.items), size=n, replace=False)
        return [self.items[i] for i in idx]

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    batch_size: int = 32
    lr: float = 1e-3
    target_sync: int = 100
    capacity: int = 10_000
    reward_scale: float = 1e8
    grad_clip: float = 10.0
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.eps_end > self.eps_start:
            raise ValueError("epsilon schedule must be non-increasing")
        if self.episodes < 0 or self.batch_size < 1:
            raise ValueError("bad episode/batch counts")

    def epsilon(self, episode: int) -> float:
        decay = max(1, int(self.eps_decay_frac * self.episodes))
        frac = min(1.0, episode / decay)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def policy_scores(params: GnnParams, norm: NormStats, P, state: GraphState, actions, channel) -> np.ndarray:
    batch = candidate_batch([(P, state, actions)], channel)
    return record(params, norm, batch).q[0, : len(actions)]


def greedy_chooser(params, norm, scenario: Scenario) -> Callable:
    def choose(state, actions):
        return int(np.argmax(policy_scores(params, norm, scenario.P, state, actions, scenario.channel)))

    return choose


def run_episode(scenario: Scenario, choose: Callable, reward_cfg: RewardConfig):
    """Play one episode; ``choose(state, actions) -> index``.

    Returns ``(transitions, final_state)`` with transitions as
    ``(state, action_index, reward, next_state)``. Rewards always come from
    the true scenario.
    """
    state = scenario.initial_state()
    transitions = []
    while not state.terminal:
        actions = scenario.valid_actions(state)
        k = choose(state, actions)
        nxt, r = scenario.step(state, actions[k], reward_cfg)
        transitions.append((state, k, r, nxt))
        state = nxt
    return transitions, state


def rollout_episode(params, norm, scenario: Scenario, explore_eps: float, rng: np.random.Generator,
                    reward_cfg: RewardConfig, scenario_index: int = 0):
    """Epsilon-greedy episode. Returns ``(experiences, metrics)``."""

    def choose(state, actions):
        if rng.random() < explore_eps:
            return int(rng.integers(len(actions)))
        return int(np.argmax(policy_scores(params, norm, scenario.P, state, actions, scenario.channel)))

    transitions, final = run_episode(scenario, choose, reward_cfg)
    exps = [Experience(scenario_index, s, k, r, n, n.terminal) for s, k, r, n in transitions]
    metrics = {"return": float(sum(r for _, _, r, _ in transitions)), "length": len(transitions)}
    return exps, metrics, final


def _gnn_inputs(tape):
    """Flattened (Xc, Xu, A_c, A_u) of the graphs on a tape, one row per candidate."""
    b = tape.batch
    S, K = b.S, b.K
    N, M = b.P.shape[1:]
    A_c = np.broadcast_to(b.A_c[:, None], (S, K, N, N))
    return (tape.Xc.reshape(S * K, N, 4), tape.Xu.reshape(S * K, M, 2),
            A_c.reshape(S * K, N, N), b.A_u.reshape(S * K, N, M))


def _cached_inputs(exp: Experience, norm, scenarios):
    key = id(norm)
    hit = exp.cache.get(key)
    if hit is None:
        sc = scenarios[exp.scenario]
        q_in = _gnn_inputs(record(GnnParams.zeros(), norm, candidate_batch([(sc.P, exp.next_state, [])], sc.channel)))
        nxt_in = None
        if not exp.terminal:
            acts = valid_actions(exp.next_state, sc.P)
            nxt_in = _gnn_inputs(record(GnnParams.zeros(), norm, candidate_batch([(sc.P, exp.next_state, acts)], sc.channel)))
        exp.cache.clear()
        hit = exp.cache[key] = (q_in, nxt_in)
    return hit


def _stack(parts):
    return tuple(np.concatenate(col) for col in zip(*parts))


def td_targets(target_params, norm, batch: Sequence[Experience], scenarios, gamma: float, reward_scale: float):
    y = np.array([e.reward / reward_scale for e in batch])
    live = [i for i, e in enumerate(batch) if not e.terminal]
    if live:
        parts = [_cached_inputs(batch[i], norm, scenarios)[1] for i in live]
        q = gnn.forward(target_params, *_stack(parts))
        owner = np.repeat(np.arange(len(live)), [p[0].shape[0] for p in parts])
        best = np.full(len(live), -np.inf)
        np.maximum.at(best, owner, q)
        y[live] += gamma * best
    return y


def clip_grads(grads: dict, max_norm: float) -> dict:
    if not max_norm:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def td_loss_and_grads(params, target_params, norm, batch, scenarios, gamma, reward_scale):
    if not batch:
        raise ValueError("empty batch")
    y = td_targets(target_params, norm, batch, scenarios, gamma, reward_scale)
    inputs = _stack([_cached_inputs(e, norm, scenarios)[0] for e in batch])
    q, cache = gnn.forward(params, *inputs, keep_cache=True)
    err = q - y
    loss = float(np.mean(err**2))
    grads, _, _ = gnn.backward(params, cache, 2.0 * err / len(batch), want_inputs=False)
    return loss, grads


def dqn_update(params, target_params, norm, batch, scenarios, gamma: float, lr: float,
               reward_scale: float = 1e8, grad_clip: float = 0.0):
    """One plain-SGD step on the mean squared TD error. Returns ``(params, loss)``."""
    loss, grads = td_loss_and_grads(params, target_params, norm, batch, scenarios, gamma, reward_scale)
    if lr == 0:
        return params.copy(), loss
    return params.axpy(-lr, clip_grads(grads, grad_clip)), loss


# ---------------------------------------------------------------------------
# normalization over the benign suite


def maxrsrp_choice(P, actions) -> int:
    vals = [P[a.cell_id, a.ue_id] for a in actions]
    return int(np.argmax(vals))


def fit_scenario_norm(scenarios: Sequence[Scenario], seed: int = 0, random_rollouts: int = 4) -> NormStats:
    """Min/max of candidate features seen along maxRSRP and random trajectories."""
    rng = np.random.default_rng(seed)
    suite = []
    for sc in scenarios:
        choosers = [lambda s, acts, P=sc.P: maxrsrp_choice(P, acts)]
        choosers += [lambda s, acts: int(rng.integers(len(acts)))] * random_rollouts
        for choose in choosers:
            state = sc.initial_state()
            while not state.terminal:
                acts = sc.valid_actions(state)
                suite.append(candidate_features(sc.P, state, acts, sc.channel))
                state, _ = sc.step(state, acts[choose(state, acts)], RewardConfig(0.0))
    return fit_norm(suite)


# ---------------------------------------------------------------------------
# evaluation helpers shared with the harness


def coverage_rate(rates) -> float:
    """Nearest-rank 5th percentile: element ceil(0.05 n) (1-based) of the sorted rates."""
    r = np.sort(np.asarray(rates, dtype=float).ravel())
    if r.size == 0:
        raise ValueError("coverage of an empty rate set")
    rank = int(np.ceil(0.05 * r.size))
    return float(r[max(rank, 1) - 1])


def greedy_suite_rates(params, norm, scenarios, reward_cfg) -> list[np.ndarray]:
    out = []
    for sc in scenarios:
        _, final = run_episode(sc, greedy_chooser(params, norm, sc), reward_cfg)
        out.append(sc.rates(final))
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: GnnParams
    norm: NormStats
    log: list = field(default_factory=list)  # rows: episode, return, loss, eval_coverage
    updates: int = 0


def train(scenarios: Sequence[Scenario], cfg: TrainConfig, reward_cfg: RewardConfig = RewardConfig(),
          norm: Optional[NormStats] = None, params: Optional[GnnParams] = None,
          on_episode: Optional[Callable] = None, keep_best: bool = True) -> TrainResult:
    """Interleave epsilon-greedy rollouts and DQN updates.

    Every ``eval_every`` episodes (and after the last one) the greedy policy is
    evaluated on the suite; the log's ``eval_coverage`` holds the latest value.
    With ``keep_best`` the returned params are the evaluated snapshot with the
    highest pooled coverage.
    """
    rng = np.random.default_rng(cfg.seed)
    if norm is None:
        norm = fit_scenario_norm(scenarios, seed=cfg.seed)
    if params is None:
        params = GnnParams.init(cfg.seed)
    result = TrainResult(params.copy(), norm)
    if cfg.episodes == 0:
        return result
    target = params.copy()
    buffer = ReplayBuffer(cfg.capacity, rng)
    updates = 0
    eval_cov = float("nan")
    best = (-np.inf, params.copy())

    def evaluate(p):
        rates = greedy_suite_rates(p, norm, scenarios, reward_cfg)
        return coverage_rate(np.concatenate(rates))

    for ep in range(cfg.episodes):
        k = int(rng.integers(len(scenarios)))
        exps, metrics, _ = rollout_episode(params, norm, scenarios[k], cfg.epsilon(ep), rng, reward_cfg, k)
        losses = []
        for exp in exps:
            buffer.push(exp)
            if len(buffer) < cfg.batch_size:
                continue
            batch = buffer.sample(cfg.batch_size)
            params, loss = dqn_update(params, target, norm, batch, scenarios, cfg.gamma, cfg.lr,
                                      cfg.reward_scale, cfg.grad_clip)
            losses.append(loss)
            updates += 1
            if updates % cfg.target_sync == 0:
                target = params.copy()
        if (ep + 1) % cfg.eval_every == 0 or ep + 1 == cfg.episodes:
            eval_cov = evaluate(params)
            if eval_cov > best[0]:
                best = (eval_cov, params.copy())
            log.info("episode %d eps=%.3f eval_coverage=%.4g", ep + 1, cfg.epsilon(ep), eval_cov)
        row = {
            "episode": ep,
            "return": metrics["return"],
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "eval_coverage": eval_cov,
        }
        result.log.append(row)
        if on_episode:
            on_episode(row)
    result.params = best[1] if keep_best else params
    result.updates = updates
    return result


def config_dict(cfg) -> dict:
    return asdict(cfg)
