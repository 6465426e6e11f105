"""Targeted PGD evasion attacks on the connection-management policy.

At every episode step the attacker maximizes the log-probability of a target
candidate under the softmax over the K candidate scores, subject to an
L-infinity (or L2) budget, on one of three surfaces:

* ``digital``: additive noise on the normalized GNN input features, one
  perturbation shared by all K candidate graphs;
* ``physical``: additive noise (dB) on the reported entries of the RSRP matrix;
* ``patch``: as physical, restricted to the RSRP columns of a UE subset.

The victim then acts greedily on what it sees, while the environment keeps
evolving under the true RSRP matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import CandidateBatch, candidate_batch, record
from .gnn import GnnParams
from .features import NormStats
from .sim_env import RewardConfig, Scenario

SURFACES = ("digital", "physical", "patch")
MODES = ("whitebox", "blackbox")


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "macro-overload"
    macro_cell: int = 0

    def __post_init__(self):
        if self.kind not in ("macro-overload", "worst-action"):
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass(frozen=True)
class AttackConfig:
    surface: str = "physical"
    p: float = np.inf
    budget: float = 0.0
    steps: int = 20
    step_size: Optional[float] = None  # default 2.5 * budget / steps
    restarts: int = 1
    patch_mask: Optional[frozenset] = None
    mode: str = "whitebox"
    target: TargetSpec = field(default_factory=TargetSpec)
    seed: int = 0

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.budget < 0 or self.steps < 0 or self.restarts < 1:
            raise ValueError("budget and steps must be >= 0, restarts >= 1")
        if self.p not in (np.inf, 2):
            raise ValueError("only p = inf and p = 2 are supported")
        if self.surface == "patch" and not self.patch_mask:
            raise ValueError("patch attack needs a non-empty patch_mask")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.budget / self.steps if self.steps else 0.0


@dataclass
class PerturbationResult:
    delta: object  # dP (N, M) in dB, or (dXc, dXu) on the normalized features
    trace: list
    norm: float
    objective: float
    clean_objective: float
    target: int
    action_before: int
    action_after: int


# ---------------------------------------------------------------------------
# projected gradient ascent


@dataclass
class PgdResult:
    x: np.ndarray
    value: np.ndarray
    trace: list


def _project(delta, budget, p):
    if p == np.inf:
        return np.clip(delta, -budget, budget)
    axes = tuple(range(1, delta.ndim))
    nrm = np.sqrt((delta**2).sum(axis=axes, keepdims=True))
    scale = np.minimum(1.0, budget / np.maximum(nrm, 1e-300))
    return delta * scale


def _ascent_direction(grad, p):
    if p == np.inf:
        return np.sign(grad)
    axes = tuple(range(1, grad.ndim))
    nrm = np.sqrt((grad**2).sum(axis=axes, keepdims=True))
    out = np.zeros_like(grad)
    np.divide(grad, nrm, out=out, where=nrm > 0)
    return out


def pgd_solve(objective: Callable, x_clean, budget, steps: int, step_size, restarts: int = 1,
              rng: Optional[np.random.Generator] = None, mask=None, p=np.inf) -> PgdResult:
    """Maximize ``objective`` over the norm ball of radius ``budget`` around ``x_clean``.

    ``objective(x) -> (values, grad)``. The leading axis of ``x`` is a batch
    axis: ``values`` has one entry per row, each row is projected onto its own
    ball (``budget`` and ``step_size`` may be per-row arrays) and keeps its own
    best iterate. Restart 0 starts at the clean point; later restarts start at
    uniform points of the L-inf box, projected onto the ball. Coordinates
    where ``mask`` is False never move. Ties keep the earliest iterate.
    """
    x_clean = np.asarray(x_clean, dtype=float)
    rows = x_clean.shape[0]
    expand = (rows,) + (1,) * (x_clean.ndim - 1)
    budget = np.broadcast_to(np.asarray(budget, float), (rows,)).reshape(expand)
    alpha = np.broadcast_to(np.asarray(step_size, float), (rows,)).reshape(expand)
    m = np.ones_like(x_clean) if mask is None else np.broadcast_to(mask, x_clean.shape).astype(float)
    rng = rng if rng is not None else np.random.default_rng(0)

    best_x = x_clean.copy()
    best_v = np.full(rows, -np.inf)
    trace = []

    def consider(x, v):
        v = np.atleast_1d(np.asarray(v, float))
        better = v > best_v
        best_x[better] = x[better]
        best_v[better] = v[better]
        trace.append(v.copy())

    for r in range(restarts):
        if r == 0:
            delta = np.zeros_like(x_clean)
        else:
            delta = _project(rng.uniform(-1.0, 1.0, size=x_clean.shape) * budget * m, budget, p) * m
        v, g = objective(x_clean + delta)
        consider(x_clean + delta, v)
        for _ in range(steps):
            delta = _project(delta + alpha * _ascent_direction(np.asarray(g) * m, p), budget, p) * m
            v, g = objective(x_clean + delta)
            consider(x_clean + delta, v)
    return PgdResult(best_x, best_v, trace)


# ---------------------------------------------------------------------------
# target selection and per-step objectives


def select_target(actions: Sequence, probs: np.ndarray, spec: TargetSpec, macro_cells=None) -> int:
    """Index of the attacker's target candidate."""
    if len(actions) == 0:
        raise ValueError("no candidate actions")
    probs = np.asarray(probs, float)[: len(actions)]
    if spec.kind == "macro-overload":
        if macro_cells is not None and spec.macro_cell not in macro_cells:
            raise ValueError(f"cell {spec.macro_cell} is not a macro cell")
        for k, a in enumerate(actions):
            if a.cell_id == spec.macro_cell:
                return k
    return int(np.argmin(probs))


def _onehot_cotangent(tape, target):
    dq = -tape.probs.copy()
    dq[:, target] += 1.0
    return np.where(tape.batch.mask, dq, 0.0)


def physical_mask(batch: CandidateBatch, patch_mask=None) -> np.ndarray:
    mask = np.isfinite(batch.P[0])
    if patch_mask is not None:
        cols = np.zeros(mask.shape[1], dtype=bool)
        cols[sorted(patch_mask)] = True
        mask &= cols[None, :]
    return mask


def physical_step(params: GnnParams, norm: NormStats, batch: CandidateBatch, cfg: AttackConfig,
                  target: int, rng) -> PgdResult:
    """PGD over dP for one state; returns the best dP (N, M)."""
    mask = physical_mask(batch, cfg.patch_mask if cfg.surface == "patch" else None)

    def objective(dP):
        tape = record(params, norm, batch, dP=dP)
        g = tape.backward(_onehot_cotangent(tape, target), wrt=("P",))["P"]
        return tape.logp[:, target], g

    res = pgd_solve(objective, np.zeros((1,) + mask.shape), cfg.budget, cfg.steps, cfg.alpha,
                    cfg.restarts, rng, mask[None], cfg.p)
    res.x = np.where(mask, res.x[0], 0.0)
    return res


def digital_step(params: GnnParams, norm: NormStats, batch: CandidateBatch, cfg: AttackConfig,
                 target: int, rng) -> PgdResult:
    """PGD over a normalized-feature perturbation shared by all candidates."""
    N, M = batch.P.shape[1:]
    n_c = N * 4

    def objective(flat):
        dXc = flat[:, :n_c].reshape(1, N, 4)
        dXu = flat[:, n_c:].reshape(1, M, 2)
        tape = record(params, norm, batch, dXc=dXc, dXu=dXu)
        gc, gu = tape.backward(_onehot_cotangent(tape, target), wrt=("features",))["features"]
        return tape.logp[:, target], np.concatenate([gc.reshape(1, -1), gu.reshape(1, -1)], axis=1)

    res = pgd_solve(objective, np.zeros((1, n_c + 2 * M)), cfg.budget, cfg.steps, cfg.alpha,
                    cfg.restarts, rng, None, cfg.p)
    flat = res.x[0]
    res.x = (flat[:n_c].reshape(N, 4), flat[n_c:].reshape(M, 2))
    return res


def perturbed_scores(params, norm, batch: CandidateBatch, surface: str, delta) -> np.ndarray:
    if delta is None:
        return record(params, norm, batch).q[0]
    if surface == "digital":
        dXc, dXu = delta
        return record(params, norm, batch, dXc=dXc[None], dXu=dXu[None]).q[0]
    return record(params, norm, batch, dP=delta[None]).q[0]


def attack_state(victim: GnnParams, norm: NormStats, batch: CandidateBatch, cfg: AttackConfig, rng,
                 macro_cells=None, attacker: Optional[GnnParams] = None) -> PerturbationResult:
    """Attack one state (a single-state candidate batch).

    ``attacker`` is the model whose gradients drive PGD (the victim itself for
    white-box, a surrogate for black-box); the victim's greedy choice on the
    perturbed input is reported.
    """
    attacker = victim if attacker is None else attacker
    if not attacker.same_architecture(victim):
        raise ArchitectureMismatch("surrogate and victim architectures differ")
    if norm is None:
        raise ValueError("attack needs the model's normalization statistics")
    if cfg.surface == "physical" and cfg.patch_mask is not None:
        raise ValueError("patch_mask is only valid for the patch surface")
    actions = batch.actions[0]
    n = len(actions)
    clean_tape = record(attacker, norm, batch)
    target = select_target(actions, clean_tape.probs[0], cfg.target, macro_cells)
    victim_tape = clean_tape if attacker is victim else record(victim, norm, batch)
    before = int(np.argmax(victim_tape.q[0, :n]))
    clean_obj = float(clean_tape.logp[0, target])
    if cfg.budget == 0 or cfg.steps == 0 or n == 1:
        zero = (np.zeros((batch.P.shape[1], 4)), np.zeros((batch.P.shape[2], 2))) if cfg.surface == "digital" \
            else np.zeros(batch.P.shape[1:])
        return PerturbationResult(zero, [clean_obj], 0.0, clean_obj, clean_obj, target, before, before)
    step = digital_step if cfg.surface == "digital" else physical_step
    res = step(attacker, norm, batch, cfg, target, rng)
    scores = perturbed_scores(victim, norm, batch, cfg.surface, res.x)
    if cfg.surface == "digital":
        achieved = max(np.abs(res.x[0]).max(), np.abs(res.x[1]).max())
    else:
        achieved = float(np.abs(res.x).max())
    return PerturbationResult(
        res.x, [float(v[0]) for v in res.trace], float(achieved), float(res.value[0]), clean_obj, target,
        before, int(np.argmax(scores[:n])),
    )


@dataclass
class AttackedEpisode:
    final_state: object
    steps: list  # PerturbationResult per episode step
    reward: float


def attacked_episode(victim: GnnParams, norm: NormStats, scenario: Scenario, cfg: AttackConfig,
                     reward_cfg: RewardConfig = RewardConfig(), surrogate: Optional[GnnParams] = None) -> AttackedEpisode:
    """Greedy victim episode with a fresh PGD attack at every step.

    Transitions and rewards come from the true RSRP matrix.
    """
    if cfg.mode == "blackbox" and surrogate is None:
        raise ValueError("black-box attack needs a surrogate model")
    attacker = surrogate if cfg.mode == "blackbox" else victim
    rng = np.random.default_rng(cfg.seed)
    state = scenario.initial_state()
    steps, total = [], 0.0
    macros = scenario.macro_cells
    while not state.terminal:
        actions = scenario.valid_actions(state)
        batch = candidate_batch([(scenario.P, state, actions)], scenario.channel)
        res = attack_state(victim, norm, batch, cfg, rng, macros, attacker)
        state, r = scenario.step(state, actions[res.action_after], reward_cfg)
        steps.append(res)
        total += r
    return AttackedEpisode(state, steps, total)


def digital_attack(params, norm, batch, cfg: AttackConfig, rng=None, macro_cells=None) -> PerturbationResult:
    if cfg.surface != "digital":
        raise ValueError("digital_attack needs surface='digital'")
    return attack_state(params, norm, batch, cfg, rng or np.random.default_rng(cfg.seed), macro_cells)


def physical_attack(params, norm, scenario: Scenario, cfg: AttackConfig, reward_cfg=RewardConfig()) -> AttackedEpisode:
    if cfg.surface != "physical":
        raise ValueError("physical_attack needs surface='physical'")
    return attacked_episode(params, norm, scenario, cfg, reward_cfg)


def patch_attack(params, norm, scenario: Scenario, cfg: AttackConfig, reward_cfg=RewardConfig()) -> AttackedEpisode:
    if cfg.surface != "patch":
        raise ValueError("patch_attack needs surface='patch'")
    if not cfg.patch_mask or not set(cfg.patch_mask) <= set(range(scenario.M)):
        raise ValueError("patch_mask must be a non-empty subset of the UE ids")
    return attacked_episode(params, norm, scenario, cfg, reward_cfg)


def blackbox_transfer(victim, surrogate, norm, scenario: Scenario, cfg: AttackConfig,
                      reward_cfg=RewardConfig()) -> AttackedEpisode:
    if not surrogate.same_architecture(victim):
        raise ArchitectureMismatch("surrogate and victim architectures differ")
    from dataclasses import replace

    return attacked_episode(victim, norm, scenario, replace(cfg, mode="blackbox"), reward_cfg, surrogate)
