"""Deployment generation and the episodic connection-management environment.

A scenario is a set of cells and UEs in a rectangle, a frozen RSRP matrix ``P``
(dBm, ``-inf`` for links a UE does not report) and the edge/center split of the
UEs. Episodes start from the graph where every cell-center UE is attached to
its strongest cell and connect the cell-edge UEs one per step, in UE-id order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

MACRO = "macro"
SMALL = "small"
CELL_CENTER = "cell-center"
CELL_EDGE = "cell-edge"


class InfeasibleScenario(RuntimeError):
    pass


class EpisodeFinished(RuntimeError):
    pass


class InvalidAction(ValueError):
    pass


@dataclass(frozen=True)
class CellSite:
    id: int
    position: tuple[float, float]
    kind: str
    tx_power: float


@dataclass(frozen=True)
class UserEquipment:
    id: int
    position: tuple[float, float]
    klass: Optional[str] = None


@dataclass(frozen=True)
class ChannelParams:
    pl0: float = 40.0
    n: float = 3.0
    shadow_sigma: float = 6.0
    noise_floor: float = -104.0
    bandwidth: float = 100e6
    visibility_floor: float = -110.0
    top_k_reports: int = 3

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError("path-loss exponent must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.shadow_sigma < 0:
            raise ValueError("shadow_sigma must be non-negative")
        if self.top_k_reports < 1:
            raise ValueError("top_k_reports must be >= 1")


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights.

    ``utility`` selects the throughput term U(G): ``"log"`` is the
    proportional-fair ``ref_rate * sum_j ln(R_j / ref_rate)`` over connected
    UEs, ``"sum"`` the plain sum of served rates.
    """

    lam: float = 0.2
    utility: str = "log"
    ref_rate: float = 1e8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.utility not in ("log", "sum"):
            raise ValueError(f"unknown utility {self.utility!r}")
        if not self.ref_rate > 0:
            raise ValueError("ref_rate must be positive")


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    N: int = 6
    M: int = 50
    area: tuple[float, float] = (1000.0, 1000.0)
    n_macro: int = 2
    macro_tx_power: float = 46.0
    small_tx_power: float = 30.0
    channel: ChannelParams = field(default_factory=ChannelParams)
    edge_gap_threshold: float = 6.0
    cell_virtual_edge_dist: float = 500.0
    # explicit geometry; sampled from the seed when left as None
    cells: Optional[tuple[CellSite, ...]] = None
    ues: Optional[tuple[UserEquipment, ...]] = None

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("need at least one cell and one UE")
        if not 0 <= self.n_macro <= self.N:
            raise ValueError("n_macro must be within [0, N]")


@dataclass(frozen=True)
class GraphState:
    """Topology snapshot. Arrays are never mutated in place."""

    A_c: np.ndarray
    A_u: np.ndarray
    unconnected: tuple[int, ...]
    t: int = 0

    @property
    def terminal(self) -> bool:
        return len(self.unconnected) == 0


@dataclass(frozen=True)
class Action:
    ue_id: int
    cell_id: int


# ---------------------------------------------------------------------------
# channel


def path_loss_rsrp(tx_power, distance, channel: ChannelParams, shadowing=0.0):
    """RSRP in dBm under log-distance path loss with reference distance 1 m."""
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    return tx_power - (channel.pl0 + 10.0 * channel.n * np.log10(d)) + shadowing


def _mask_reports(column: np.ndarray, channel: ChannelParams) -> np.ndarray:
    out = np.full_like(column, -np.inf)
    visible = np.flatnonzero(column >= channel.visibility_floor)
    if visible.size == 0:
        return out
    # stable sort on the negated value keeps the lowest cell id on ties
    order = visible[np.argsort(-column[visible], kind="stable")]
    keep = order[: channel.top_k_reports]
    out[keep] = column[keep]
    return out


def generate_deployment(spec: ScenarioSpec):
    """Place cells and UEs and compute the frozen RSRP matrix.

    Returns ``(cells, ues, P)``. A UE that sees no cell above the visibility
    floor is re-drawn (position and shadowing) up to 100 times.
    """
    rng = np.random.default_rng(spec.seed)
    ch = spec.channel
    width, height = spec.area
    N, M = spec.N, spec.M

    if spec.cells is None:
        xy = rng.uniform((0.0, 0.0), (width, height), size=(N, 2))
        cells = tuple(
            CellSite(
                id=i,
                position=(float(xy[i, 0]), float(xy[i, 1])),
                kind=MACRO if i < spec.n_macro else SMALL,
                tx_power=spec.macro_tx_power if i < spec.n_macro else spec.small_tx_power,
            )
            for i in range(N)
        )
    else:
        cells = tuple(spec.cells)
        if len(cells) != N:
            raise ValueError("len(cells) != N")
    cell_xy = np.array([c.position for c in cells], dtype=float)
    tx = np.array([c.tx_power for c in cells], dtype=float)

    fixed_ues = spec.ues is not None
    if fixed_ues:
        ues = list(spec.ues)
        if len(ues) != M:
            raise ValueError("len(ues) != M")
        ue_xy = np.array([u.position for u in ues], dtype=float)
    else:
        ue_xy = rng.uniform((0.0, 0.0), (width, height), size=(M, 2))
    shadow = rng.normal(0.0, ch.shadow_sigma, size=(N, M)) if ch.shadow_sigma > 0 else np.zeros((N, M))

    P = np.empty((N, M))
    for j in range(M):
        for attempt in range(101):
            d = np.hypot(*(cell_xy - ue_xy[j]).T)
            column = _mask_reports(path_loss_rsrp(tx, d, ch, shadow[:, j]), ch)
            if np.isfinite(column).any():
                break
            if fixed_ues or attempt == 100:
                raise InfeasibleScenario(f"infeasible scenario: UE {j} sees no cell")
            ue_xy[j] = rng.uniform((0.0, 0.0), (width, height))
            if ch.shadow_sigma > 0:
                shadow[:, j] = rng.normal(0.0, ch.shadow_sigma, size=N)
        P[:, j] = column

    ues = tuple(UserEquipment(id=j, position=(float(ue_xy[j, 0]), float(ue_xy[j, 1]))) for j in range(M))
    return cells, ues, P


def capacity(P: np.ndarray, channel: ChannelParams) -> np.ndarray:
    """Shannon capacity W*log2(1+SNR) per link; 0 on unreported links."""
    finite = np.isfinite(P)
    snr_db = np.where(finite, P - channel.noise_floor, 0.0)
    C = channel.bandwidth * np.log2(1.0 + 10.0 ** (snr_db / 10.0))
    return np.where(finite, C, 0.0)


def cell_load(A_u: np.ndarray) -> np.ndarray:
    return A_u.sum(axis=-1)


def capacity_and_rate(P: np.ndarray, A_u: np.ndarray, channel: ChannelParams):
    """Capacity matrix ``C`` and served-rate matrix ``R = C / max(1, load)``."""
    C = capacity(P, channel)
    R = C / np.maximum(cell_load(A_u), 1.0)[..., :, None]
    return C, R


def classify_ues(P: np.ndarray, edge_gap_threshold: float) -> list[str]:
    """Cell-edge iff the best two reported RSRPs are closer than the threshold."""
    klass = []
    for j in range(P.shape[1]):
        col = np.sort(P[:, j][np.isfinite(P[:, j])])[::-1]
        if col.size >= 2 and (col[0] - col[1]) < edge_gap_threshold:
            klass.append(CELL_EDGE)
        else:
            klass.append(CELL_CENTER)
    return klass


def best_cell(P: np.ndarray, ue: int) -> int:
    # np.argmax returns the first maximum, i.e. the lowest cell id on ties
    return int(np.argmax(P[:, ue]))


def cell_adjacency(cells, threshold: float) -> np.ndarray:
    xy = np.array([c.position for c in cells], dtype=float)
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    A_c = (dist < threshold).astype(float)
    np.fill_diagonal(A_c, 0.0)
    return A_c


def initial_graph(cells, P: np.ndarray, klass, cell_virtual_edge_dist: float) -> GraphState:
    N, M = P.shape
    A_u = np.zeros((N, M))
    unconnected = []
    for j in range(M):
        if klass[j] == CELL_EDGE:
            unconnected.append(j)
        else:
            A_u[best_cell(P, j), j] = 1.0
    return GraphState(cell_adjacency(cells, cell_virtual_edge_dist), A_u, tuple(unconnected), 0)


def valid_actions(state: GraphState, P: np.ndarray) -> list[Action]:
    if state.terminal:
        raise EpisodeFinished("episode finished")
    ue = state.unconnected[0]
    return [Action(ue, int(i)) for i in np.flatnonzero(np.isfinite(P[:, ue]))]


def apply_action(state: GraphState, a: Action, P: np.ndarray) -> GraphState:
    if a.ue_id not in state.unconnected or state.A_u[:, a.ue_id].any():
        raise InvalidAction(f"UE {a.ue_id} is already connected")
    if not np.isfinite(P[a.cell_id, a.ue_id]):
        raise InvalidAction(f"no reported link between cell {a.cell_id} and UE {a.ue_id}")
    A_u = state.A_u.copy()
    A_u[a.cell_id, a.ue_id] = 1.0
    rest = tuple(u for u in state.unconnected if u != a.ue_id)
    return replace(state, A_u=A_u, unconnected=rest, t=state.t + 1)


def network_throughput(A_u: np.ndarray, P: np.ndarray, channel: ChannelParams) -> float:
    """U(G): sum of served rates over connected cell-UE pairs."""
    _, R = capacity_and_rate(P, A_u, channel)
    return float((R * A_u).sum())


def min_capacity_sum(A_u: np.ndarray, C: np.ndarray) -> float:
    """Sum over cells of the weakest connected capacity; empty cells give 0."""
    total = 0.0
    for i in range(A_u.shape[0]):
        served = A_u[i] > 0
        if served.any():
            total += float(C[i, served].min())
    return total


def utility(A_u: np.ndarray, P: np.ndarray, channel: ChannelParams, cfg: RewardConfig) -> float:
    if cfg.utility == "sum":
        return network_throughput(A_u, P, channel)
    rates = per_ue_rates(A_u, P, channel)[A_u.sum(axis=0) > 0]
    return float(cfg.ref_rate * np.log(rates / cfg.ref_rate).sum())


def combine_reward(u_prev: float, u_next: float, cell_mins, lam: float, N: int) -> float:
    """r = U_t - U_{t-1} + (lam / N) * sum of per-cell minimum capacities."""
    return (u_next - u_prev) + lam / N * float(np.sum(cell_mins))


def reward(prev: GraphState, nxt: GraphState, P: np.ndarray, channel: ChannelParams, cfg: RewardConfig) -> float:
    u_prev = utility(prev.A_u, P, channel, cfg)
    u_next = utility(nxt.A_u, P, channel, cfg)
    mins = min_capacity_sum(nxt.A_u, capacity(P, channel)) if cfg.lam else 0.0
    return combine_reward(u_prev, u_next, mins, cfg.lam, P.shape[0])


def per_ue_rates(A_u: np.ndarray, P: np.ndarray, channel: ChannelParams) -> np.ndarray:
    """Served rate of every UE (0 for unconnected ones)."""
    _, R = capacity_and_rate(P, A_u, channel)
    return (R * A_u).sum(axis=0)


class Scenario:
    """A generated deployment with its frozen RSRP matrix and UE classes."""

    def __init__(self, spec: ScenarioSpec, cells=None, ues=None, P=None):
        self.spec = spec
        if P is None:
            cells, ues, P = generate_deployment(spec)
        self.P = np.asarray(P, dtype=float)
        self.channel = spec.channel
        self.klass = classify_ues(self.P, spec.edge_gap_threshold)
        self.cells = tuple(cells)
        self.ues = tuple(replace(u, klass=k) for u, k in zip(ues, self.klass))
        self.C = capacity(self.P, self.channel)

    @property
    def N(self) -> int:
        return self.P.shape[0]

    @property
    def M(self) -> int:
        return self.P.shape[1]

    @property
    def macro_cells(self) -> list[int]:
        return [c.id for c in self.cells if c.kind == MACRO]

    @property
    def edge_ues(self) -> list[int]:
        return [j for j, k in enumerate(self.klass) if k == CELL_EDGE]

    def initial_state(self) -> GraphState:
        return initial_graph(self.cells, self.P, self.klass, self.spec.cell_virtual_edge_dist)

    def valid_actions(self, state: GraphState) -> list[Action]:
        return valid_actions(state, self.P)

    def step(self, state: GraphState, a: Action, cfg: RewardConfig):
        nxt = apply_action(state, a, self.P)
        return nxt, reward(state, nxt, self.P, self.channel, cfg)

    def throughput(self, state: GraphState) -> float:
        return network_throughput(state.A_u, self.P, self.channel)

    def rates(self, state: GraphState) -> np.ndarray:
        return per_ue_rates(state.A_u, self.P, self.channel)


def make_suite(n_scenarios: int = 5, seed: int = 0, **overrides) -> list[Scenario]:
    """``n_scenarios`` independent deployments seeded ``seed, seed+1, ...``."""
    return [Scenario(ScenarioSpec(seed=seed + k, **overrides)) for k in range(n_scenarios)]
