"""Baselines, metrics, experiment sweeps and persistence."""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attacks import AttackConfig, TargetSpec, attacked_episode
from .checkpoint import Checkpoint, load as load_checkpoint
from .rl_train import coverage_rate, greedy_chooser, maxrsrp_choice, run_episode
from .sim_env import (
    CellSite, ChannelParams, GraphState, RewardConfig, Scenario, ScenarioSpec, UserEquipment,
    apply_action, network_throughput, valid_actions,
)


class DataError(ValueError):
    """Missing or malformed input file."""


# ---------------------------------------------------------------------------
# baselines and metrics


def maxrsrp_policy(P, state: GraphState) -> GraphState:
    """Connect every remaining UE to its strongest reported cell (lowest id on ties)."""
    P = np.asarray(P, float)
    while not state.terminal:
        acts = valid_actions(state, P)
        state = apply_action(state, acts[maxrsrp_choice(P, acts)], P)
    return state


def capacity_metric(state: GraphState, P, channel: ChannelParams) -> float:
    """Sum of served rates over connected pairs."""
    return network_throughput(state.A_u, P, channel)


def uniform_noise(P, pnr_db: float, rng: np.random.Generator) -> np.ndarray:
    """``P + U(-pnr, pnr)`` on the finite entries; -inf entries stay -inf."""
    P = np.asarray(P, float)
    noise = rng.uniform(-pnr_db, pnr_db, size=P.shape)
    return np.where(np.isfinite(P), P + noise, -np.inf)


def noisy_maxrsrp_finals(scenario: Scenario, pnr_db: float, instances: int, rng) -> list[GraphState]:
    start = scenario.initial_state()
    if pnr_db == 0:
        return [maxrsrp_policy(scenario.P, start)] * instances
    return [maxrsrp_policy(uniform_noise(scenario.P, pnr_db, rng), start) for _ in range(instances)]


def noisy_maxrsrp_eval(scenario: Scenario, pnr_db: float, instances: int = 8, rng=None):
    """Mean (coverage, capacity) of maxRSRP acting on uniformly noised RSRP reports."""
    if instances < 1:
        raise ValueError("need at least one noise instance")
    rng = rng if rng is not None else np.random.default_rng(0)
    finals = noisy_maxrsrp_finals(scenario, pnr_db, instances, rng)
    cov = [coverage_rate(scenario.rates(f)) for f in finals]
    cap = [scenario.throughput(f) for f in finals]
    return float(np.mean(cov)), float(np.mean(cap))


# ---------------------------------------------------------------------------
# metrics rows


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    seed: int
    policy: str
    defense: str
    surface: str
    budget: float
    patch_width: int
    coverage: float
    capacity: float
    mean_rate: float
    episode_len: int


COLUMNS = [f.name for f in fields(MetricsRow)]
ATTACK_COLUMNS = ["scenario", "seed", "surface", "mode", "budget", "patch_width", "step", "objective", "coverage",
                  "capacity"]
POOLED = "pooled"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns=COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        d = asdict(r) if not isinstance(r, dict) else r
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != COLUMNS:
            raise DataError(f"{path}: unexpected columns {rd.fieldnames}")
        out = []
        for d in rd:
            out.append(MetricsRow(d["scenario"], int(d["seed"]), d["policy"], d["defense"], d["surface"],
                                  float(d["budget"]), int(d["patch_width"]), float(d["coverage"]),
                                  float(d["capacity"]), float(d["mean_rate"]), int(d["episode_len"])))
        return out


def metrics_rows(scenarios: Sequence[Scenario], finals: Sequence[Sequence[GraphState]], key: dict,
                 names: Optional[Sequence[str]] = None) -> list[MetricsRow]:
    """Per-scenario rows plus one pooled row.

    ``finals[i]`` holds the final states of scenario ``i`` (several for noise
    instances; metrics are averaged over them). The pooled row takes the 5th
    percentile over all UEs of all scenarios per instance, and sums capacity
    and episode length over scenarios.
    """
    names = names or [f"s{i}" for i in range(len(scenarios))]
    rows = []
    n_inst = len(finals[0])
    pooled_rates = [[] for _ in range(n_inst)]
    pooled_cap = np.zeros(n_inst)
    total_len = 0
    for name, sc, fs in zip(names, scenarios, finals):
        rates = [sc.rates(f) for f in fs]
        caps = [sc.throughput(f) for f in fs]
        length = len(sc.edge_ues)
        total_len += length
        for k, r in enumerate(rates):
            pooled_rates[k].append(r)
            pooled_cap[k] += caps[k]
        rows.append(MetricsRow(
            scenario=name, coverage=float(np.mean([coverage_rate(r) for r in rates])),
            capacity=float(np.mean(caps)), mean_rate=float(np.mean([r.mean() for r in rates])),
            episode_len=length, **key))
    pooled = [np.concatenate(p) for p in pooled_rates]
    rows.append(MetricsRow(
        scenario=POOLED, coverage=float(np.mean([coverage_rate(r) for r in pooled])),
        capacity=float(pooled_cap.mean()), mean_rate=float(np.mean([r.mean() for r in pooled])),
        episode_len=total_len, **key))
    return rows


# ---------------------------------------------------------------------------
# policies under attack


def patch_mask_for(width: int, scenario: Scenario) -> frozenset:
    """The ``width`` UEs closest to a jammer at the centre of the deployment area.

    Ties in distance go to the lower UE id.
    """
    M = scenario.M
    if not 1 <= width <= M:
        raise ValueError(f"patch width must be in [1, {M}]")
    centre = np.asarray(scenario.spec.area, dtype=float) / 2
    xy = np.array([u.position for u in scenario.ues], dtype=float)
    dist = np.hypot(*(xy - centre).T)
    return frozenset(int(j) for j in np.lexsort((np.arange(M), dist))[:width])


def gnn_finals(ckpt: Checkpoint, scenarios: Sequence[Scenario], attack: Optional[AttackConfig] = None,
               surrogate=None, attack_log: Optional[list] = None, log_key: Optional[dict] = None):
    """Final state per scenario for the greedy GNN policy, optionally under attack."""
    out = []
    for i, sc in enumerate(scenarios):
        if attack is None or attack.budget == 0:
            _, final = run_episode(sc, greedy_chooser(ckpt.params, ckpt.norm, sc), ckpt.reward)
        else:
            cfg = attack
            if attack.surface == "patch":
                cfg = replace(attack, patch_mask=patch_mask_for(len(attack.patch_mask), sc))
            ep = attacked_episode(ckpt.params, ckpt.norm, sc, cfg, ckpt.reward, surrogate)
            final = ep.final_state
            if attack_log is not None:
                cov, cap = coverage_rate(sc.rates(final)), sc.throughput(final)
                for t, st in enumerate(ep.steps):
                    attack_log.append({**(log_key or {}), "scenario": f"s{i}", "step": t,
                                       "objective": st.objective, "coverage": cov, "capacity": cap})
        out.append([final])
    return out


# ---------------------------------------------------------------------------
# experiment plans


@dataclass(frozen=True)
class AttackGrid:
    surface: str = "physical"
    mode: str = "whitebox"
    budgets: tuple = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0)
    widths: tuple = ()  # patch widths; patch surface only
    steps: int = 20
    target: str = "macro-overload"

    def __post_init__(self):
        if not self.budgets:
            raise ValueError("attack grid needs at least one budget")
        if self.surface == "patch" and not self.widths:
            raise ValueError("patch grid needs widths")


@dataclass
class ExperimentPlan:
    scenarios: list  # Scenario objects
    checkpoints: dict = field(default_factory=dict)  # defense name -> {seed: Checkpoint}
    policies: tuple = ("gnn", "maxrsrp")
    attacks: tuple = ()  # AttackGrid entries
    noise_budgets: tuple = ()  # uniform-noise PNRs for the maxRSRP baseline
    noise_instances: int = 8
    seeds: tuple = (0,)
    attack_seed: int = 0
    surrogate_seed: int = 12345

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be explicit")
        if "gnn" in self.policies and not self.checkpoints:
            raise DataError("gnn policy needs checkpoints")


def surface_label(surface: str, mode: str) -> str:
    return surface if mode == "whitebox" else f"{surface}/{mode}"


def run_experiment(plan: ExperimentPlan, out_dir=None, charts: bool = True):
    """Run the grid in sorted key order. Returns ``(rows, attack_rows)``.

    With ``out_dir`` writes ``metrics.csv``, ``attacks.csv``, SVG charts and a
    manifest.
    """
    from .gnn import GnnParams

    rows, attack_rows = [], []
    scs = plan.scenarios
    for seed in sorted(plan.seeds):
        if "maxrsrp" in plan.policies:
            key = dict(seed=seed, policy="maxrsrp", defense="none", surface="none", budget=0.0, patch_width=0)
            rows += metrics_rows(scs, [[maxrsrp_policy(sc.P, sc.initial_state())] for sc in scs], key)
            for pnr in sorted(plan.noise_budgets):
                rng = np.random.default_rng(seed)
                finals = [noisy_maxrsrp_finals(sc, pnr, plan.noise_instances, rng) for sc in scs]
                key = dict(seed=seed, policy="maxrsrp", defense="none", surface="uniform", budget=float(pnr),
                           patch_width=0)
                rows += metrics_rows(scs, finals, key)
        if "gnn" not in plan.policies:
            continue
        for defense in sorted(plan.checkpoints):
            ckpt = plan.checkpoints[defense].get(seed)
            if ckpt is None:
                raise DataError(f"no {defense} checkpoint for seed {seed}")
            key = dict(seed=seed, policy="gnn", defense=defense, surface="none", budget=0.0, patch_width=0)
            rows += metrics_rows(scs, gnn_finals(ckpt, scs), key)
            surrogate = GnnParams.init(plan.surrogate_seed, ckpt.params.d, ckpt.params.L)
            for grid in sorted(plan.attacks, key=lambda g: (g.surface, g.mode)):
                widths = grid.widths if grid.surface == "patch" else (0,)
                for width in sorted(widths):
                    for budget in sorted(grid.budgets):
                        cfg = AttackConfig(
                            surface=grid.surface, budget=float(budget), steps=grid.steps, mode=grid.mode,
                            patch_mask=frozenset(range(width)) if width else None,
                            target=TargetSpec(grid.target), seed=plan.attack_seed)
                        label = surface_label(grid.surface, grid.mode)
                        log_key = dict(seed=seed, surface=grid.surface, mode=grid.mode, budget=float(budget),
                                       patch_width=width)
                        finals = gnn_finals(ckpt, scs, cfg, surrogate if grid.mode == "blackbox" else None,
                                            attack_rows if defense == "none" else None, log_key)
                        key = dict(seed=seed, policy="gnn", defense=defense, surface=label,
                                   budget=float(budget), patch_width=width)
                        rows += metrics_rows(scs, finals, key)
    if out_dir is not None:
        write_outputs(Path(out_dir), rows, attack_rows, charts)
    return rows, attack_rows


def write_outputs(out: Path, rows, attack_rows, charts=True):
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(rows))
    if attack_rows:
        (out / "attacks.csv").write_text(rows_to_csv(attack_rows, ATTACK_COLUMNS))
    if charts:
        for name, svg in coverage_charts(rows).items():
            (out / name).write_text(svg)


def median_pooled(rows, **match) -> float:
    """Median over seeds of the pooled coverage of the rows matching ``match``."""
    vals = [r.coverage for r in rows if r.scenario == POOLED and all(getattr(r, k) == v for k, v in match.items())]
    if not vals:
        raise KeyError(f"no pooled rows match {match}")
    return float(np.median(vals))


# ---------------------------------------------------------------------------
# charts


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str, width=640, height=400) -> str:
    """Minimal SVG line plot; ``series`` maps label -> (xs, ys)."""
    pad_l, pad_r, pad_t, pad_b = 70, 180, 30, 45
    xs = [x for v in series.values() for x in v[0]]
    ys = [y for v in series.values() for y in v[1]]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + ph - (y - y0) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
             f'font-size="11">',
             f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
             f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
             f'<text x="{pad_l + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
             f'<text x="14" y="{pad_t + ph / 2:.0f}" transform="rotate(-90 14 {pad_t + ph / 2:.0f})" '
             f'text-anchor="middle">{ylabel}</text>']
    for v in (y0, (y0 + y1) / 2, y1):
        parts.append(f'<text x="{pad_l - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in sorted(set(xs)):
        parts.append(f'<text x="{sx(v):.1f}" y="{pad_t + ph + 15}" text-anchor="middle">{v:g}</text>')
    for k, (label, (sxs, sys_)) in enumerate(sorted(series.items())):
        c = colors[k % len(colors)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(sxs, sys_))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        ly = pad_t + 12 + 16 * k
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 30}" y2="{ly}" stroke="{c}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - pad_r + 35}" y="{ly + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def coverage_charts(rows) -> dict:
    """One chart per surface: pooled coverage (median over seeds) vs budget per policy/defense."""
    groups: dict = {}
    for r in rows:
        if r.scenario != POOLED or r.surface == "none":
            continue
        label = r.policy if r.policy == "maxrsrp" else f"gnn/{r.defense}"
        if r.patch_width:
            label += f"/w{r.patch_width}"
        groups.setdefault(r.surface, {}).setdefault(label, {}).setdefault(r.budget, []).append(r.coverage)
    charts = {}
    for surface, series in sorted(groups.items()):
        data = {}
        for label, by_budget in series.items():
            bs = sorted(by_budget)
            data[label] = (bs, [float(np.median(by_budget[b])) / 1e6 for b in bs])
        fname = "coverage_" + surface.replace("/", "_") + ".svg"
        charts[fname] = svg_line_chart(data, f"coverage vs budget ({surface})", "budget", "coverage (Mbps)")
    return charts


# ---------------------------------------------------------------------------
# persistence


def _enc(x):
    if isinstance(x, float) and math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return x


def _dec(x):
    if isinstance(x, str):
        if x in ("-inf", "inf"):
            return float(x)
        raise DataError(f"unexpected string {x!r} in numeric array")
    return float(x)


def scenario_to_dict(sc: Scenario) -> dict:
    spec = sc.spec
    return {
        "format": "oran-cm-scenario",
        "version": 1,
        "spec": {k: v for k, v in asdict(spec).items() if k not in ("channel", "cells", "ues")},
        "channel": asdict(spec.channel),
        "cells": [asdict(c) for c in sc.cells],
        "ues": [{"id": u.id, "position": list(u.position)} for u in sc.ues],
        "P": [[_enc(float(v)) for v in row] for row in sc.P],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        if doc.get("format") != "oran-cm-scenario" or doc.get("version") != 1:
            raise DataError("not a version-1 scenario document")
        s = dict(doc["spec"])
        s["area"] = tuple(s["area"])
        channel = ChannelParams(**doc["channel"])
        cells = tuple(CellSite(int(c["id"]), tuple(c["position"]), c["kind"], float(c["tx_power"]))
                      for c in doc["cells"])
        ues = tuple(UserEquipment(int(u["id"]), tuple(u["position"])) for u in doc["ues"])
        P = np.array([[_dec(v) for v in row] for row in doc["P"]], dtype=float)
        spec = ScenarioSpec(channel=channel, **s)
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed scenario: {exc}") from exc
    if P.shape != (len(cells), len(ues)) or P.shape != (spec.N, spec.M):
        raise DataError(f"RSRP matrix shape {P.shape} does not match the deployment")
    return Scenario(spec, cells, ues, P)


def save_scenario(sc: Scenario, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario_to_dict(sc)))
    return path


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed scenario file {path}: {exc}") from exc
    return scenario_from_dict(doc)


def load_checkpoint_file(path) -> Checkpoint:
    from .checkpoint import CheckpointError

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def write_manifest(out_dir, command: str, config: dict) -> Path:
    """Full run configuration plus library versions, as JSON beside the outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "versions": {"oran_cm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "argv": sys.argv[1:],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path
