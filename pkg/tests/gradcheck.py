"""Central-difference oracle for the attack objective's gradients.

The objective is the log-probability of a target candidate, computed through
the whole chain P -> C, R -> features -> normalization -> GNN -> log-softmax.
"""

import numpy as np

from oran_cm.chain import candidate_batch, candidate_features, record
from oran_cm.features import fit_norm
from oran_cm.gnn import GnnParams
from oran_cm.sim_env import Scenario, ScenarioSpec

H_P = 1e-4  # dB
H_THETA = 1e-6
H_FEAT = 1e-6
THETA_PER_BLOCK = 3  # coordinates checked per parameter array


def fixture(seed):
    """Small scenario, a mid-episode state with >= 2 candidates, seeded params and target."""
    rng = np.random.default_rng(seed)
    s_seed = seed
    while True:
        sc = Scenario(ScenarioSpec(seed=10_000 + s_seed, N=3, M=8, n_macro=1, edge_gap_threshold=10.0))
        state = sc.initial_state()
        while not state.terminal and len(sc.valid_actions(state)) < 2:
            state, _ = sc.step(state, sc.valid_actions(state)[0], _NO_REWARD)
        if not state.terminal:
            break
        s_seed += 1000
    # advance a random number of steps while keeping >= 2 candidates
    for _ in range(int(rng.integers(0, 3))):
        acts = sc.valid_actions(state)
        nxt, _ = sc.step(state, acts[int(rng.integers(len(acts)))], _NO_REWARD)
        if nxt.terminal or len(sc.valid_actions(nxt)) < 2:
            break
        state = nxt
    acts = sc.valid_actions(state)
    batch = candidate_batch([(sc.P, state, acts)], sc.channel)
    norm = fit_norm([candidate_features(sc.P, state, acts, sc.channel)])
    params = GnnParams.init(int(rng.integers(1 << 30)))
    target = int(rng.integers(len(acts)))
    return sc, batch, norm, params, target


def _objective(params, norm, batch, target, **kw):
    return record(params, norm, batch, **kw).logp[0, target]


def analytic(params, norm, batch, target):
    tape = record(params, norm, batch)
    dq = -tape.probs.copy()
    dq[:, target] += 1.0
    dq = np.where(batch.mask, dq, 0.0)
    return tape.backward(dq, wrt=("params", "features", "P")), tape


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(b).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check(seed):
    """Max relative errors ``{"params", "features", "P"}`` for fixture ``seed``."""
    sc, batch, norm, params, target = fixture(seed)
    g, tape = analytic(params, norm, batch, target)
    f = lambda **kw: _objective(kw.pop("p", params), norm, batch, target, **kw)  # noqa: E731

    fd_p = np.zeros(batch.P.shape[1:])
    for idx in zip(*np.nonzero(np.isfinite(batch.P[0]))):
        e = np.zeros((1,) + fd_p.shape)
        e[(0,) + idx] = H_P
        fd_p[idx] = (f(dP=e) - f(dP=-e)) / (2 * H_P)

    fd_theta, an_theta = [], []
    pick = np.random.default_rng(seed + 1)
    for name in params.names():
        size = params[name].size
        for i in pick.choice(size, size=min(THETA_PER_BLOCK, size), replace=False):
            pp, pm = params.copy(), params.copy()
            pp.arrays[name].flat[i] += H_THETA
            pm.arrays[name].flat[i] -= H_THETA
            fd_theta.append((f(p=pp) - f(p=pm)) / (2 * H_THETA))
            an_theta.append(g["params"][name].flat[i])

    gc, gu = g["features"]
    fd_c, fd_u = np.zeros(gc.shape), np.zeros(gu.shape)
    for arr, key in ((fd_c, "dXc"), (fd_u, "dXu")):
        for idx in np.ndindex(*arr.shape):
            e = np.zeros(arr.shape)
            e[idx] = H_FEAT
            arr[idx] = (f(**{key: e}) - f(**{key: -e})) / (2 * H_FEAT)
    return {
        "params": _rel(an_theta, fd_theta),
        "features": max(_rel(gc, fd_c), _rel(gu, fd_u)),
        "P": _rel(g["P"][0], fd_p),
    }


from oran_cm.sim_env import RewardConfig  # noqa: E402

_NO_REWARD = RewardConfig(lam=0.0, utility="sum")
