"""Graph scorer Q(G) with hand-written reverse mode.

Node updates, for each of L layers (all nodes updated from the previous layer):

    cell: h_c <- relu(h_c W_self_c + mean_{A_c nbrs}(h_c) W_cc + mean_{served UEs}(h_u) W_cu + b_c)
    UE:   h_u <- relu(h_u W_self_u + h_{serving cell} W_uc + b_u)

Empty neighbourhoods aggregate to the zero vector. The readout is
``w_final . relu([sum_cells h_c | sum_UEs h_u] W_r + b_r)``.

Every function takes a leading graph dimension G so the K candidate graphs of
a step (or a replay minibatch) are scored in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CELL_IN = 4
UE_IN = 2
LAYER_BLOCKS = ("self_c_W", "cc_W", "cu_W", "c_b", "self_u_W", "uc_W", "u_b")


def param_shapes(d: int = 8, L: int = 2) -> dict[str, tuple[int, ...]]:
    shapes = {"in_c_W": (CELL_IN, d), "in_c_b": (d,), "in_u_W": (UE_IN, d), "in_u_b": (d,)}
    for layer in range(L):
        for block in LAYER_BLOCKS:
            shapes[f"l{layer}_{block}"] = (d,) if block.endswith("_b") else (d, d)
    shapes.update({"readout_W": (2 * d, d), "readout_b": (d,), "final_w": (d,)})
    return shapes


class GnnParams:
    """Named parameter arrays of the scorer (float64)."""

    def __init__(self, arrays: dict[str, np.ndarray], d: int = 8, L: int = 2):
        self.d, self.L = d, L
        expected = param_shapes(d, L)
        if set(arrays) != set(expected):
            raise ValueError(f"parameter names do not match d={d}, L={L}")
        for name, shape in expected.items():
            if np.shape(arrays[name]) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(arrays[name])}")
        self.arrays = {k: np.array(arrays[k], dtype=float) for k in expected}

    @classmethod
    def init(cls, seed: int, d: int = 8, L: int = 2) -> "GnnParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        return cls({k: rng.uniform(-bound, bound, size=s) for k, s in param_shapes(d, L).items()}, d, L)

    @classmethod
    def zeros(cls, d: int = 8, L: int = 2) -> "GnnParams":
        return cls({k: np.zeros(s) for k, s in param_shapes(d, L).items()}, d, L)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self) -> "GnnParams":
        return GnnParams({k: v.copy() for k, v in self.arrays.items()}, self.d, self.L)

    def same_architecture(self, other: "GnnParams") -> bool:
        return self.d == other.d and self.L == other.L

    def axpy(self, alpha: float, grads: dict[str, np.ndarray]) -> "GnnParams":
        """Return ``self + alpha * grads`` as new params."""
        return GnnParams({k: v + alpha * grads[k] for k, v in self.arrays.items()}, self.d, self.L)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def equal(self, other: "GnnParams") -> bool:
        return self.same_architecture(other) and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


def zero_grads(params: GnnParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def _relu(z):
    return np.maximum(z, 0.0)


def _lin(x, W):
    """x @ W for x (..., n, a) as one GEMM rather than a loop of tiny ones."""
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))


def _mean_operator(A):
    deg = A.sum(axis=-1, keepdims=True)
    out = np.zeros_like(A)
    np.divide(A, deg, out=out, where=deg > 0)
    return out


@dataclass
class _Cache:
    Xc: np.ndarray
    Xu: np.ndarray
    Mc: np.ndarray
    Mu: np.ndarray
    A_u: np.ndarray
    zc: list
    zu: list
    hc: list
    hu: list
    ac: list
    au: list
    uc: list
    pooled: np.ndarray
    zr: np.ndarray


def forward(params: GnnParams, Xc, Xu, A_c, A_u, keep_cache: bool = False):
    """Scores ``q`` of shape (G,) for G graphs.

    ``Xc`` (G, N, 4), ``Xu`` (G, M, 2), ``A_c`` (G, N, N) or (N, N),
    ``A_u`` (G, N, M). Returns ``q`` or ``(q, cache)``.
    """
    p = params.arrays
    Xc, Xu, A_u = np.asarray(Xc, float), np.asarray(Xu, float), np.asarray(A_u, float)
    if Xc.ndim != 3 or Xc.shape[-1] != CELL_IN or Xu.ndim != 3 or Xu.shape[-1] != UE_IN:
        raise ValueError(f"bad feature shapes {Xc.shape}, {Xu.shape}")
    G, N, _ = Xc.shape
    M = Xu.shape[1]
    if Xu.shape[0] != G or A_u.shape != (G, N, M) or np.shape(A_c)[-2:] != (N, N):
        raise ValueError("feature/adjacency dimension mismatch")
    Mc = _mean_operator(np.asarray(A_c, float))
    Mu = _mean_operator(A_u)
    Ut = np.swapaxes(A_u, -1, -2)

    zc = [_lin(Xc, p["in_c_W"]) + p["in_c_b"]]
    zu = [_lin(Xu, p["in_u_W"]) + p["in_u_b"]]
    hc, hu = [_relu(zc[0])], [_relu(zu[0])]
    ac, au, uc = [], [], []
    for layer in range(params.L):
        w = lambda b: p[f"l{layer}_{b}"]  # noqa: E731
        a_c = Mc @ hc[-1]
        a_u = Mu @ hu[-1]
        u_c = Ut @ hc[-1]
        z_c = _lin(hc[-1], w("self_c_W")) + _lin(a_c, w("cc_W")) + _lin(a_u, w("cu_W")) + w("c_b")
        z_u = _lin(hu[-1], w("self_u_W")) + _lin(u_c, w("uc_W")) + w("u_b")
        ac.append(a_c), au.append(a_u), uc.append(u_c)
        zc.append(z_c), zu.append(z_u)
        hc.append(_relu(z_c)), hu.append(_relu(z_u))

    pooled = np.concatenate([hc[-1].sum(axis=1), hu[-1].sum(axis=1)], axis=-1)
    zr = pooled @ p["readout_W"] + p["readout_b"]
    q = _relu(zr) @ p["final_w"]
    if not keep_cache:
        return q
    return q, _Cache(Xc, Xu, Mc, Mu, A_u, zc, zu, hc, hu, ac, au, uc, pooled, zr)


def _outer_sum(x, dz):
    """Sum over graphs and nodes of x^T dz."""
    return x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])


def backward(params: GnnParams, cache: _Cache, dq, want_params: bool = True, want_inputs: bool = True):
    """Vector-Jacobian product of ``forward`` for cotangent ``dq`` (G,).

    Returns ``(grads, dXc, dXu)``; either part is None when not requested.
    ReLU uses subgradient 0 at 0.
    """
    p = params.arrays
    d = params.d
    grads = zero_grads(params) if want_params else None
    dq = np.asarray(dq, float)

    hr = _relu(cache.zr)
    dzr = (dq[:, None] * p["final_w"]) * (cache.zr > 0)
    if want_params:
        grads["final_w"] += hr.T @ dq
        grads["readout_W"] += cache.pooled.T @ dzr
        grads["readout_b"] += dzr.sum(0)
    dpooled = dzr @ p["readout_W"].T
    N, M = cache.Xc.shape[1], cache.Xu.shape[1]
    dhc = np.broadcast_to(dpooled[:, None, :d], (dpooled.shape[0], N, d))
    dhu = np.broadcast_to(dpooled[:, None, d:], (dpooled.shape[0], M, d))

    McT = np.swapaxes(cache.Mc, -1, -2)
    MuT = np.swapaxes(cache.Mu, -1, -2)
    for layer in reversed(range(params.L)):
        w = lambda b: p[f"l{layer}_{b}"]  # noqa: E731
        dzc = dhc * (cache.zc[layer + 1] > 0)
        dzu = dhu * (cache.zu[layer + 1] > 0)
        if want_params:
            g = lambda b: grads[f"l{layer}_{b}"]  # noqa: E731
            g("self_c_W")[...] += _outer_sum(cache.hc[layer], dzc)
            g("cc_W")[...] += _outer_sum(cache.ac[layer], dzc)
            g("cu_W")[...] += _outer_sum(cache.au[layer], dzc)
            g("c_b")[...] += dzc.sum((0, 1))
            g("self_u_W")[...] += _outer_sum(cache.hu[layer], dzu)
            g("uc_W")[...] += _outer_sum(cache.uc[layer], dzu)
            g("u_b")[...] += dzu.sum((0, 1))
        dhc = _lin(dzc, w("self_c_W").T) + McT @ _lin(dzc, w("cc_W").T) + cache.A_u @ _lin(dzu, w("uc_W").T)
        dhu = _lin(dzu, w("self_u_W").T) + MuT @ _lin(dzc, w("cu_W").T)

    dzc0 = dhc * (cache.zc[0] > 0)
    dzu0 = dhu * (cache.zu[0] > 0)
    if want_params:
        grads["in_c_W"] += _outer_sum(cache.Xc, dzc0)
        grads["in_c_b"] += dzc0.sum((0, 1))
        grads["in_u_W"] += _outer_sum(cache.Xu, dzu0)
        grads["in_u_b"] += dzu0.sum((0, 1))
    if not want_inputs:
        return grads, None, None
    return grads, _lin(dzc0, p["in_c_W"].T), _lin(dzu0, p["in_u_W"].T)


def masked_log_softmax(q, mask):
    """Row-wise log-softmax over the valid entries of ``q`` (..., K)."""
    z = np.where(mask, q, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return np.where(mask, shifted - lse, -np.inf)


def softmax(q, mask=None):
    q = np.asarray(q, float)
    if q.shape[-1] == 0:
        raise ValueError("softmax over zero actions")
    if mask is None:
        mask = np.ones(q.shape, dtype=bool)
    return np.exp(masked_log_softmax(q, mask))
