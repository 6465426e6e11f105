"""GNN input features built from capacity/rate matrices and adjacency.

All functions broadcast over leading batch dimensions, so a stack of
candidate graphs is handled in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeatureSet:
    X_c1: np.ndarray  # (..., N, 2)
    X_c2: np.ndarray  # (..., N, 2)
    X_u: np.ndarray  # (..., M, 2)

    @property
    def X_c(self) -> np.ndarray:
        """Cell features as one (..., N, 4) block: [X_c1 | X_c2]."""
        return np.concatenate([self.X_c1, self.X_c2], axis=-1)

    @classmethod
    def from_blocks(cls, X_c: np.ndarray, X_u: np.ndarray) -> "FeatureSet":
        return cls(X_c[..., :2], X_c[..., 2:], X_u)


def build_features(C, R, A_c, A_u) -> FeatureSet:
    C, R, A_c, A_u = (np.asarray(x, dtype=float) for x in (C, R, A_c, A_u))
    N, M = C.shape[-2:]
    if R.shape[-2:] != (N, M) or A_u.shape[-2:] != (N, M) or A_c.shape[-2:] != (N, N):
        raise ValueError(
            f"shape mismatch: C{C.shape} R{R.shape} A_c{A_c.shape} A_u{A_u.shape}"
        )
    row = R.sum(axis=-1)  # R 1_M
    col = R.sum(axis=-2)  # R^T 1_N
    X_c1 = np.stack([(A_c @ row[..., None])[..., 0], row], axis=-1)
    X_c2 = np.stack([(A_u @ col[..., None])[..., 0], np.broadcast_to(C.sum(axis=-1), row.shape)], axis=-1)
    X_u = np.stack([np.broadcast_to(C.sum(axis=-2), col.shape), col], axis=-1)
    return FeatureSet(X_c1, X_c2, X_u)


def features_vjp(dX_c, dX_u, A_c, A_u):
    """Pull feature cotangents back to (dC, dR).

    ``dX_c`` is (..., N, 4) in [X_c1 | X_c2] column order, ``dX_u`` is
    (..., M, 2). The result has the broadcast batch shape of the inputs.
    """
    d_row = (np.swapaxes(A_c, -1, -2) @ dX_c[..., 0:1])[..., 0] + dX_c[..., 1]
    d_col = (np.swapaxes(A_u, -1, -2) @ dX_c[..., 2:3])[..., 0] + dX_u[..., 1]
    dR = d_row[..., :, None] + d_col[..., None, :]
    dC = dX_c[..., 3][..., :, None] + dX_u[..., 0][..., None, :]
    return dC, dR


@dataclass(frozen=True)
class NormStats:
    """Per-column min/max of the cell (4 columns) and UE (2 columns) features."""

    c_min: np.ndarray
    c_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    @property
    def c_span(self):
        return self.c_max - self.c_min

    @property
    def u_span(self):
        return self.u_max - self.u_min


def fit_norm(suite) -> NormStats:
    suite = list(suite)
    if not suite:
        raise ValueError("cannot fit normalization on an empty suite")
    Xc = np.concatenate([fs.X_c.reshape(-1, 4) for fs in suite])
    Xu = np.concatenate([fs.X_u.reshape(-1, 2) for fs in suite])
    return NormStats(Xc.min(0), Xc.max(0), Xu.min(0), Xu.max(0))


def _inv_span(span):
    # zero-span columns map to 0 and carry no gradient
    out = np.zeros_like(span, dtype=float)
    np.divide(1.0, span, out=out, where=span > 0)
    return out


def normalize_blocks(X_c, X_u, stats: NormStats):
    return (X_c - stats.c_min) * _inv_span(stats.c_span), (X_u - stats.u_min) * _inv_span(stats.u_span)


def normalize_vjp(dXc_n, dXu_n, stats: NormStats):
    return dXc_n * _inv_span(stats.c_span), dXu_n * _inv_span(stats.u_span)


def normalize(fs: FeatureSet, stats: NormStats) -> FeatureSet:
    return FeatureSet.from_blocks(*normalize_blocks(fs.X_c, fs.X_u, stats))


def denormalize(fs: FeatureSet, stats: NormStats) -> FeatureSet:
    X_c = fs.X_c * stats.c_span + stats.c_min
    X_u = fs.X_u * stats.u_span + stats.u_min
    return FeatureSet.from_blocks(X_c, X_u)
