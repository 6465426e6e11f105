"""Candidate batches and the recorded P -> C,R -> features -> GNN -> softmax chain.

A :class:`CandidateBatch` stacks S states, each with up to ``K`` candidate
graphs (padded; ``mask`` marks real ones). :func:`record` runs the full chain
and returns a :class:`GradTape` whose ``backward`` pulls a cotangent on the
scores back to the parameters, the normalized features or the RSRP matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import gnn
from .features import build_features, features_vjp, normalize_blocks, normalize_vjp, NormStats
from .sim_env import Action, ChannelParams, GraphState

LN10_OVER_10 = np.log(10.0) / 10.0


@dataclass
class CandidateBatch:
    P: np.ndarray  # (S, N, M) clean RSRP, -inf for unreported links
    A_c: np.ndarray  # (S, N, N)
    A_u: np.ndarray  # (S, K, N, M) candidate adjacencies
    mask: np.ndarray  # (S, K) bool
    actions: list  # per state, list of Action (len = number of valid candidates)
    channel: ChannelParams

    @property
    def S(self):
        return self.A_u.shape[0]

    @property
    def K(self):
        return self.A_u.shape[1]

    @property
    def counts(self):
        return self.mask.sum(axis=1)


def candidate_batch(items: Sequence[tuple], channel: ChannelParams, K: Optional[int] = None) -> CandidateBatch:
    """Build a batch from ``(P, state, actions)`` triples.

    Each candidate graph is the state plus the UE-to-cell edge of one action.
    An empty action list means "score the state graph itself" (used for
    Q(s, a) lookups where the action has already been applied).
    """
    if not items:
        raise ValueError("empty candidate batch")
    K = K or max(max(len(acts), 1) for _, _, acts in items)
    P0 = np.asarray(items[0][0])
    N, M = P0.shape
    S = len(items)
    P = np.empty((S, N, M))
    A_c = np.empty((S, N, N))
    A_u = np.empty((S, K, N, M))
    mask = np.zeros((S, K), dtype=bool)
    for s, (Ps, state, acts) in enumerate(items):
        P[s] = Ps
        A_c[s] = state.A_c
        A_u[s] = state.A_u
        if acts:
            for k, a in enumerate(acts):
                A_u[s, k, a.cell_id, a.ue_id] = 1.0
            mask[s, : len(acts)] = True
            # padded slots copy candidate 0 so they stay well-formed
            A_u[s, len(acts):] = A_u[s, 0]
        else:
            mask[s, 0] = True
    return CandidateBatch(P, A_c, A_u, mask, [list(acts) for _, _, acts in items], channel)


def capacity_with_grad(P: np.ndarray, channel: ChannelParams):
    """Capacity and its elementwise derivative w.r.t. P (both 0 on -inf links)."""
    finite = np.isfinite(P)
    snr = 10.0 ** (np.where(finite, P - channel.noise_floor, 0.0) / 10.0)
    C = np.where(finite, channel.bandwidth * np.log2(1.0 + snr), 0.0)
    dC = np.where(finite, channel.bandwidth / np.log(2.0) * snr / (1.0 + snr) * LN10_OVER_10, 0.0)
    return C, dC


class LeafNotRecorded(KeyError):
    pass


class GradTape:
    """One recorded forward pass; ``backward`` may be called any number of times."""

    def __init__(self, params, norm, batch, dP, dXc, dXu):
        self.params = params
        self.batch = batch
        self.norm = norm
        S, K = batch.S, batch.K
        N, M = batch.P.shape[1:]
        finite = np.isfinite(batch.P)
        self.finite = finite
        if dP is not None:
            dP = np.where(finite, dP, 0.0)
        self.P = batch.P if dP is None else np.where(finite, batch.P + dP, -np.inf)
        C, self._dC_dP = capacity_with_grad(self.P, batch.channel)
        self.C = C
        load = batch.A_u.sum(axis=-1)  # (S, K, N)
        self._inv_load = 1.0 / np.maximum(load, 1.0)
        R = C[:, None] * self._inv_load[..., None]
        self.R = R
        fs = build_features(C[:, None], R, batch.A_c[:, None], batch.A_u)
        Xc, Xu = normalize_blocks(fs.X_c, fs.X_u, norm)
        if dXc is not None:
            Xc = Xc + dXc[:, None]
        if dXu is not None:
            Xu = Xu + dXu[:, None]
        self.Xc, self.Xu = Xc, Xu
        A_c_flat = np.broadcast_to(batch.A_c[:, None], (S, K, N, N)).reshape(S * K, N, N)
        q, self._cache = gnn.forward(
            params, Xc.reshape(S * K, N, 4), Xu.reshape(S * K, M, 2), A_c_flat,
            batch.A_u.reshape(S * K, N, M), keep_cache=True,
        )
        self.q = q.reshape(S, K)
        self.logp = gnn.masked_log_softmax(self.q, batch.mask)
        self.probs = np.exp(self.logp)

    def scores(self):
        """Valid scores per state as a list of 1-D arrays."""
        return [self.q[s, : max(c, 1)] for s, c in enumerate(self.batch.counts)]

    def backward(self, dq, wrt=("params",)):
        """Pull ``dq`` (S, K) back to the requested leaves.

        Leaves: ``params`` (dict), ``features`` (normalized (dXc, dXu) summed
        over candidates), ``P`` (S, N, M). Padded candidates contribute nothing.
        """
        unknown = set(wrt) - {"params", "features", "P"}
        if unknown:
            raise LeafNotRecorded(f"not recorded on tape: {sorted(unknown)}")
        batch = self.batch
        S, K = batch.S, batch.K
        N, M = batch.P.shape[1:]
        dq = np.where(batch.mask, dq, 0.0).reshape(S * K)
        need_inputs = "features" in wrt or "P" in wrt
        grads, dXc, dXu = gnn.backward(
            self.params, self._cache, dq, want_params="params" in wrt, want_inputs=need_inputs
        )
        out = {}
        if "params" in wrt:
            out["params"] = grads
        if not need_inputs:
            return out
        dXc = dXc.reshape(S, K, N, 4)
        dXu = dXu.reshape(S, K, M, 2)
        if "features" in wrt:
            out["features"] = (dXc.sum(axis=1), dXu.sum(axis=1))
        if "P" in wrt:
            dXc_raw, dXu_raw = normalize_vjp(dXc, dXu, self.norm)
            dC, dR = features_vjp(dXc_raw, dXu_raw, batch.A_c[:, None], batch.A_u)
            dC = dC + dR * self._inv_load[..., None]
            out["P"] = dC.sum(axis=1) * self._dC_dP
        return out


def record(params, norm: NormStats, batch: CandidateBatch, dP=None, dXc=None, dXu=None) -> GradTape:
    """Run the chain with optional perturbations of P (dB) or normalized features."""
    return GradTape(params, norm, batch, dP, dXc, dXu)


def greedy_index(q_row: np.ndarray) -> int:
    # argmax keeps the first maximum: lowest candidate index, i.e. lowest cell id
    return int(np.argmax(q_row))


def state_features(P, state: GraphState, channel: ChannelParams):
    """Raw FeatureSet of a single graph (no normalization)."""
    C, _ = capacity_with_grad(np.asarray(P, float), channel)
    R = C / np.maximum(state.A_u.sum(-1), 1.0)[:, None]
    return build_features(C, R, state.A_c, state.A_u)


def candidate_features(P, state: GraphState, actions: Sequence[Action], channel: ChannelParams):
    """Raw FeatureSet stacked over the candidate graphs of ``actions``."""
    batch = candidate_batch([(P, state, actions)], channel)
    C, _ = capacity_with_grad(batch.P, channel)
    R = C[:, None] / np.maximum(batch.A_u.sum(-1), 1.0)[..., None]
    fs = build_features(C[:, None], R, batch.A_c[:, None], batch.A_u)
    n = len(actions)
    return type(fs)(fs.X_c1[0, :n], fs.X_c2[0, :n], fs.X_u[0, :n])
