"""Decision metrics over a score matrix and an oracle outcome table.

All functions take ``scores`` and ``oracle`` as (n_rows, n_actions) arrays
where column j is the action whose bit i is ``(j >> i) & 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

BOUND_TOL = 1e-9


def _check_pair(scores, oracle):
    scores = np.asarray(scores, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if scores.ndim != 2 or scores.shape != oracle.shape:
        raise ValueError(f"scores {scores.shape} and oracle {oracle.shape} must match (2-D)")
    return scores, oracle


def _check_k(k, n_actions):
    if not 1 <= k <= n_actions:
        raise ValueError(f"k={k} outside [1, {n_actions}]")


def rank(values, index: int) -> int:
    """Number of entries >= values[index] (tied entries share the larger rank)."""
    values = np.asarray(values, dtype=np.float64)
    if not 0 <= index < len(values):
        raise IndexError(f"index {index} out of range for {len(values)} values")
    return int(np.sum(values >= values[index]))


def rank_matrix(values) -> np.ndarray:
    """Row-wise ranks: out[i, a] = #{b : values[i, b] >= values[i, a]}."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    return (values[:, None, :] >= values[:, :, None]).sum(axis=2)


def topk_actions(values, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the smaller action index."""
    values = np.asarray(values, dtype=np.float64)
    _check_k(k, values.shape[-1])
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def _topk_sum(scores, oracle, k):
    idx = topk_actions(scores, k)
    return np.take_along_axis(oracle, idx, axis=1).sum(axis=1)


def _best_sum(oracle, k):
    return -np.sort(-oracle, axis=1)[:, :k].sum(axis=1)


def mcg_regret(scores, oracle, k: int = 1):
    """Mean cumulative gain of the top-k policy and its regret against the oracle."""
    scores, oracle = _check_pair(scores, oracle)
    _check_k(k, scores.shape[1])
    mcg = float(np.mean(_topk_sum(scores, oracle, k)) / k)
    best = float(np.mean(_best_sum(oracle, k)) / k)
    return mcg, best - mcg


def nmcg(scores, oracle, k: int = 1) -> float:
    """Selected oracle outcome mass over the oracle's own top-k mass (NaN if that is 0)."""
    scores, oracle = _check_pair(scores, oracle)
    _check_k(k, scores.shape[1])
    denom = float(np.sum(_best_sum(oracle, k)))
    if denom == 0.0:
        return math.nan
    return float(np.sum(_topk_sum(scores, oracle, k))) / denom


def uniform_mse(scores, oracle) -> float:
    scores, oracle = _check_pair(scores, oracle)
    return float(np.mean((oracle - scores) ** 2))


def er_ku(scores, oracle, k: int = 1) -> float:
    """Fraction of (row, action) cells whose top-k membership differs."""
    scores, oracle = _check_pair(scores, oracle)
    _check_k(k, scores.shape[1])
    true_in = rank_matrix(oracle) <= k
    pred_in = rank_matrix(scores) <= k
    return float(np.mean(true_in ^ pred_in))


def er_via_01loss(scores, oracle, k: int = 1) -> float:
    """Top-k error written as a 0-1 classification risk around the k-th best outcome.

    The score of each row is shifted so that its k-th largest entry lands on the
    k-th largest oracle value; each action is then classified by the sign of its
    margin to that threshold.
    """
    scores, oracle = _check_pair(scores, oracle)
    _check_k(k, scores.shape[1])
    y_k = -np.sort(-oracle, axis=1)[:, k - 1:k]
    f_k = -np.sort(-scores, axis=1)[:, k - 1:k]
    shifted = scores - f_k + y_k
    loss = ((oracle - y_k) >= 0) ^ ((shifted - y_k) >= 0)
    return float(np.mean(loss))


def bound_check(regret: float, er: float, mse: float, n_actions: int, k: int):
    """Right-hand side of regret <= (|A|/k) sqrt(ER * MSE) and whether it holds."""
    rhs = n_actions / k * math.sqrt(max(er, 0.0) * max(mse, 0.0))
    return rhs, bool(regret <= rhs + BOUND_TOL)


@dataclass
class MetricsReport:
    k: int
    nmcg: float
    mcg: float
    regret: float
    mse_u: float
    er_u: float
    bound_rhs: float
    bound_ok: bool

    def as_dict(self):
        return asdict(self)


def evaluate(scores, oracle, k: int = 1) -> MetricsReport:
    scores, oracle = _check_pair(scores, oracle)
    mcg, regret = mcg_regret(scores, oracle, k)
    mse = uniform_mse(scores, oracle)
    er = er_ku(scores, oracle, k)
    rhs, ok = bound_check(regret, er, mse, scores.shape[1], k)
    return MetricsReport(
        k=k,
        nmcg=nmcg(scores, oracle, k),
        mcg=mcg,
        regret=regret,
        mse_u=mse,
        er_u=er,
        bound_rhs=rhs,
        bound_ok=ok,
    )
