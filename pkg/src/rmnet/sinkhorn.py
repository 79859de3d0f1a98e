"""Entropy-regularised optimal transport between two point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# exp(-x) underflows float64 just past x ~ 745
_UNDERFLOW = 700.0
_CHECK_EVERY = 10


class SinkhornError(FloatingPointError):
    pass


def cost_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, C[i, j] = |A_i - B_j|^2."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"point dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    C = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(C, 0.0)


@dataclass
class TransportProblem:
    source: np.ndarray
    target: np.ndarray
    epsilon: float | None = None  # None: 0.1 * mean cost
    eps_scale: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        self.source = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        self.target = np.atleast_2d(np.asarray(self.target, dtype=np.float64))
        if len(self.source) == 0 or len(self.target) == 0:
            raise ValueError("both point sets must be non-empty")
        if self.source.shape[1] != self.target.shape[1]:
            raise ValueError(
                f"point dimensions differ: {self.source.shape[1]} vs {self.target.shape[1]}"
            )
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _resolve_epsilon(problem: TransportProblem, C: np.ndarray) -> float:
    if problem.epsilon is not None:
        return float(problem.epsilon)
    eps = problem.eps_scale * float(C.mean())
    # all points coincide: any positive value gives the same (zero-cost) answer
    return eps if eps > 0 else 1.0


def _scaling_iterations(C, a, b, eps, max_iters, tol):
    K = np.exp(-C / eps)
    v = np.ones_like(b)
    for it in range(1, max_iters + 1):
        u = a / (K @ v)
        v = b / (K.T @ u)
        # columns match exactly after the v update; rows carry the residual
        if (it % _CHECK_EVERY == 0 or it == max_iters) and np.abs(u * (K @ v) - a).sum() < tol:
            break
    return u[:, None] * K * v[None, :], it


def _log_iterations(C, a, b, eps, max_iters, tol):
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    for it in range(1, max_iters + 1):
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        if it % _CHECK_EVERY == 0 or it == max_iters:
            P = np.exp((f[:, None] + g[None, :] - C) / eps)
            if np.abs(P.sum(1) - a).sum() < tol:
                break
    return np.exp((f[:, None] + g[None, :] - C) / eps), it


def sinkhorn_plan(problem: TransportProblem):
    """Solve the regularised problem. Returns (plan, cost matrix, epsilon, iterations)."""
    C = cost_matrix(problem.source, problem.target)
    n, n2 = C.shape
    a = np.full(n, 1.0 / n)
    b = np.full(n2, 1.0 / n2)
    eps = _resolve_epsilon(problem, C)
    if C.max() / eps > _UNDERFLOW:
        P, it = _log_iterations(C, a, b, eps, problem.max_iters, problem.tol)
    else:
        P, it = _scaling_iterations(C, a, b, eps, problem.max_iters, problem.tol)
    if not np.all(np.isfinite(P)):
        raise SinkhornError(
            f"transport plan is not finite at epsilon={eps:.3g}; use a larger epsilon"
        )
    return P, C, eps, it


def sinkhorn_distance(problem: TransportProblem):
    """Transport cost <P, C> under the regularised plan (entropy term excluded).

    Returns (distance, plan).
    """
    P, C, _, _ = sinkhorn_plan(problem)
    return float(np.sum(P * C)), P


def sinkhorn_grad(problem: TransportProblem, plan: np.ndarray):
    """Gradient of <P, C> w.r.t. both point sets with the plan held fixed."""
    A, B = problem.source, problem.target
    plan = np.asarray(plan, dtype=np.float64)
    if plan.shape != (len(A), len(B)):
        raise ValueError(f"plan of shape {plan.shape}, expected {(len(A), len(B))}")
    grad_a = 2.0 * (A * plan.sum(1)[:, None] - plan @ B)
    grad_b = 2.0 * (B * plan.sum(0)[:, None] - plan.T @ A)
    return grad_a, grad_b


def sinkhorn(source, target, **kw):
    """Distance plus gradients in one call: (distance, grad_source, grad_target)."""
    problem = TransportProblem(source, target, **kw)
    dist, plan = sinkhorn_distance(problem)
    ga, gb = sinkhorn_grad(problem, plan)
    return dist, ga, gb
