from __future__ import annotations

from itertools import permutations

import numpy as np
import pytest

from rmnet.sinkhorn import (
    SinkhornError,
    TransportProblem,
    cost_matrix,
    sinkhorn,
    sinkhorn_distance,
    sinkhorn_grad,
    sinkhorn_plan,
)


def exact_ot_equal_sizes(A, B):
    """Exact OT for uniform weights and equal sizes: the optimum is a permutation."""
    C = cost_matrix(A, B)
    n = len(A)
    return min(sum(C[i, p[i]] for i in range(n)) for p in permutations(range(n))) / n


def test_cost_matrix_matches_loops(rng):
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    C = cost_matrix(A, B)
    for i in range(4):
        for j in range(5):
            assert C[i, j] == pytest.approx(np.sum((A[i] - B[j]) ** 2), abs=1e-12)


def test_single_point_pair_exact():
    a, b = np.array([[1.0, 2.0]]), np.array([[4.0, -2.0]])
    dist, _ = sinkhorn_distance(TransportProblem(a, b))
    assert dist == pytest.approx(25.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_three_by_three_close_to_brute_force(seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(3, 2)), r.normal(size=(3, 2))
    exact = exact_ot_equal_sizes(A, B)
    eps = 0.01 * cost_matrix(A, B).mean()
    dist, P = sinkhorn_distance(TransportProblem(A, B, epsilon=eps, max_iters=5000))
    assert abs(dist - exact) <= 0.05 * exact


def test_marginals(rng):
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    P, C, eps, iters = sinkhorn_plan(TransportProblem(A, B))
    np.testing.assert_allclose(P.sum(axis=1), np.full(6, 1 / 6), atol=1e-5)
    np.testing.assert_allclose(P.sum(axis=0), np.full(4, 1 / 4), atol=1e-5)


def test_identical_batches_near_zero(rng):
    A = rng.normal(size=(8, 3))
    eps = 1e-3 * cost_matrix(A, A).mean()
    dist, _ = sinkhorn_distance(TransportProblem(A, A.copy(), epsilon=eps, max_iters=2000))
    assert dist <= 10 * eps * np.log(len(A))


def test_symmetry(rng):
    A, B = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    d1, _ = sinkhorn_distance(TransportProblem(A, B))
    d2, _ = sinkhorn_distance(TransportProblem(B, A))
    assert d1 == pytest.approx(d2, rel=1e-6)


def test_transport_cost_monotone_in_epsilon(rng):
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) + 1
    mean_c = cost_matrix(A, B).mean()
    costs = [
        sinkhorn_distance(TransportProblem(A, B, epsilon=s * mean_c, max_iters=5000, tol=1e-10))[0]
        for s in (0.02, 0.1, 0.5, 2.0)
    ]
    assert all(a <= b + 1e-9 for a, b in zip(costs, costs[1:]))


def test_log_domain_for_tiny_epsilon(rng):
    A, B = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    eps = 1e-4 * cost_matrix(A, B).mean()
    dist, P = sinkhorn_distance(TransportProblem(A, B, epsilon=eps, max_iters=20000))
    assert np.all(np.isfinite(P))
    assert dist == pytest.approx(exact_ot_equal_sizes(A, B), rel=1e-3)


def _directional(A, B, kw, objective, r, h=1e-5):
    P, *_ = sinkhorn_plan(TransportProblem(A, B, **kw))
    ga, gb = sinkhorn_grad(TransportProblem(A, B, **kw), P)
    dA, dB = r.normal(size=A.shape), r.normal(size=B.shape)
    fd = (objective(A + h * dA, B + h * dB) - objective(A - h * dA, B - h * dB)) / (2 * h)
    return fd, np.sum(ga * dA) + np.sum(gb * dB)


def _transport_cost(kw):
    return lambda A, B: sinkhorn_distance(TransportProblem(A, B, **kw))[0]


def _entropic_objective(kw):
    def fn(A, B):
        P, C, eps, _ = sinkhorn_plan(TransportProblem(A, B, **kw))
        return float(np.sum(P * C) + eps * np.sum(P * np.log(P)))
    return fn


@pytest.mark.parametrize("seed", range(5))
def test_envelope_gradient_exact_for_entropic_objective(seed):
    # the fixed-plan gradient is the exact derivative of <P,C> - eps*H(P)
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(5, 3)), r.normal(size=(7, 3))
    kw = dict(epsilon=0.1 * cost_matrix(A, B).mean(), max_iters=20000, tol=1e-13)
    fd, analytic = _directional(A, B, kw, _entropic_objective(kw), r)
    assert abs(fd - analytic) <= 1e-4 * abs(fd)


@pytest.mark.parametrize("seed", range(5))
def test_envelope_gradient_matches_transport_cost_at_small_epsilon(seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(5, 3)), r.normal(size=(7, 3))
    kw = dict(epsilon=1e-3 * cost_matrix(A, B).mean(), max_iters=20000, tol=1e-13)
    fd, analytic = _directional(A, B, kw, _transport_cost(kw), r)
    assert abs(fd - analytic) <= 1e-2 * abs(fd)


@pytest.mark.xfail(
    strict=True,
    reason="at the default epsilon the plan's sensitivity to the points is not negligible, "
    "so the fixed-plan gradient misses part of d<P,C> (median error ~16% over random instances)",
)
def test_envelope_gradient_matches_transport_cost_at_default_epsilon():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        A, B = r.normal(size=(5, 3)), r.normal(size=(7, 3))
        kw = dict(epsilon=0.1 * cost_matrix(A, B).mean(), max_iters=20000, tol=1e-13)
        fd, analytic = _directional(A, B, kw, _transport_cost(kw), r)
        worst = max(worst, abs(fd - analytic) / abs(fd))
    assert worst <= 1e-2


def test_gradient_single_pair_by_hand():
    A, B = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    ga, gb = sinkhorn_grad(TransportProblem(A, B), np.array([[1.0]]))
    np.testing.assert_allclose(ga, [[-6.0, -8.0]])
    np.testing.assert_allclose(gb, [[6.0, 8.0]])


def test_sinkhorn_wrapper_consistent(rng):
    A, B = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    dist, ga, gb = sinkhorn(A, B)
    d2, P = sinkhorn_distance(TransportProblem(A, B))
    assert dist == d2
    assert ga.shape == A.shape and gb.shape == B.shape


def test_input_validation():
    with pytest.raises(ValueError):
        TransportProblem(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        TransportProblem(np.zeros((2, 2)), np.zeros((3, 3)))


def test_nonfinite_input_raises():
    A = np.array([[np.nan, 0.0], [1.0, 1.0]])
    with pytest.raises((SinkhornError, ValueError)):
        sinkhorn_distance(TransportProblem(A, np.ones((2, 2))))
