import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridfault.baselines import (SVM_C, ConvergenceError, knn_fit, knn_predict, knn_select_k,
                                 poly_kernel, smo_binary, svm_decision, svm_fit, svm_predict,
                                 svm_select)


# --- KNN --------------------------------------------------------------------

def brute_knn(X, y, q, K):
    ranked = sorted(range(len(X)), key=lambda i: (math.dist(X[i], q), i))[:K]
    votes = {}
    for i in ranked:
        votes.setdefault(int(y[i]), []).append(math.dist(X[i], q))
    top = max(len(v) for v in votes.values())
    tied = [c for c, v in votes.items() if len(v) == top]
    return min(tied, key=lambda c: (sum(votes[c]) / len(votes[c]), c))


def test_knn_single_neighbour():
    m = knn_fit([[0.0, 0.0], [1.0, 1.0]], [0, 3], 1)
    assert knn_predict(m, [[0.9, 0.8], [0.1, 0.0]]).tolist() == [3, 0]


def test_knn_tie_breaks():
    # one neighbour of each category, category 2 is closer on average
    m = knn_fit([[0.0], [3.0]], [1, 2], 2)
    assert knn_predict(m, [[2.0]]).tolist() == [2]
    # equal mean distance falls back to the lowest index
    assert knn_predict(m, [[1.5]]).tolist() == [1]


def test_knn_matches_bruteforce():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 4, (40, 3)).astype(float)   # integer grid forces distance ties
    y = rng.integers(0, 4, 40)
    Q = rng.integers(0, 4, (100, 3)).astype(float)
    for K in (1, 2, 3, 4, 7):
        pred = knn_predict(knn_fit(X, y, K), Q)
        assert pred.tolist() == [brute_knn(X, y, q, K) for q in Q]


def test_knn_full_training_set_is_majority():
    rng = np.random.default_rng(1)
    X = rng.random((11, 2))
    y = np.array([0] * 2 + [1] * 5 + [2] * 3 + [3])
    pred = knn_predict(knn_fit(X, y, 11), rng.random((20, 2)))
    assert np.all(pred == 1)


def test_knn_fit_errors():
    with pytest.raises(ValueError):
        knn_fit(np.zeros((0, 2)), [], 1)
    with pytest.raises(ValueError):
        knn_fit([[0.0]], [0], 2)
    with pytest.raises(ValueError):
        knn_fit([[0.0], [1.0]], [0], 1)


def test_knn_select_leave_one_out():
    # alternating labels along a line: K=1 sees the partner point, K=3 is outvoted
    X = np.array([[0.0], [0.1], [5.0], [5.1], [10.0], [10.1]])
    y = np.array([0, 0, 1, 1, 2, 2])
    assert knn_select_k(X, y, candidates=(1, 3), leave_one_out=True) == 1
    assert knn_select_k(X, y, candidates=(3,), leave_one_out=True) == 3
    with pytest.raises(ValueError):
        knn_select_k(X, y, candidates=(), leave_one_out=True)
    with pytest.raises(ValueError):
        knn_select_k(X, y, candidates=(6,), leave_one_out=True)


def test_knn_select_on_validation_prefers_smaller_k():
    X = np.array([[0.0], [1.0]])
    y = np.array([0, 1])
    assert knn_select_k(X, y, [[0.1]], [0], candidates=(1, 2)) == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_knn_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.random((15, 3)), rng.integers(0, 4, 15)
    Q = rng.random((6, 3))
    perm = rng.permutation(15)
    for K in (1, 3, 5):
        assert np.array_equal(knn_predict(knn_fit(X, y, K), Q),
                              knn_predict(knn_fit(X[perm], y[perm], K), Q))


# --- SVM --------------------------------------------------------------------

def test_poly_kernel_matches_explicit_features():
    # (x.z + 1)^2 in two dimensions equals phi(x).phi(z) with the monomial map
    def phi(v):
        a, b = v
        r2 = math.sqrt(2)
        return np.array([1, r2 * a, r2 * b, a * a, b * b, r2 * a * b])
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
    explicit = np.array([[phi(a) @ phi(b) for b in B] for a in A])
    assert np.max(np.abs(poly_kernel(A, B, 2) - explicit)) < 1e-9


def kkt_violation(Kmat, y, alpha, b, C):
    f = Kmat @ (alpha * y) + b
    margin = y * f
    worst = 0.0
    for a, m in zip(alpha, margin):
        if a <= 1e-12:
            worst = max(worst, 1 - m)
        elif a >= C - 1e-12:
            worst = max(worst, m - 1)
        else:
            worst = max(worst, abs(m - 1))
    return worst


def test_separable_pair_margin():
    X = np.array([[1.0, 0.0], [-1.0, 0.0]])
    y = np.array([1.0, -1.0])
    K = poly_kernel(X, X, 1)
    alpha, b, _, _ = smo_binary(K, y, SVM_C)
    # hard-margin optimum: w = (1/2, 0) scaled so margins are exactly 1
    f = K @ (alpha * y) + b
    assert np.allclose(y * f, 1.0, atol=1e-3)
    assert np.all(y * f >= 1 - 1e-3)


def test_xor_degree_two():
    X = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    labels = np.array([0, 0, 1, 1])
    model = svm_fit(X, labels, degree=2)
    assert svm_predict(model, X).tolist() == labels.tolist()
    assert svm_predict(model, 2 * X).tolist() == labels.tolist()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), degree=st.sampled_from([1, 2, 3]),
       C=st.sampled_from([0.1, 1.0, 10.0]))
def test_smo_dual_feasibility_and_kkt(seed, degree, C):
    rng = np.random.default_rng(seed)
    X = rng.random((25, 3))
    y = np.where(rng.random(25) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    K = poly_kernel(X, X, degree)
    alpha, b, _, gap = smo_binary(K, y, C, tol=1e-6)
    assert np.all(alpha >= 0) and np.all(alpha <= C)
    assert abs(np.dot(alpha, y)) < 1e-6
    assert gap < 1e-6
    assert kkt_violation(K, y, alpha, b, C) < 1e-4


def test_smo_iteration_cap():
    rng = np.random.default_rng(3)
    X = rng.random((30, 2))
    y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    with pytest.raises(ConvergenceError):
        smo_binary(poly_kernel(X, X, 3), y, SVM_C, tol=1e-9, max_iter=2)


def test_decision_is_kernel_expansion():
    rng = np.random.default_rng(4)
    X, labels = rng.random((20, 3)), np.arange(20) % 4
    model = svm_fit(X, labels, degree=3)
    Q = rng.random((5, 3))
    dec = svm_decision(model, Q)
    for c, mach in enumerate(model.machines):
        for r, q in enumerate(Q):
            s = sum(a * yy * (np.dot(q, sv) + 1) ** 3 for a, yy, sv in zip(mach.alpha, mach.y, mach.sv))
            assert abs(dec[r, c] - (s + mach.b)) < 1e-9


def test_svm_select_prefers_lower_degree_on_tie():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 1.0], [1.1, 1.0]])
    labels = np.array([0, 0, 1, 1])
    assert svm_select(X, labels, (3, 2)).degree == 2
    with pytest.raises(ValueError):
        svm_fit(X, np.zeros(4, dtype=int))


def test_svm_labels_are_original_categories():
    X = np.array([[0.0], [0.1], [5.0], [5.1], [10.0], [10.1]])
    labels = np.array([1, 1, 3, 3, 2, 2])
    model = svm_fit(X, labels, degree=2)
    assert set(model.classes.tolist()) == {1, 2, 3}
    assert set(svm_predict(model, X).tolist()) <= {1, 2, 3}
