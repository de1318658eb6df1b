"""
KNN and one-vs-rest polynomial-kernel SVM baselines over the shared feature
vectors.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

KNN_CANDIDATES = (1, 3, 5, 7, 10, 15)
SVM_DEGREES = (2, 3)
SVM_C = 10.0
KKT_TOL = 1e-3
MAX_SMO_ITER = 200_000


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# KNN


@dataclass(frozen=True)
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    K: int


def knn_fit(features, labels, K: int) -> KnnModel:
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if len(y) != X.shape[0]:
        raise ValueError("features and labels differ in length")
    if not 1 <= K <= X.shape[0]:
        raise ValueError(f"K={K} outside [1, {X.shape[0]}]")
    return KnnModel(X, y, int(K))


def _distances(A, B) -> np.ndarray:
    sq = (A ** 2).sum(1)[:, None] + (B ** 2).sum(1)[None, :] - 2 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def _vote(dist_row: np.ndarray, labels: np.ndarray, K: int) -> int:
    order = np.argsort(dist_row, kind="stable")[:K]
    lab = labels[order]
    cats, counts = np.unique(lab, return_counts=True)
    tied = cats[counts == counts.max()]
    if len(tied) == 1:
        return int(tied[0])
    mean_d = [dist_row[order][lab == c].mean() for c in tied]
    # np.unique returns sorted categories and argmin takes the first minimum
    return int(tied[int(np.argmin(mean_d))])


def knn_predict(model: KnnModel, features) -> np.ndarray:
    """Majority vote among the K nearest (Euclidean) training points.

    Ties go to the category with smaller mean neighbour distance, then to the
    lowest category index.
    """
    Q = np.atleast_2d(np.asarray(features, dtype=float))
    dist = _distances(Q, model.X)
    return np.array([_vote(row, model.y, model.K) for row in dist], dtype=int)


def knn_select_k(train_X, train_y, sel_X=None, sel_y=None,
                 candidates: Sequence[int] = KNN_CANDIDATES, leave_one_out: bool = False) -> int:
    """Pick K by accuracy on a selection set (ties -> smaller K).

    With ``leave_one_out`` the training set itself is the selection set and
    each point is excluded from its own neighbourhood.
    """
    train_X = np.atleast_2d(np.asarray(train_X, dtype=float))
    train_y = np.asarray(train_y, dtype=int)
    if not candidates:
        raise ValueError("no K candidates")
    if leave_one_out:
        dist = _distances(train_X, train_X)
        np.fill_diagonal(dist, np.inf)
        truth = train_y
        limit = train_X.shape[0] - 1
    else:
        sel_X = np.atleast_2d(np.asarray(sel_X, dtype=float))
        truth = np.asarray(sel_y, dtype=int)
        dist = _distances(sel_X, train_X)
        limit = train_X.shape[0]
    best_k, best_acc = None, -1.0
    for k in sorted(set(int(c) for c in candidates)):
        if not 1 <= k <= limit:
            continue
        pred = np.array([_vote(row, train_y, k) for row in dist])
        acc = float(np.mean(pred == truth))
        if acc > best_acc:
            best_k, best_acc = k, acc
    if best_k is None:
        raise ValueError("no admissible K candidate")
    return best_k


# ---------------------------------------------------------------------------
# SVM


def poly_kernel(A, B, degree: int) -> np.ndarray:
    return (np.atleast_2d(A) @ np.atleast_2d(B).T + 1.0) ** degree


@dataclass(frozen=True)
class BinarySvm:
    alpha: np.ndarray       # support-vector dual coefficients, in (0, C]
    y: np.ndarray           # +-1 labels of the support vectors
    sv: np.ndarray
    b: float
    iterations: int
    kkt_gap: float


@dataclass(frozen=True)
class SvmModel:
    classes: np.ndarray
    machines: Tuple[BinarySvm, ...]
    degree: int
    C: float


def smo_binary(Kmat: np.ndarray, y: np.ndarray, C: float, tol: float = KKT_TOL,
               max_iter: int = MAX_SMO_ITER) -> Tuple[np.ndarray, float, int, float]:
    """Solve the C-SVM dual by SMO with second-order working-set selection.

    Returns (alpha, b, iterations, final KKT gap).
    """
    n = len(y)
    y = y.astype(float)
    alpha = np.zeros(n)
    grad = -np.ones(n)                     # gradient of 1/2 a'Qa - e'a
    diag = np.diag(Kmat).copy()
    it = 0
    while True:
        pos, neg = y > 0, y < 0
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        score = -y * grad
        m_up = np.where(up, score, -np.inf)
        i = int(np.argmax(m_up))
        m = m_up[i]
        M = np.where(low, score, np.inf).min()
        gap = m - M
        if gap < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"SMO did not converge in {max_iter} iterations "
                                   f"(KKT gap {gap:.3g}, tol {tol:g})")
        b_t = m - score
        a_t = diag[i] + diag - 2 * Kmat[i]
        a_t = np.where(a_t > 0, a_t, 1e-12)
        cand = low & (b_t > 0)
        j = int(np.argmax(np.where(cand, b_t * b_t / a_t, -np.inf)))
        lam = (m - score[j]) / a_t[j]
        lam = min(lam, C - alpha[i] if y[i] > 0 else alpha[i])
        lam = min(lam, alpha[j] if y[j] > 0 else C - alpha[j])
        di, dj = y[i] * lam, -y[j] * lam
        alpha[i] = min(max(alpha[i] + di, 0.0), C)
        alpha[j] = min(max(alpha[j] + dj, 0.0), C)
        grad += y * (y[i] * di * Kmat[:, i] + y[j] * dj * Kmat[:, j])
        it += 1
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(np.mean(-y[free] * grad[free]))
    else:
        b = float((m + M) / 2) if np.isfinite(m + M) else 0.0
    return alpha, b, it, float(gap)


def svm_fit(features, labels, degree: int = 3, C: float = SVM_C, tol: float = KKT_TOL) -> SvmModel:
    """One-vs-rest polynomial-kernel SVMs, one per category present."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=int)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two categories")
    Kmat = poly_kernel(X, X, degree)
    machines = []
    for c in classes:
        yy = np.where(y == c, 1.0, -1.0)
        alpha, b, it, gap = smo_binary(Kmat, yy, C, tol)
        sv = alpha > 0
        machines.append(BinarySvm(alpha[sv], yy[sv], X[sv], b, it, gap))
    return SvmModel(classes, tuple(machines), int(degree), float(C))


def svm_decision(model: SvmModel, features) -> np.ndarray:
    """Decision values, one column per category."""
    Q = np.atleast_2d(np.asarray(features, dtype=float))
    cols = []
    for mach in model.machines:
        if len(mach.alpha):
            cols.append(poly_kernel(Q, mach.sv, model.degree) @ (mach.alpha * mach.y) + mach.b)
        else:
            cols.append(np.full(Q.shape[0], mach.b))
    return np.column_stack(cols)


def svm_predict(model: SvmModel, features) -> np.ndarray:
    return model.classes[np.argmax(svm_decision(model, features), axis=1)]


def svm_select(features, labels, degrees: Sequence[int] = SVM_DEGREES, C: float = SVM_C
               ) -> SvmModel:
    """Fit each candidate degree and keep the one with the best training
    accuracy (ties -> lower degree)."""
    best, best_acc = None, -1.0
    for p in sorted(degrees):
        model = svm_fit(features, labels, p, C)
        acc = float(np.mean(svm_predict(model, features) == np.asarray(labels)))
        if acc > best_acc:
            best, best_acc = model, acc
    return best
