"""SVM dual solver: sequential minimal optimization with maximal violating pairs.

Solves::

    max_a  e'a - 1/2 (a*y)' K (a*y)   s.t.  0 <= a <= C,  y'a = 0

Internally the equivalent minimization ``1/2 a'Qa - e'a`` with
``Q = (y y') * K`` is used and the gradient ``G = Qa - e`` is maintained.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateProblemError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10**6
ETA_MIN = 1e-12


@dataclass
class DualSolution:
    alpha: np.ndarray
    bias: float
    objective: float
    n_iter: int
    gap: float
    history: list[float] | None = field(default=None, repr=False)

    @property
    def sv_indices(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    u = alpha * y
    return float(alpha.sum() - 0.5 * u @ K @ u)


def _check(K, y, C):
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if K.shape != (n, n):
        raise DataError(f"kernel shape {K.shape} does not match {n} labels")
    if not np.all(np.abs(y) == 1):
        raise DataError("labels must be +1 or -1")
    if not C > 0:
        raise ValueError("C must be positive")
    if np.all(y > 0) or np.all(y < 0):
        raise DegenerateProblemError("both classes must be present")
    return K, y


def _bias(alpha, y, G, C) -> float:
    """Average over free SVs, else midpoint of the feasible bias interval."""
    # for every i, -y_i G_i = y_i - f_i where f_i = sum_j a_j y_j K_ij
    r = -y * G
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        return float(r[free].mean())
    # y_i (f_i + b) >= 1 at a_i = 0, <= 1 at a_i = C
    lower_mask = ((alpha <= 0) & (y > 0)) | ((alpha >= C) & (y < 0))
    upper_mask = ~lower_mask
    lo = r[lower_mask].max() if np.any(lower_mask) else -np.inf
    hi = r[upper_mask].min() if np.any(upper_mask) else np.inf
    if np.isinf(lo):
        return float(hi)
    if np.isinf(hi):
        return float(lo)
    return float(0.5 * (lo + hi))


def solve_dual(
    K,
    y,
    C: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    alpha0: np.ndarray | None = None,
    record: bool = False,
) -> DualSolution:
    """Solve the binary dual for a fixed kernel matrix.

    ``alpha0`` warm-starts the solver; it must satisfy the box and equality
    constraints.  With ``record=True`` the dual objective after every pair
    update is kept in ``history``.
    """
    K, y = _check(K, y, C)
    n = len(y)
    if alpha0 is None:
        alpha = np.zeros(n)
        G = -np.ones(n)
    else:
        alpha = np.clip(np.asarray(alpha0, dtype=float), 0.0, C)
        G = y * (K @ (alpha * y)) - 1.0
    diag = np.diag(K).copy()
    warned = False
    history = [dual_objective(alpha, y, K)] if record else None

    it = 0
    gap = np.inf
    pos, neg = y > 0, y < 0
    while True:
        minus_yG = -y * G
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        if not up.any() or not low.any():
            gap = 0.0
            break
        cand = np.where(up, minus_yG, -np.inf)
        i = int(np.argmax(cand))
        cand = np.where(low, minus_yG, np.inf)
        j = int(np.argmin(cand))
        gap = float(minus_yG[i] - minus_yG[j])
        if gap < tol or it >= max_iter:
            break
        it += 1
        # move a_i by y_i t and a_j by -y_j t
        t_max = min(C - alpha[i] if y[i] > 0 else alpha[i], alpha[j] if y[j] > 0 else C - alpha[j])
        eta = diag[i] + diag[j] - 2.0 * K[i, j]
        if eta <= ETA_MIN:
            if eta < -ETA_MIN and not warned:
                warnings.warn("kernel matrix has negative curvature; clipping SMO steps", RuntimeWarning)
                warned = True
            t = t_max
        else:
            t = min(gap / eta, t_max)
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        # snap to bounds to keep the active sets exact
        for k in (i, j):
            if alpha[k] < 1e-14 * C:
                alpha[k] = 0.0
            elif alpha[k] > C * (1 - 1e-14):
                alpha[k] = C
        G += t * y * (K[:, i] - K[:, j])
        if record:
            history.append(dual_objective(alpha, y, K))

    if it >= max_iter and gap >= tol:
        log.warning("SMO stopped at max_iter=%d with gap %.3g", max_iter, gap)
    return DualSolution(alpha, _bias(alpha, y, G, C), dual_objective(alpha, y, K), it, gap, history)


def one_vs_rest_labels(labels: np.ndarray, c) -> np.ndarray:
    return np.where(np.asarray(labels) == c, 1.0, -1.0)


def solve_multiclass(
    K,
    labels,
    classes: Sequence,
    C: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    alpha0: dict | None = None,
) -> dict:
    """Independent one-vs-rest duals sharing one kernel."""
    labels = np.asarray(labels)
    if len(classes) < 2:
        raise DegenerateProblemError("need at least two classes")
    out = {}
    for c in classes:
        y_c = one_vs_rest_labels(labels, c)
        if not np.any(y_c > 0):
            raise DegenerateProblemError(f"class {c!r} has no samples")
        start = None if alpha0 is None else alpha0.get(c)
        out[c] = solve_dual(K, y_c, C, tol, max_iter, start)
    return out
