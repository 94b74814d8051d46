"""Path weights ``g_m``, the two-part regularizer and its node gradients.

Node weights travel either as a mapping ``{node_id: beta}`` (public helpers)
or as an array aligned with ``PathTable.product_ids`` (vectorized helpers
used by the trainer).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContinuityError, SingularGradientError
from .spn_graph import Path, PathTable

BETA_FLOOR = 1e-10


@dataclass(frozen=True)
class RegularizerParams:
    lam: float = 1.0
    C: float = 1.0
    p: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0 or self.C < 0:
            raise ValueError("lambda and C must be nonnegative")
        if any(not v > 0 for v in self.p.values()):
            raise ValueError("every exponent p must be positive")

    def p_array(self, table: PathTable) -> np.ndarray:
        return np.array([self.p.get(v, 1.0) for v in table.product_ids])


def as_beta_array(table: PathTable, betas) -> np.ndarray:
    if isinstance(betas, Mapping):
        b = np.array([betas[v] for v in table.product_ids], dtype=float)
    else:
        b = np.asarray(betas, dtype=float)
    if b.shape != (len(table.product_ids),):
        raise ValueError(f"expected {len(table.product_ids)} node weights, got shape {b.shape}")
    if np.any(b < 0):
        raise ValueError("node weights must be nonnegative")
    return b


def g_path(path: Path, betas: Mapping[str, float]) -> float:
    """Path weight: product of member weights raised to ``1/(N_m * N_ml)``."""
    out = 1.0
    for v, e in zip(path.member_ids, path.exponents):
        b = betas[v]
        if b < 0:
            raise ValueError(f"negative weight for node {v!r}")
        out *= b ** float(e)
    return out


def path_weights(table: PathTable, beta: np.ndarray) -> np.ndarray:
    """Vectorized ``g_m`` for every path."""
    return np.prod(np.power(beta[None, :], table.exponent_matrix), axis=1)


def reg_coeffs(table: PathTable, lam: float) -> dict[str, float]:
    """Aggregated penalty coefficient ``c_v`` of every surviving node."""
    return {v: lam * float(u) for v, u in table.coeff_units.items()}


def coeff_array(table: PathTable, lam: float) -> np.ndarray:
    return lam * table.exponent_matrix.sum(axis=0)


def r1_terms(w_sq: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``w_sq / (2 g)`` with the zero-weight limit taken as 0."""
    w_sq = np.asarray(w_sq, dtype=float)
    zero = g <= 0
    if np.any(w_sq[zero] > 0):
        bad = np.flatnonzero(zero & (w_sq > 0)).tolist()
        raise ContinuityError(f"path(s) {bad} have zero weight but nonzero w-norm")
    out = np.zeros_like(w_sq)
    out[~zero] = w_sq[~zero] / (2.0 * g[~zero])
    return out


def regularizer(table: PathTable, beta: np.ndarray, w_sq: np.ndarray, coeffs: np.ndarray, p: np.ndarray):
    g = path_weights(table, beta)
    return float(r1_terms(w_sq, g).sum()), float(np.dot(coeffs, beta**p))


def eval_R(table: PathTable, betas, w_sq, params: RegularizerParams) -> tuple[float, float]:
    """Return ``(R1, R2)``."""
    beta = as_beta_array(table, betas)
    w = np.array([w_sq[m] for m in range(len(table))], dtype=float)
    return regularizer(table, beta, w, coeff_array(table, params.lam), params.p_array(table))


def grad_R1_array(table: PathTable, beta: np.ndarray, w_sq: np.ndarray) -> np.ndarray:
    g = path_weights(table, beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(w_sq > 0, w_sq / (2.0 * g), 0.0)
    num = table.exponent_matrix.T @ t
    # a zero weight is only reachable when all its paths carry w_sq = 0
    return -np.divide(num, beta, out=np.zeros_like(num), where=beta > 0)


def grad_R2_array(beta: np.ndarray, coeffs: np.ndarray, p: np.ndarray) -> np.ndarray:
    return coeffs * p * np.power(beta, p - 1.0)


def grad_R1(v: str, table: PathTable, betas, w_sq) -> float:
    beta = as_beta_array(table, betas)
    i = table.index[v]
    if beta[i] < BETA_FLOOR:
        raise SingularGradientError(f"weight of node {v!r} is below the floor; prune it instead")
    g = path_weights(table, beta)
    total = 0.0
    for m in table.node_to_paths[v]:
        if w_sq[m] > 0:
            total += table.exact_exponents[m, v] * w_sq[m] / (2.0 * g[m])
    return -float(total) / beta[i]


def grad_R2(v: str, coeffs: Mapping[str, float], betas: Mapping[str, float], params: RegularizerParams) -> float:
    b, p = betas[v], params.p.get(v, 1.0)
    if b <= 0 and p < 1:
        raise SingularGradientError(f"d/dbeta of beta^{p} is unbounded at beta=0 (node {v!r})")
    return coeffs[v] * p * b ** (p - 1.0) if p != 1 else coeffs[v]

