"""Alternating optimization of node weights and SVM duals.

Each outer iteration:

1. one projected-gradient step (Armijo-guarded) on the convex nodes
   (``p >= 1``) and CCCP rounds on the concave ones (``0 < p < 1``), with
   the w-norms held fixed;
2. pruning of nodes whose weight fell to (near) zero;
3. an exact dual solve on the composite kernel with the new weights,
   followed by the w-norm update.

The primal objective is evaluated after every block and recorded once per
outer iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import qp
from .errors import ConfigError, DataError, DegenerateProblemError, EmptyModelError
from .kernels import KernelSpec, KernelWorkspace
from .spn_graph import DEFAULT_MAX_PATHS, PathTable, SpnGraph, enumerate_paths, prune_zero_nodes
from .weighting import (
    coeff_array,
    grad_R1_array,
    grad_R2_array,
    path_weights,
    r1_terms,
)

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-10
QP_TOL_FLOOR = 1e-13


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    lam: float = 1.0
    p_default: float = 1.0
    p: Mapping[str, float] = field(default_factory=dict)
    outer_max_iters: int = 200
    outer_rel_tol: float = 1e-5
    eta0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_shrinks: int = 30
    beta_steps: int = 1
    cccp_max_rounds: int = 10
    cccp_max_inner: int = 50
    cccp_tol: float = 1e-10
    prune_threshold: float = 1e-8
    qp_tol: float = qp.DEFAULT_TOL
    qp_max_iter: int = qp.DEFAULT_MAX_ITER
    max_paths: int = DEFAULT_MAX_PATHS
    seed: int = 0

    def __post_init__(self):
        if not self.outer_rel_tol > 0:
            raise ConfigError("outer_rel_tol must be positive")
        if not 0 < self.shrink < 1:
            raise ConfigError("shrink factor must lie in (0, 1)")
        if not self.C > 0:
            raise ConfigError("C must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.p_default > 0 or any(not v > 0 for v in self.p.values()):
            raise ConfigError("exponents p must be positive")
        if self.prune_threshold < 0:
            raise ConfigError("prune_threshold must be nonnegative")
        if self.outer_max_iters < 1 or self.beta_steps < 1 or self.cccp_max_inner < 1 or self.cccp_max_rounds < 1:
            raise ConfigError("iteration counts must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training option(s) {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = dict(self.p)
        return d


@dataclass
class ObjectiveParts:
    total: float
    R1: float
    R2: float
    hinge: float


@dataclass
class TrainState:
    """Loop state; arrays are aligned with ``table.paths`` / ``table.product_ids``.

    ``g_w`` are the path weights the current w's were built with, so
    ``w_m = g_w[m] * sum_i a_i y_i phi_m(x_i)`` and the decision values
    do not change when ``betas`` move with w fixed.
    """

    graph: SpnGraph
    table: PathTable
    ws: KernelWorkspace
    betas: np.ndarray
    p: np.ndarray
    coeffs: np.ndarray
    Y: np.ndarray
    alphas: np.ndarray
    biases: np.ndarray
    g_w: np.ndarray
    V: np.ndarray
    w_sq: np.ndarray
    pruned: list[str] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    @property
    def beta_map(self) -> dict[str, float]:
        return dict(zip(self.table.product_ids, self.betas.tolist()))

    def decision_values(self) -> np.ndarray:
        return np.einsum("m,cmn->cn", self.g_w, self.V) + self.biases[:, None]


# ---------------------------------------------------------------------------
# Blocks


def compose_optimal_kernel(table: PathTable, ws: KernelWorkspace, betas) -> np.ndarray:
    beta = betas if isinstance(betas, np.ndarray) else np.array([betas[v] for v in table.product_ids])
    g = path_weights(table, beta)
    if not np.any(g > 0):
        raise EmptyModelError("every path weight is zero")
    return np.tensordot(g, ws.path_grams, axes=1)


def _quad_parts(ws: KernelWorkspace, alphas: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``V[c, m] = K_m (a_c * y_c)``, shape ``(n_problems, n_paths, N)``."""
    U = alphas * Y
    return np.einsum("mij,cj->cmi", ws.path_grams, U)


def update_w_norms(table: PathTable, ws: KernelWorkspace, betas, alphas, Y) -> np.ndarray:
    """Squared w-norm per path, summed over one-vs-rest problems."""
    alphas, Y = np.atleast_2d(alphas), np.atleast_2d(Y)
    beta = betas if isinstance(betas, np.ndarray) else np.array([betas[v] for v in table.product_ids])
    V = _quad_parts(ws, alphas, Y)
    q = np.einsum("cmi,ci->m", V, alphas * Y)
    return np.maximum(path_weights(table, beta) ** 2 * q, 0.0)


def eval_objective(state: TrainState, C: float, betas: np.ndarray | None = None) -> ObjectiveParts:
    beta = state.betas if betas is None else betas
    g = path_weights(state.table, beta)
    R1 = float(r1_terms(state.w_sq, g).sum())
    R2 = float(np.dot(state.coeffs, beta**state.p))
    F = state.decision_values()
    hinge = float(np.maximum(0.0, 1.0 - state.Y * F).sum())
    return ObjectiveParts(R1 + R2 + C * hinge, R1, R2, hinge)


def _regularizer(state: TrainState, beta: np.ndarray) -> float:
    g = path_weights(state.table, beta)
    if np.any((g <= 0) & (state.w_sq > 0)):
        return math.inf
    return float(r1_terms(state.w_sq, g).sum() + np.dot(state.coeffs, beta**state.p))


def _projected_step(f, grad, beta, mask, cfg: TrainConfig):
    """One Armijo-backtracked projected gradient step on the masked coordinates.

    Returns ``(new_beta, accepted_eta)``; ``accepted_eta`` is None when
    no step size within the shrink budget gave sufficient decrease.
    """
    f0 = f(beta)
    d = np.where(mask, grad, 0.0)
    if not np.any(d):
        return beta, 0.0
    eta = cfg.eta0
    for _ in range(cfg.max_shrinks + 1):
        trial = np.where(mask, np.maximum(beta - eta * d, 0.0), beta)
        f1 = f(trial)
        if np.isfinite(f1) and f1 <= f0 + cfg.armijo * float(d @ (trial - beta)):
            return trial, eta
        eta *= cfg.shrink
    return beta, None


def beta_step_convex(state: TrainState, cfg: TrainConfig, mask: np.ndarray | None = None):
    """Projected-gradient update of the nodes with ``p >= 1`` (Jacobi sweep).

    Returns ``(new_betas, info)`` with ``info['stalled']`` set when the
    line search failed and the old weights were kept.
    """
    if mask is None:
        mask = state.p >= 1
    beta, stalled, steps = state.betas.copy(), False, 0
    f = lambda b: _regularizer(state, b)
    for _ in range(cfg.beta_steps):
        if not np.any(mask):
            break
        grad = grad_R1_array(state.table, beta, state.w_sq) + grad_R2_array(beta, state.coeffs, state.p)
        new, eta = _projected_step(f, grad, beta, mask, cfg)
        if eta is None:
            stalled = True
            break
        steps += 1
        if eta == 0.0 or np.array_equal(new, beta):
            beta = new
            break
        beta = new
    return beta, {"stalled": stalled, "steps": steps}


def beta_step_cccp(state: TrainState, cfg: TrainConfig, mask: np.ndarray | None = None):
    """CCCP update of the nodes with ``0 < p < 1``.

    Each round linearizes the concave penalty terms at the current point and
    decreases the convex surrogate ``R1 + sum_v beta_v * dR2/dbeta_v`` by
    repeated projected-gradient steps.  Returns ``(new_betas, info)``;
    ``info['surrogate']`` holds the surrogate values of every round.
    """
    if mask is None:
        mask = state.p < 1
    beta = state.betas.copy()
    info = {"stalled": False, "rounds": 0, "inner": 0, "surrogate": []}
    if not np.any(mask):
        return beta, info
    table, coeffs, p, w_sq = state.table, state.coeffs, state.p, state.w_sq
    r_prev = _regularizer(state, beta)
    for _ in range(cfg.cccp_max_rounds):
        if np.any(beta[mask] <= 0):
            break
        # tangent of the concave terms at the anchor; the surrogate majorizes R
        anchor = beta.copy()
        lin = grad_R2_array(anchor, coeffs, p)
        r2_anchor = coeffs * anchor**p

        def surrogate(b):
            g = path_weights(table, b)
            if np.any((g <= 0) & (w_sq > 0)):
                return math.inf
            r2 = np.where(mask, r2_anchor + lin * (b - anchor), coeffs * b**p)
            return float(r1_terms(w_sq, g).sum() + r2.sum())

        values = [surrogate(beta)]
        converged = False
        for _ in range(cfg.cccp_max_inner):
            grad = grad_R1_array(table, beta, w_sq) + np.where(mask, lin, 0.0)
            new, eta = _projected_step(surrogate, grad, beta, mask, cfg)
            info["inner"] += 1
            if eta is None or eta == 0.0:
                converged = True
                break
            beta = new
            values.append(surrogate(beta))
            if values[-2] - values[-1] <= cfg.cccp_tol * max(1.0, abs(values[-2])):
                converged = True
                break
        if not converged:
            info["stalled"] = True
        info["rounds"] += 1
        info["surrogate"].append(values)
        r = _regularizer(state, beta)
        if r_prev - r <= cfg.cccp_tol * max(1.0, abs(r_prev)):
            break
        r_prev = r
    return beta, info


# ---------------------------------------------------------------------------
# Driver


def _encode_labels(labels: np.ndarray) -> tuple[list, np.ndarray]:
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DegenerateProblemError("training labels contain a single class")
    if len(classes) == 2:
        Y = np.where(labels == classes[1], 1.0, -1.0)[None, :]
    else:
        Y = np.stack([qp.one_vs_rest_labels(labels, c) for c in classes])
    return classes, Y


def _solve_duals(state: TrainState, C: float, tol: float, cfg: TrainConfig, warm: bool):
    K = compose_optimal_kernel(state.table, state.ws, state.betas)
    for c in range(len(state.Y)):
        start = state.alphas[c] if warm else None
        sol = qp.solve_dual(K, state.Y[c], C, tol, cfg.qp_max_iter, start)
        state.alphas[c] = sol.alpha
        state.biases[c] = sol.bias
    state.g_w = path_weights(state.table, state.betas)
    state.V = _quad_parts(state.ws, state.alphas, state.Y)
    q = np.einsum("cmi,ci->m", state.V, state.alphas * state.Y)
    state.w_sq = np.maximum(state.g_w**2 * q, 0.0)


def _dual_block(state: TrainState, cfg: TrainConfig, ceiling: float) -> ObjectiveParts:
    """Solve the duals; tighten the tolerance until the objective does not exceed ``ceiling``."""
    tol = cfg.qp_tol
    _solve_duals(state, cfg.C, tol, cfg, warm=True)
    obj = eval_objective(state, cfg.C)
    while obj.total > ceiling + MONOTONE_SLACK * max(1.0, abs(ceiling)) and tol > QP_TOL_FLOOR:
        tol = max(tol * 1e-2, QP_TOL_FLOOR)
        _solve_duals(state, cfg.C, tol, cfg, warm=True)
        obj = eval_objective(state, cfg.C)
    return obj


def _apply_pruning(state: TrainState, cfg: TrainConfig) -> list[str]:
    beta_map = state.beta_map
    graph, table = prune_zero_nodes(state.graph, state.table, beta_map, cfg.prune_threshold, cfg.max_paths)
    if table is state.table:
        return []
    removed = [n.id for n in state.graph.nodes if n.id not in graph]
    keep_paths = _match_paths(state.table, table)
    state.graph, state.table = graph, table
    state.ws = state.ws.restrict(table)
    state.betas = np.array([beta_map[v] for v in table.product_ids])
    state.p = np.array([_p_for(state.graph, v, cfg) for v in table.product_ids])
    state.coeffs = coeff_array(table, cfg.lam)
    state.g_w = state.g_w[keep_paths]
    state.V = state.V[:, keep_paths]
    state.w_sq = state.w_sq[keep_paths]
    state.pruned.extend(removed)
    return removed


def _match_paths(old: PathTable, new: PathTable) -> list[int]:
    lookup = {(p.members, p.leaves): p.id for p in old.paths}
    return [lookup[(p.members, p.leaves)] for p in new.paths]


def _p_for(graph: SpnGraph, v: str, cfg: TrainConfig) -> float:
    if v in cfg.p:
        return float(cfg.p[v])
    own = graph[v].p
    return float(own) if own is not None else float(cfg.p_default)


def fit(
    X,
    labels,
    graph: SpnGraph,
    specs: Sequence[KernelSpec],
    config: TrainConfig | None = None,
    *,
    callback: Callable[[int, TrainState], None] | None = None,
    log_record: Callable[[dict], None] | None = None,
    n_jobs: int = 1,
):
    """Train node weights and SVM duals; returns a :class:`~spnmkl.model_io.TrainedModel`.

    ``callback(iteration, state)`` runs after each weight update and before
    pruning; it may edit ``state.betas`` in place.
    """
    from .model_io import TrainedModel

    cfg = config or TrainConfig()
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise DataError("data rows and labels must align")
    if len(X) < 2:
        raise DataError("need at least two samples")
    unknown = set(cfg.p) - set(graph.product_ids)
    if unknown:
        raise ConfigError(f"exponent override for non-product node(s): {sorted(unknown)}")
    classes, Y = _encode_labels(labels)

    table = enumerate_paths(graph, cfg.max_paths)
    ws = KernelWorkspace.build(X, specs, table, n_jobs=n_jobs)
    n = len(X)
    state = TrainState(
        graph=graph,
        table=table,
        ws=ws,
        betas=np.ones(len(table.product_ids)),
        p=np.array([_p_for(graph, v, cfg) for v in table.product_ids]),
        coeffs=coeff_array(table, cfg.lam),
        Y=Y,
        alphas=np.zeros_like(Y),
        biases=np.zeros(len(Y)),
        g_w=np.zeros(len(table)),
        V=np.zeros((len(Y), len(table), n)),
        w_sq=np.zeros(len(table)),
    )

    def record(it, obj, **extra):
        rec = {
            "iteration": it,
            "objective": obj.total,
            "R1": obj.R1,
            "R2": obj.R2,
            "hinge": obj.hinge,
            "active_nodes": len(state.table.product_ids),
            "paths": len(state.table),
        }
        rec.update(extra)
        state.trace.append(rec)
        if log_record is not None:
            log_record(rec)
        log.debug("iter %d objective %.10g", it, obj.total)

    _solve_duals(state, cfg.C, cfg.qp_tol, cfg, warm=False)
    obj = eval_objective(state, cfg.C)
    record(0, obj, pruned=[], stalled=False, cccp_inner=0)

    converged = False
    # with lambda = 0 the weight block has no minimizer (R1 -> 0 as beta -> inf)
    update_betas = cfg.lam > 0
    it = 0
    for it in range(1, cfg.outer_max_iters + 1):
        prev = obj.total
        stalled, inner = False, 0
        if update_betas:
            new, info = beta_step_convex(state, cfg)
            state.betas = new
            stalled |= info["stalled"]
            new, info = beta_step_cccp(state, cfg)
            state.betas = new
            stalled |= info["stalled"]
            inner = info["inner"]
        if callback is not None:
            callback(it, state)
        removed = _apply_pruning(state, cfg)
        # pruning drops w's, so the objective may legitimately rise there
        ceiling = eval_objective(state, cfg.C).total if not removed else math.inf
        obj = _dual_block(state, cfg, ceiling)
        record(it, obj, pruned=removed, stalled=stalled, cccp_inner=inner)
        if not removed and abs(prev - obj.total) <= cfg.outer_rel_tol * max(abs(prev), 1e-300):
            converged = True
            break

    return TrainedModel.from_state(state, X, labels, classes, specs, cfg, converged=converged, iterations=it)
