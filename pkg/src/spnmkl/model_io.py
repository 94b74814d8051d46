"""Trained models: prediction, complexity diagnostics and JSON persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, ModelFormatError
from .kernels import KernelSpec, KernelWorkspace, compute_A, cross_gram, hadamard
from .qp import one_vs_rest_labels
from .spn_graph import PathTable, SpnGraph, enumerate_paths, spn_from_dict, spn_to_dict
from .weighting import path_weights

FORMAT_VERSION = 1
_LOAD_MAX_PATHS = 10**7


@dataclass
class TrainedModel:
    """Everything needed to evaluate the decision functions.

    ``alphas``, ``ys`` have shape ``(n_problems, n_sv)``: one row for a
    binary model, one per class (one-vs-rest) otherwise.  ``sv_index``
    holds the training-row positions of ``sv_rows`` when known.
    """

    graph: SpnGraph
    specs: list[KernelSpec]
    betas: dict[str, float]
    p: dict[str, float]
    lam: float
    C: float
    classes: list
    sv_rows: np.ndarray
    alphas: np.ndarray
    ys: np.ndarray
    biases: np.ndarray
    norm_stats: dict[str, list[float]] = field(default_factory=dict)
    pruned: list[str] = field(default_factory=list)
    training: dict = field(default_factory=dict)
    g_cache: np.ndarray | None = None
    sv_index: np.ndarray | None = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.table: PathTable = enumerate_paths(self.graph, _LOAD_MAX_PATHS)
        g = path_weights(self.table, self.beta_array)
        if self.g_cache is None:
            self.g_cache = g
        elif len(self.g_cache) != len(g) or not np.allclose(self.g_cache, g, rtol=1e-12, atol=0):
            raise ModelFormatError("stored path weights disagree with the node weights")

    @property
    def beta_array(self) -> np.ndarray:
        return np.array([self.betas[v] for v in self.table.product_ids])

    @property
    def binary(self) -> bool:
        return len(self.classes) == 2

    @property
    def n_features(self) -> int:
        return self.sv_rows.shape[1]

    @property
    def has_support(self) -> bool:
        return len(self.sv_rows) > 0

    @classmethod
    def from_state(cls, state, X, labels, classes, specs, cfg, converged: bool, iterations: int):
        keep = np.flatnonzero(np.any(state.alphas > 0, axis=0))
        used = {k for p in state.table.paths for k in p.leaves}
        specs = [s for s in specs if s.name in used]
        rows = X[keep]
        F = state.decision_values()
        pred = _labels_from_decision(F.T if len(classes) > 2 else F[0], classes)
        model = cls(
            graph=state.graph,
            specs=specs,
            betas=state.beta_map,
            p=dict(zip(state.table.product_ids, state.p.tolist())),
            lam=cfg.lam,
            C=cfg.C,
            classes=list(classes),
            sv_rows=rows,
            sv_index=keep,
            alphas=state.alphas[:, keep],
            ys=state.Y[:, keep],
            biases=state.biases.copy(),
            norm_stats={s.name: s.self_values(rows).tolist() for s in specs if s.normalize},
            pruned=list(state.pruned),
        )
        info = _plugin_bound(model, state.ws, state.Y, F)
        model.training = {
            "iterations": iterations,
            "converged": converged,
            "objective": state.trace[-1]["objective"],
            "objective_trace": [r["objective"] for r in state.trace],
            "train_accuracy": float(np.mean(pred == np.asarray(labels))),
            "A": info["A"],
            "rademacher_plugin_bound": info["bound"],
            "config": cfg.to_dict(),
        }
        return model

    # -- evaluation ---------------------------------------------------------

    def decision_function(self, Q) -> np.ndarray:
        """Decision values: shape ``(n,)`` for binary models, ``(n, n_classes)`` otherwise."""
        Q = np.asarray(Q, dtype=float)
        if Q.ndim == 1:
            Q = Q[None, :]
        if Q.ndim != 2 or Q.shape[1] != self.n_features:
            raise DataError(f"query has {Q.shape[-1]} features, model expects {self.n_features}")
        F = np.tile(self.biases, (len(Q), 1))
        if not self.has_support:
            return F[:, 0] if self.binary else F
        U = self.alphas * self.ys
        leaf = {}
        for s in self.specs:
            diag = np.asarray(self.norm_stats[s.name]) if s.normalize else None
            leaf[s.name] = cross_gram(self.sv_rows, Q, s, diag)
        for g, path in zip(self.g_cache, self.table.paths):
            if g > 0:
                F += g * (hadamard([leaf[k] for k in path.leaves]) @ U.T)
        return F[:, 0] if self.binary else F

    def predict(self, Q):
        F = self.decision_function(Q)
        return F, _labels_from_decision(F, self.classes)

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": self.version,
            "graph": spn_to_dict(self.graph),
            "kernels": [s.to_dict() for s in self.specs],
            "classes": self.classes,
            "lambda": self.lam,
            "C": self.C,
            "betas": self.betas,
            "p": self.p,
            "path_weights": self.g_cache.tolist(),
            "paths": [
                {
                    "leaves": list(p.leaves),
                    "members": [v for v in p.member_ids],
                    "exponents": [str(e) for e in p.exponents],
                }
                for p in self.table.paths
            ],
            "biases": self.biases.tolist(),
            "alphas": self.alphas.tolist(),
            "ys": self.ys.tolist(),
            "n_features": self.n_features,
            "sv_rows": self.sv_rows.tolist(),
            "sv_index": None if self.sv_index is None else [int(i) for i in self.sv_index],
            "norm_stats": self.norm_stats,
            "pruned": self.pruned,
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format version {version!r} (expected {FORMAT_VERSION})")
        try:
            n_features = int(d["n_features"])
            return cls(
                graph=spn_from_dict(d["graph"]),
                specs=[KernelSpec.from_dict(s) for s in d["kernels"]],
                betas={k: float(v) for k, v in d["betas"].items()},
                p={k: float(v) for k, v in d["p"].items()},
                lam=d["lambda"],
                C=d["C"],
                classes=list(d["classes"]),
                sv_rows=np.array(d["sv_rows"], dtype=float).reshape(-1, n_features),
                alphas=np.array(d["alphas"], dtype=float).reshape(len(d["biases"]), -1),
                ys=np.array(d["ys"], dtype=float).reshape(len(d["biases"]), -1),
                biases=np.array(d["biases"], dtype=float),
                norm_stats=d.get("norm_stats", {}),
                pruned=list(d.get("pruned", [])),
                training=d.get("training", {}),
                g_cache=np.array(d["path_weights"], dtype=float),
                sv_index=None if d.get("sv_index") is None else np.array(d["sv_index"], dtype=int),
                version=version,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model document: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


def load_model(path) -> TrainedModel:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a JSON model file ({exc})") from None
    return TrainedModel.from_dict(d)


def _labels_from_decision(F: np.ndarray, classes: Sequence) -> np.ndarray:
    cls = np.asarray(classes)
    if F.ndim == 1:
        return np.where(F >= 0, cls[1], cls[0])
    return cls[np.argmax(F, axis=1)]


def predict(model: TrainedModel, Q):
    """Decision values and predicted labels for the query rows."""
    return model.predict(Q)


# ---------------------------------------------------------------------------
# Complexity diagnostic


def _plugin_bound(model: TrainedModel, ws: KernelWorkspace, Y: np.ndarray, F: np.ndarray) -> dict:
    """Evaluate ``2A/N * (R(lambda=1, p=1) + C * hinge)`` for every problem; report the max."""
    table = model.table
    g = model.g_cache
    n = ws.n_samples
    A = compute_A(ws)
    # R2 with lambda = 1 and p = 1
    r2 = float(sum(float(table.coeff_units[v]) * model.betas[v] for v in table.product_ids))
    U = model.alphas * model.ys
    sv_ws = KernelWorkspace.build(model.sv_rows, model.specs, table, check=False) if model.has_support else None
    per_problem = []
    for c in range(len(U)):
        q = np.einsum("mij,i,j->m", sv_ws.path_grams, U[c], U[c]) if sv_ws else np.zeros(len(table))
        # w_sq = g^2 q, so w_sq / (2 g) = g q / 2
        r1 = float(0.5 * np.dot(g, np.maximum(q, 0.0)))
        hinge = float(np.maximum(0.0, 1.0 - Y[c] * F[c]).sum())
        per_problem.append(2.0 * A / n * (r1 + r2 + model.C * hinge))
    return {"A": A, "bound": max(per_problem), "per_problem": per_problem}


def rademacher_bound(model: TrainedModel, X, labels) -> float:
    """Plug-in value of the complexity bound at the trained point.

    This upper-bounds the minimum in the theorem (which is only attained
    when training with lambda = 1 and all p = 1), hence also the empirical
    Rademacher complexity of the learned decision function.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    ws = KernelWorkspace.build(X, model.specs, model.table, check=False)
    F = model.decision_function(X)
    if model.binary:
        Y = np.where(labels == model.classes[1], 1.0, -1.0)[None, :]
        F = F[None, :]
    else:
        Y = np.stack([one_vs_rest_labels(labels, c) for c in model.classes])
        F = F.T
    return _plugin_bound(model, ws, Y, F)["bound"]


def rademacher_monte_carlo(values: np.ndarray, n_draws: int = 1000, seed: int = 0) -> float:
    """Mean of ``|2/N sum_i sigma_i f(x_i)|`` over random sign vectors."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    sigma = rng.choice([-1.0, 1.0], size=(n_draws, len(values)))
    return float(np.mean(np.abs(sigma @ values)) * 2.0 / len(values))
