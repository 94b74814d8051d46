"""Basis Gram matrices, Hadamard path kernels and related diagnostics."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError
from .spn_graph import Path, PathTable

log = logging.getLogger(__name__)

FAMILIES = ("linear", "polynomial", "rbf")
SYMMETRY_TOL = 1e-10
PSD_RTOL = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    name: str
    family: str
    gamma: float = 1.0
    degree: int = 2
    coef: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"kernel {self.name!r}: unknown family {self.family!r}")
        if self.family == "rbf" and not self.gamma > 0:
            raise ConfigError(f"kernel {self.name!r}: gamma must be > 0")
        if self.family == "polynomial" and not (int(self.degree) == self.degree and self.degree >= 1):
            raise ConfigError(f"kernel {self.name!r}: degree must be an integer >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "KernelSpec":
        allowed = {"name", "family", "gamma", "degree", "coef", "normalize"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"kernel spec has unknown field(s) {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad kernel spec {dict(d)!r}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def raw(self, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """Unnormalized kernel values ``k(X[i], Z[j])``."""
        if self.family == "linear":
            return X @ Z.T
        if self.family == "polynomial":
            return (X @ Z.T + self.coef) ** int(self.degree)
        return np.exp(-self.gamma * cdist(X, Z, "sqeuclidean"))

    def self_values(self, X: np.ndarray) -> np.ndarray:
        """``k(x, x)`` for every row."""
        if self.family == "rbf":
            return np.ones(len(X))
        sq = np.einsum("ij,ij->i", X, X)
        if self.family == "linear":
            return sq
        return (sq + self.coef) ** int(self.degree)


def _as_data(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or len(X) < 1:
        raise DataError("data must be a non-empty 2-d array")
    if not np.all(np.isfinite(X)):
        raise DataError("data contains non-finite entries")
    return X


def _norm_factors(spec: KernelSpec, diag: np.ndarray) -> np.ndarray:
    if np.any(diag <= 0):
        raise DataError(f"kernel {spec.name!r}: zero-norm row cannot be normalized")
    return 1.0 / np.sqrt(diag)


def compute_gram(X, spec: KernelSpec) -> np.ndarray:
    X = _as_data(X)
    K = spec.raw(X, X)
    K = 0.5 * (K + K.T)
    if spec.normalize:
        s = _norm_factors(spec, np.diag(K).copy())
        K = K * np.outer(s, s)
    return K


def cross_gram(train, query, spec: KernelSpec, train_diag: np.ndarray | None = None) -> np.ndarray:
    """``(n_query, n_train)`` kernel values, normalized like the training Gram."""
    train, query = _as_data(train), _as_data(query)
    if train.shape[1] != query.shape[1]:
        raise DataError(f"dimension mismatch: train has {train.shape[1]} features, query {query.shape[1]}")
    K = spec.raw(query, train)
    if spec.normalize:
        if train_diag is None:
            train_diag = spec.self_values(train)
        K = K * np.outer(_norm_factors(spec, spec.self_values(query)), _norm_factors(spec, train_diag))
    return K


def hadamard(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = np.array(mats[0], dtype=float, copy=True)
    for M in mats[1:]:
        out *= M
    return out


def min_eigenvalue(K: np.ndarray) -> float:
    return float(scipy.linalg.eigvalsh(K, subset_by_index=[0, 0])[0])


def check_psd(K: np.ndarray, rtol: float = PSD_RTOL) -> bool:
    lo = min_eigenvalue(K)
    scale = max(abs(lo), float(scipy.linalg.eigvalsh(K, subset_by_index=[len(K) - 1, len(K) - 1])[0]))
    return lo >= -rtol * scale


class KernelWorkspace:
    """Basis Grams over the training set and their Hadamard path products.

    ``path_grams`` is a read-only ``(n_paths, N, N)`` array aligned with
    ``table.paths``.
    """

    def __init__(self, basis_grams: Mapping[str, np.ndarray], table: PathTable, n_jobs: int = 1):
        self.basis_grams = dict(basis_grams)
        self.table = table
        missing = {k for p in table.paths for k in p.leaves} - set(self.basis_grams)
        if missing:
            raise ConfigError(f"no basis Gram for kernel(s) {sorted(missing)}")
        n = next(iter(self.basis_grams.values())).shape[0]
        self.path_grams = np.empty((len(table), n, n))
        if n_jobs > 1 and len(table) > 1:
            with ThreadPoolExecutor(n_jobs) as pool:
                for m, K in enumerate(pool.map(lambda p: path_kernel(p, self), table.paths)):
                    self.path_grams[m] = K
        else:
            for m, p in enumerate(table.paths):
                self.path_grams[m] = path_kernel(p, self)
        self.path_grams.setflags(write=False)
        self.diag_sums = np.einsum("mii->m", self.path_grams)

    @classmethod
    def build(cls, X, specs: Sequence[KernelSpec], table: PathTable, n_jobs: int = 1, check: bool = True):
        X = _as_data(X)
        needed = {k for p in table.paths for k in p.leaves}
        grams = {}
        for spec in specs:
            if spec.name in needed:
                grams[spec.name] = compute_gram(X, spec)
                if check and not check_psd(grams[spec.name]):
                    log.warning("basis kernel %r is not PSD within tolerance", spec.name)
        return cls(grams, table, n_jobs)

    @property
    def n_samples(self) -> int:
        return self.path_grams.shape[1]

    def restrict(self, table: PathTable) -> "KernelWorkspace":
        return KernelWorkspace(self.basis_grams, table)


def path_kernel(path: Path, ws: KernelWorkspace) -> np.ndarray:
    try:
        return hadamard([ws.basis_grams[k] for k in path.leaves])
    except KeyError as exc:
        raise ConfigError(f"missing basis Gram {exc}") from None


def cross_kernel(train, query, path: Path, specs: Mapping[str, KernelSpec] | Sequence[KernelSpec]) -> np.ndarray:
    if not isinstance(specs, Mapping):
        specs = {s.name: s for s in specs}
    return hadamard([cross_gram(train, query, specs[k]) for k in path.leaves])


def compute_A(ws: KernelWorkspace, tol: float = 1e-10) -> float:
    """Square root of the summed diagonals of all path kernels."""
    diags = np.einsum("mii->mi", ws.path_grams)
    if np.any(diags < -tol):
        raise DataError("path kernel has a negative diagonal entry")
    return math.sqrt(max(float(diags.sum()), 0.0))
