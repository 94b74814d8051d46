"""Dataset files (CSV, libsvm) and synthetic generators."""

from __future__ import annotations

import csv
import os

import numpy as np

from .errors import DataError

FORMATS = ("csv", "libsvm")
SYNTH_KINDS = ("two-gaussians", "xor-rings", "k-blobs")


def detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".libsvm", ".svm", ".svmlight"):
        return "libsvm"
    return "csv"


def _labels(raw: list[float]) -> np.ndarray:
    y = np.asarray(raw, dtype=float)
    if np.all(y == np.round(y)):
        return y.astype(int)
    return y


def read_csv(path, n_features: int | None = None):
    """Rows of ``label, x1, ..., xd``; a row of ``d`` values is unlabeled.

    With ``n_features`` given, a width of ``n_features`` means unlabeled and
    ``n_features + 1`` means labeled; otherwise the first column is the label.
    Blank lines, ``#`` comments and a non-numeric header row are skipped.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                if not rows and lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise DataError(f"{path}: rows have differing lengths {sorted(width)}")
    A = np.array(rows)
    if not np.all(np.isfinite(A)):
        raise DataError(f"{path}: non-finite value")
    w = A.shape[1]
    if n_features is None or w == n_features + 1:
        if w < 2:
            raise DataError(f"{path}: need a label column and at least one feature")
        return A[:, 1:], _labels(A[:, 0].tolist())
    if w == n_features:
        return A, None
    raise DataError(f"{path}: {w} columns do not match {n_features} features")


def read_libsvm(path, n_features: int | None = None):
    """Sparse ``label idx:val ...`` lines with 1-based indices; the label may be omitted."""
    labels, entries = [], []
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            label = None
            if ":" not in tokens[0]:
                label = tokens.pop(0)
            row = {}
            try:
                for tok in tokens:
                    i, v = tok.split(":", 1)
                    i = int(i)
                    if i < 1:
                        raise ValueError
                    row[i] = float(v)
                labels.append(None if label is None else float(label))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed entry") from None
            max_idx = max([max_idx, *row])
            entries.append(row)
    if not entries:
        raise DataError(f"{path}: no data rows")
    if n_features is not None and max_idx > n_features:
        raise DataError(f"{path}: feature index {max_idx} exceeds {n_features} features")
    d = n_features if n_features is not None else max_idx
    X = np.zeros((len(entries), d))
    for r, row in enumerate(entries):
        for i, v in row.items():
            X[r, i - 1] = v
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite value")
    has = [l is not None for l in labels]
    if all(has):
        return X, _labels(labels)
    if not any(has):
        return X, None
    raise DataError(f"{path}: some rows are labeled and some are not")


def load_dataset(path, fmt: str | None = None, n_features: int | None = None):
    """Return ``(X, y)``; ``y`` is None for unlabeled files."""
    fmt = fmt or detect_format(path)
    if fmt not in FORMATS:
        raise DataError(f"unknown dataset format {fmt!r}")
    try:
        reader = read_csv if fmt == "csv" else read_libsvm
        return reader(path, n_features)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def write_csv(path, X, y=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, row in enumerate(np.asarray(X, dtype=float)):
            vals = [repr(float(v)) for v in row]
            w.writerow(vals if y is None else [str(y[i])] + vals)


# ---------------------------------------------------------------------------
# Synthetic data


def two_gaussians(n: int, seed: int = 0, d: int = 2, sep: float = 1.5):
    rng = np.random.default_rng(seed)
    y = np.where(np.arange(n) % 2 == 0, 1, -1)
    X = rng.normal(size=(n, d)) + sep / 2 * y[:, None] * np.ones(d) / np.sqrt(d)
    return X, y


def xor_rings(n: int, seed: int = 0, noise: float = 0.08):
    """Two concentric rings whose label flips between the left and right half-plane."""
    rng = np.random.default_rng(seed)
    ring = rng.integers(0, 2, size=n)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = 1.0 + ring + rng.normal(scale=noise, size=n)
    X = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    y = np.where((ring == 1) ^ (X[:, 0] > 0), 1, -1)
    return X, y


def k_blobs(n: int, seed: int = 0, k: int = 3, radius: float = 4.0, scale: float = 0.8):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    angles = 2 * np.pi * np.arange(k) / k
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    X = centers[y] + rng.normal(scale=scale, size=(n, 2))
    return X, y


def generate(kind: str, n: int, seed: int = 0, k: int = 3):
    if n < 2:
        raise DataError("n must be at least 2")
    if kind == "two-gaussians":
        return two_gaussians(n, seed)
    if kind == "xor-rings":
        return xor_rings(n, seed)
    if kind == "k-blobs":
        return k_blobs(n, seed, k)
    raise DataError(f"unknown synthetic dataset kind {kind!r}")
