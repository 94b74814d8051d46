import math

import numpy as np
import pytest

from spnmkl.errors import ConfigError, DataError
from spnmkl.kernels import (
    KernelSpec,
    KernelWorkspace,
    check_psd,
    compute_A,
    compute_gram,
    cross_gram,
    cross_kernel,
    hadamard,
    path_kernel,
)
from spnmkl.spn_graph import enumerate_paths, single_layer_document, spn_from_dict


def _naive(spec, x, z):
    if spec.family == "linear":
        k = lambda a, b: float(np.dot(a, b))
    elif spec.family == "polynomial":
        k = lambda a, b: float((np.dot(a, b) + spec.coef) ** spec.degree)
    else:
        k = lambda a, b: math.exp(-spec.gamma * float(np.sum((a - b) ** 2)))
    v = k(x, z)
    if spec.normalize:
        v /= math.sqrt(k(x, x) * k(z, z))
    return v


class TestGram:
    def test_linear_identity(self):
        K = compute_gram([[1.0, 0.0], [0.0, 1.0]], KernelSpec("L", "linear", normalize=False))
        np.testing.assert_array_equal(K, np.eye(2))

    def test_rbf_identical_rows(self):
        K = compute_gram(np.ones((4, 3)), KernelSpec("R", "rbf", gamma=3.0))
        np.testing.assert_array_equal(K, np.ones((4, 4)))

    def test_rbf_hand_value(self):
        K = compute_gram([[0.0], [2.0]], KernelSpec("R", "rbf", gamma=0.5))
        assert K[0, 1] == pytest.approx(math.exp(-2.0), rel=1e-15)
        assert K[0, 0] == 1.0

    @pytest.mark.parametrize(
        "spec",
        [
            KernelSpec("a", "linear"),
            KernelSpec("b", "polynomial", degree=3, coef=0.5),
            KernelSpec("c", "rbf", gamma=0.7),
            KernelSpec("d", "polynomial", degree=2, normalize=False),
        ],
    )
    def test_matches_pairwise_loop(self, spec, rng):
        X = rng.normal(size=(7, 3))
        K = compute_gram(X, spec)
        ref = np.array([[_naive(spec, a, b) for b in X] for a in X])
        np.testing.assert_allclose(K, ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(K, K.T)
        if spec.normalize:
            np.testing.assert_allclose(np.diag(K), 1.0, rtol=1e-14)
        assert check_psd(K)

    def test_zero_row_cannot_normalize(self):
        with pytest.raises(DataError):
            compute_gram([[0.0, 0.0], [1.0, 2.0]], KernelSpec("L", "linear"))

    def test_non_finite(self):
        with pytest.raises(DataError):
            compute_gram([[np.nan, 0.0]], KernelSpec("R", "rbf"))

    @pytest.mark.parametrize(
        "d",
        [
            {"name": "x", "family": "sigmoid"},
            {"name": "x", "family": "rbf", "gamma": 0},
            {"name": "x", "family": "polynomial", "degree": 1.5},
            {"name": "x", "family": "linear", "width": 2},
        ],
    )
    def test_bad_specs(self, d):
        with pytest.raises(ConfigError):
            KernelSpec.from_dict(d)

    def test_spec_round_trip(self):
        s = KernelSpec("K4", "polynomial", degree=2, coef=1.0)
        assert KernelSpec.from_dict(s.to_dict()) == s

    def test_indefinite_detected(self):
        assert not check_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert check_psd(np.array([[1.0, 1.0], [1.0, 1.0]]))


class TestPathKernels:
    def test_two_leaf_path(self, nested_table, specs, rng):
        X = rng.normal(size=(9, 2))
        ws = KernelWorkspace.build(X, specs, nested_table)
        grams = {s.name: compute_gram(X, s) for s in specs}
        m = [p.leaves for p in nested_table.paths].index(("K4", "K6"))
        np.testing.assert_array_equal(ws.path_grams[m], grams["K4"] * grams["K6"])
        m1 = [p.leaves for p in nested_table.paths].index(("K1",))
        np.testing.assert_array_equal(path_kernel(nested_table.paths[m1], ws), grams["K1"])
        assert not ws.path_grams.flags.writeable

    def test_hadamard_identity(self, rng):
        K = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(hadamard([np.ones((4, 4)), K]), K)

    def test_schur_product_psd(self, nested_table, specs, rng):
        ws = KernelWorkspace.build(rng.normal(size=(15, 3)), specs, nested_table)
        for K in ws.path_grams:
            assert check_psd(K)

    def test_threads_agree(self, nested_table, specs, rng):
        X = rng.normal(size=(12, 2))
        a = KernelWorkspace.build(X, specs, nested_table, n_jobs=1)
        b = KernelWorkspace.build(X, specs, nested_table, n_jobs=4)
        np.testing.assert_array_equal(a.path_grams, b.path_grams)

    def test_missing_basis(self, nested_table):
        with pytest.raises(ConfigError):
            KernelWorkspace({"K1": np.eye(2)}, nested_table)


class TestCrossKernel:
    def test_query_equals_train(self, nested_table, specs, rng):
        X = rng.normal(size=(10, 2))
        ws = KernelWorkspace.build(X, specs, nested_table)
        for m, p in enumerate(nested_table.paths):
            np.testing.assert_allclose(cross_kernel(X, X, p, specs), ws.path_grams[m], rtol=1e-12, atol=1e-14)

    def test_single_query_row(self, rng):
        X = rng.normal(size=(5, 3))
        spec = KernelSpec("K1", "linear")
        t = enumerate_paths(spn_from_dict(single_layer_document(["K1"])))
        row = cross_kernel(X, X[:1], t.paths[0], [spec])
        np.testing.assert_allclose(row[0], compute_gram(X, spec)[0], rtol=1e-13)

    def test_two_leaf_entrywise(self, nested_table, specs, rng):
        X, Q = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
        sd = {s.name: s for s in specs}
        m = [p.leaves for p in nested_table.paths].index(("K4", "K6"))
        got = cross_kernel(X, Q, nested_table.paths[m], specs)
        ref = np.array([[_naive(sd["K4"], q, x) * _naive(sd["K6"], q, x) for x in X] for q in Q])
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            cross_gram(np.ones((3, 2)), np.ones((1, 3)), KernelSpec("R", "rbf"))


class TestComputeA:
    def test_identity(self):
        t = enumerate_paths(spn_from_dict(single_layer_document(["A"])))
        assert compute_A(KernelWorkspace({"A": np.eye(6)}, t)) == pytest.approx(math.sqrt(6))

    def test_two_rbf_paths(self, rng):
        X = rng.normal(size=(10, 2))
        t = enumerate_paths(spn_from_dict(single_layer_document(["A", "B"])))
        ws = KernelWorkspace.build(X, [KernelSpec("A", "rbf", 0.3), KernelSpec("B", "rbf", 2.0)], t)
        assert compute_A(ws) == pytest.approx(math.sqrt(20), rel=1e-14)

    def test_nested_double_loop(self, nested_table, specs, rng):
        X = rng.normal(size=(8, 2))
        sd = {s.name: dataclass_unnormalized(s) for s in specs}
        ws = KernelWorkspace(
            {k: compute_gram(X, s) for k, s in sd.items()}, nested_table
        )
        total = 0.0
        for p in nested_table.paths:
            for i in range(len(X)):
                v = 1.0
                for k in p.leaves:
                    v *= _naive(sd[k], X[i], X[i])
                total += v
        assert compute_A(ws) == pytest.approx(math.sqrt(total), rel=1e-12)

    def test_negative_diagonal(self):
        t = enumerate_paths(spn_from_dict(single_layer_document(["A"])))
        with pytest.raises(DataError):
            compute_A(KernelWorkspace({"A": -np.eye(3)}, t))


def dataclass_unnormalized(spec):
    d = spec.to_dict()
    d["normalize"] = False
    return KernelSpec.from_dict(d)
