import numpy as np
import pytest

from conftest import demo_specs
from spnmkl import trainer
from spnmkl.datasets import k_blobs, two_gaussians
from spnmkl.errors import ConfigError, DegenerateProblemError, EmptyModelError
from spnmkl.kernels import KernelSpec, KernelWorkspace, compute_gram
from spnmkl.qp import solve_dual
from spnmkl.spn_graph import enumerate_paths, single_layer_document, spn_from_dict
from spnmkl.trainer import (
    TrainConfig,
    TrainState,
    beta_step_cccp,
    beta_step_convex,
    compose_optimal_kernel,
    eval_objective,
    fit,
    update_w_norms,
)
from spnmkl.weighting import coeff_array, path_weights


def make_state(graph, X, labels, specs, betas=None, p=1.0, lam=1.0, C=1.0):
    """Training state after one dual solve at the given weights."""
    table = enumerate_paths(graph)
    ws = KernelWorkspace.build(X, specs, table)
    _, Y = trainer._encode_labels(np.asarray(labels))
    k = len(table.product_ids)
    state = TrainState(
        graph=graph,
        table=table,
        ws=ws,
        betas=np.ones(k) if betas is None else np.asarray(betas, float),
        p=np.full(k, p) if np.isscalar(p) else np.asarray(p, float),
        coeffs=coeff_array(table, lam),
        Y=Y,
        alphas=np.zeros_like(Y),
        biases=np.zeros(len(Y)),
        g_w=np.zeros(len(table)),
        V=np.zeros((len(Y), len(table), len(X))),
        w_sq=np.zeros(len(table)),
    )
    trainer._solve_duals(state, C, 1e-8, TrainConfig(C=C, lam=lam), warm=False)
    return state


@pytest.fixture
def gauss():
    return two_gaussians(60, seed=1)


@pytest.fixture
def nested_state(nested_graph, gauss, rng):
    X, y = gauss
    return make_state(nested_graph, X, y, demo_specs(), betas=rng.uniform(0.5, 2.0, 9))


class TestCompose:
    def test_all_ones(self, nested_table, specs, rng):
        ws = KernelWorkspace.build(rng.normal(size=(6, 2)), specs, nested_table)
        np.testing.assert_allclose(
            compose_optimal_kernel(nested_table, ws, np.ones(9)), ws.path_grams.sum(0), rtol=1e-14
        )

    def test_single_layer_linear_mkl(self, rng):
        specs = [KernelSpec("A", "rbf", 0.5), KernelSpec("B", "linear")]
        X = rng.normal(size=(7, 2))
        t = enumerate_paths(spn_from_dict(single_layer_document(["A", "B"])))
        ws = KernelWorkspace.build(X, specs, t)
        K = compose_optimal_kernel(t, ws, {"b0": 0.3, "b1": 2.0})
        np.testing.assert_allclose(K, 0.3 * compute_gram(X, specs[0]) + 2.0 * compute_gram(X, specs[1]), rtol=1e-13)

    def test_nested_brute_force(self, nested_table, specs, rng):
        X = rng.normal(size=(5, 2))
        ws = KernelWorkspace.build(X, specs, nested_table)
        beta = rng.uniform(0.1, 3, 9)
        bmap = dict(zip(nested_table.product_ids, beta))
        grams = {s.name: compute_gram(X, s) for s in specs}
        ref = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                for p in nested_table.paths:
                    g = 1.0
                    for v, e in zip(p.member_ids, p.exponents):
                        g *= bmap[v] ** float(e)
                    kij = 1.0
                    for k in p.leaves:
                        kij *= grams[k][i, j]
                    ref[i, j] += g * kij
        K = compose_optimal_kernel(nested_table, ws, beta)
        np.testing.assert_allclose(K, ref, rtol=1e-12)
        np.testing.assert_array_equal(K, K.T)

    def test_all_zero(self, nested_table, specs, rng):
        ws = KernelWorkspace.build(rng.normal(size=(4, 2)), specs, nested_table)
        with pytest.raises(EmptyModelError):
            compose_optimal_kernel(nested_table, ws, np.zeros(9))


class TestWNorms:
    def test_zero_alpha(self, nested_table, specs, rng):
        ws = KernelWorkspace.build(rng.normal(size=(4, 2)), specs, nested_table)
        np.testing.assert_array_equal(update_w_norms(nested_table, ws, np.ones(9), np.zeros(4), np.ones(4)), 0.0)

    def test_unit_vector(self, nested_table, specs, rng):
        ws = KernelWorkspace.build(rng.normal(size=(4, 2)), specs, nested_table)
        a = np.array([1.0, 0, 0, 0])
        w = update_w_norms(nested_table, ws, np.ones(9), a, np.ones(4))
        np.testing.assert_allclose(w, ws.path_grams[:, 0, 0], rtol=1e-15)

    def test_two_class_doubles(self, nested_table, specs, gauss):
        X, y = gauss
        ws = KernelWorkspace.build(X, specs, nested_table)
        K = compose_optimal_kernel(nested_table, ws, np.ones(9))
        yb = np.where(y > 0, 1.0, -1.0)
        sol = solve_dual(K, yb, 1.0, tol=1e-10)
        binary = update_w_norms(nested_table, ws, np.ones(9), sol.alpha, yb)
        both = update_w_norms(nested_table, ws, np.ones(9), np.stack([sol.alpha, sol.alpha]), np.stack([yb, -yb]))
        np.testing.assert_allclose(both, 2 * binary, rtol=1e-12)

    def test_scales_with_g_squared(self, nested_state):
        s = nested_state
        w1 = update_w_norms(s.table, s.ws, s.betas, s.alphas, s.Y)
        w2 = update_w_norms(s.table, s.ws, 4.0 * s.betas, s.alphas, s.Y)
        np.testing.assert_allclose(w2, 16 * w1, rtol=1e-12)


class TestObjective:
    def test_zero_decision(self, nested_state):
        s = nested_state
        s.V[:] = 0.0
        s.biases[:] = 0.0
        obj = eval_objective(s, C=2.5)
        assert obj.hinge == len(s.Y[0])
        assert obj.total == pytest.approx(obj.R1 + obj.R2 + 2.5 * len(s.Y[0]))

    def test_large_margin_zero_loss(self, nested_state):
        s = nested_state
        s.V[:] = 0.0
        s.biases[:] = 0.0
        s.biases += 2.0 * s.Y[:, 0]
        s.Y[:] = s.Y[:, :1]
        assert eval_objective(s, 1.0).hinge == 0.0

    def test_independent_recomputation(self, nested_state, gauss):
        s = nested_state
        X, y = gauss
        specs = {sp.name: sp for sp in demo_specs()}
        grams = {k: compute_gram(X, sp) for k, sp in specs.items()}
        bmap = s.beta_map
        u = s.alphas[0] * s.Y[0]
        R1 = 0.0
        f = np.full(len(X), s.biases[0])
        for p in s.table.paths:
            g = np.prod([bmap[v] ** float(e) for v, e in zip(p.member_ids, p.exponents)])
            Km = np.prod([grams[k] for k in p.leaves], axis=0)
            w_sq = g * g * (u @ Km @ u)
            R1 += w_sq / (2 * g)
            f += g * (Km @ u)
        R2 = sum(float(c) * bmap[v] for v, c in s.table.coeff_units.items())
        hinge = np.maximum(0, 1 - s.Y[0] * f).sum()
        obj = eval_objective(s, 1.0)
        assert obj.R1 == pytest.approx(R1, rel=1e-10)
        assert obj.R2 == pytest.approx(R2, rel=1e-12)
        assert obj.hinge == pytest.approx(hinge, rel=1e-10, abs=1e-10)


class TestBetaSteps:
    def test_zero_gradient_unchanged(self, nested_state):
        s = nested_state
        s.w_sq[:] = 0.0
        s.coeffs[:] = 0.0
        beta, info = beta_step_convex(s, TrainConfig())
        np.testing.assert_array_equal(beta, s.betas)
        assert not info["stalled"]

    def test_single_path_stationary(self, gauss):
        X, y = gauss
        s = make_state(spn_from_dict(single_layer_document(["A"])), X, y, [KernelSpec("A", "linear")])
        s.w_sq[:] = 2.0
        beta, _ = beta_step_convex(s, TrainConfig())
        np.testing.assert_array_equal(beta, [1.0])

    def test_single_path_descends_to_stationarity(self, gauss):
        X, y = gauss
        s = make_state(spn_from_dict(single_layer_document(["A"])), X, y, [KernelSpec("A", "linear")], betas=[3.0])
        s.w_sq[:] = 2.0
        for _ in range(200):
            s.betas, _ = beta_step_convex(s, TrainConfig())
        # minimizer of w/(2b) + b is sqrt(w/2)
        assert s.betas[0] == pytest.approx(1.0, rel=1e-6)

    def test_projection_clamps_to_zero(self, nested_state):
        s = nested_state
        s.w_sq[:] = 0.0
        s.coeffs[:] = 100.0
        beta, _ = beta_step_convex(s, TrainConfig())
        np.testing.assert_array_equal(beta, 0.0)

    def test_convex_step_decreases(self, nested_state):
        s = nested_state
        r0 = trainer._regularizer(s, s.betas)
        beta, info = beta_step_convex(s, TrainConfig())
        assert trainer._regularizer(s, beta) <= r0
        assert info["steps"] == 1
        assert np.all(beta >= 0)

    def test_cccp_p1_matches_convex(self, nested_state):
        s = nested_state
        cfg = TrainConfig(cccp_max_rounds=1, cccp_max_inner=1)
        mask = np.ones(9, bool)
        a, _ = beta_step_convex(s, cfg, mask)
        b, _ = beta_step_cccp(s, cfg, mask)
        np.testing.assert_array_equal(a, b)

    def test_cccp_tangency(self, nested_graph, gauss, rng):
        X, y = gauss
        s = make_state(nested_graph, X, y, demo_specs(), betas=rng.uniform(0.5, 2, 9), p=0.5)
        _, info = beta_step_cccp(s, TrainConfig(cccp_max_rounds=1))
        assert info["surrogate"][0][0] == pytest.approx(trainer._regularizer(s, s.betas), rel=1e-14)
        assert np.all(np.diff(info["surrogate"][0]) <= 0)

    def test_cccp_decreases_over_rounds(self, nested_graph, gauss, rng):
        X, y = gauss
        s = make_state(nested_graph, X, y, demo_specs(), betas=rng.uniform(0.5, 2, 9), p=0.5)
        cfg = TrainConfig(cccp_max_rounds=1)
        values = [trainer._regularizer(s, s.betas)]
        for _ in range(5):
            s.betas, _ = beta_step_cccp(s, cfg)
            values.append(trainer._regularizer(s, s.betas))
        assert np.all(np.diff(values) <= 1e-12)
        assert values[-1] < values[0]


class TestFit:
    def test_lambda_zero_is_plain_svm(self, gauss):
        X, y = gauss
        spec = KernelSpec("A", "rbf", 0.5)
        model = fit(X, y, spn_from_dict(single_layer_document(["A"])), [spec], TrainConfig(lam=0.0, qp_tol=1e-10))
        yb = np.where(y == model.classes[1], 1.0, -1.0)
        sol = solve_dual(compute_gram(X, spec), yb, 1.0, tol=1e-10)
        full = np.zeros(len(X))
        full[model.sv_index] = model.alphas[0]
        np.testing.assert_allclose(full, sol.alpha, atol=1e-6)
        assert model.betas == {"b0": 1.0}

    def test_monotone_trace(self, nested_graph, gauss):
        X, y = gauss
        records = []
        model = fit(X, y, nested_graph, demo_specs(), TrainConfig(outer_rel_tol=1e-9, outer_max_iters=15),
                    log_record=records.append)
        objs = np.array([r["objective"] for r in records])
        assert len(objs) >= 11
        assert np.all(np.diff(objs) <= 1e-8)
        assert model.training["objective_trace"] == objs.tolist()

    def test_cccp_regime(self, nested_graph, gauss):
        X, y = gauss
        records = []
        fit(X, y, nested_graph, demo_specs(), TrainConfig(p_default=0.5, outer_max_iters=5), log_record=records.append)
        assert any(r["cccp_inner"] > 0 for r in records)
        objs = np.array([r["objective"] for r in records if not r["pruned"]])
        assert np.all(np.diff(objs) <= 1e-8)

    def test_multiclass(self):
        X, y = k_blobs(90, seed=2, k=3)
        model = fit(X, y, spn_from_dict(single_layer_document(["L", "R"])),
                    [KernelSpec("L", "linear"), KernelSpec("R", "rbf", 0.5)])
        assert model.classes == [0, 1, 2]
        assert len(model.alphas) == 3
        _, pred = model.predict(X)
        assert np.mean(pred == y) >= 0.9

    def test_zero_stays_zero(self, nested_graph, gauss):
        X, y = gauss

        def force(it, state):
            if it == 2:
                state.betas[state.table.index["b6"]] = 0.0

        records = []
        model = fit(X, y, nested_graph, demo_specs(), TrainConfig(outer_max_iters=6), callback=force,
                    log_record=records.append)
        assert records[2]["pruned"] == ["b6", "k6"]
        assert all(r["paths"] == 6 for r in records[2:])
        assert "b6" in model.pruned and "b6" not in model.betas

    def test_single_class(self, gauss):
        X, _ = gauss
        with pytest.raises(DegenerateProblemError):
            fit(X, np.ones(len(X)), spn_from_dict(single_layer_document(["A"])), [KernelSpec("A", "linear")])

    def test_bad_override(self, nested_graph, gauss):
        X, y = gauss
        with pytest.raises(ConfigError):
            fit(X, y, nested_graph, demo_specs(), TrainConfig(p={"root": 2.0}))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(shrink=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(outer_rel_tol=0)
        cfg = TrainConfig(p={"b1": 0.5})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_decision_values_match_path_weights(self, nested_state):
        s = nested_state
        g = path_weights(s.table, s.betas)
        K = compose_optimal_kernel(s.table, s.ws, s.betas)
        np.testing.assert_allclose(s.decision_values()[0], K @ (s.alphas[0] * s.Y[0]) + s.biases[0], rtol=1e-10)
        np.testing.assert_array_equal(s.g_w, g)
