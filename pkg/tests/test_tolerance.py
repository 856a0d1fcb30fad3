import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_gradient, ridge_problem
from shadowprice.dsl import RestrictionSystem
from shadowprice.kkt import KktProblem
from shadowprice.model import Dataset
from shadowprice.tolerance import GRID_LOWER_RATIO, _RiskEvaluator, make_grid, risk_proxy, select_tolerance


def slope_system(p):
    return RestrictionSystem.from_strings([f"theta[{j}]=0" for j in range(1, p)], p)


class TestGrid:
    def test_shape_and_bounds(self):
        g = make_grid(2.0, 50)
        assert g.size == 50 and g[-1] == 2.0 and g[0] > 2.0 * GRID_LOWER_RATIO
        assert np.all(np.diff(g) > 0)

    def test_inserts_h_tilde(self):
        g = make_grid(1.0, 10, h_tilde=0.3)
        assert 0.3 in g and g.size == 11
        assert make_grid(1.0, 10, h_tilde=5.0).size == 10

    @pytest.mark.parametrize("c0,k", [(0.0, 10), (1.0, 1)])
    def test_rejects(self, c0, k):
        with pytest.raises(ValueError):
            make_grid(c0, k)


class TestRiskProxy:
    def test_inactive_has_no_bias(self):
        rng = np.random.default_rng(0)
        X, y = ridge_problem(rng, 200, 4)
        data = Dataset.from_arrays(y, X)
        problem = KktProblem(data, slope_system(4))
        sol = problem.solve(2 * problem.h_tilde)
        bias, var = risk_proxy(sol, problem.theta_tilde, data, slope_system(4))
        assert bias == 0.0 and var > 0

    def test_bias_term_p2(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((200, 2))
        y = X @ np.array([0.8, 0.6]) + rng.standard_normal(200)
        data = Dataset.from_arrays(y, X)
        text = "theta[0]-theta[1]^2=0"
        system = RestrictionSystem.from_strings([text], 2)
        problem = KktProblem(data, system)
        sol = problem.solve(0.4 * problem.h_tilde)
        bias, _ = risk_proxy(sol, problem.theta_tilde, data, system)
        h = lambda t: (t[0] - t[1] ** 2) ** 2
        a_fd = central_gradient(h, problem.theta_tilde, eps=1e-6)
        Hi_a = np.linalg.solve(X.T @ X / 200, a_fd)
        assert bias == pytest.approx(sol.lam**2 * (Hi_a @ Hi_a), rel=1e-8)

    def test_batch_matches_pointwise(self):
        rng = np.random.default_rng(2)
        X, y = ridge_problem(rng, 300, 5)
        data = Dataset.from_arrays(y, X)
        system = RestrictionSystem.from_strings(["theta[1]-theta[2]=0", "theta[3]+theta[4]=1"], 5, [1.0, 3.0])
        problem = KktProblem(data, system)
        sols = problem.path(make_grid(problem.h_tilde * 1.5, 20, problem.h_tilde))
        ev = _RiskEvaluator(problem)
        batch = ev.batch(sols)
        for s, row in zip(sols, batch):
            ref = risk_proxy(s, problem.theta_tilde, data, system)
            np.testing.assert_allclose(row, ref, rtol=1e-9, atol=1e-18)


class TestSelect:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["active", "full"]))
    def test_curve_invariants(self, seed, search):
        rng = np.random.default_rng(seed)
        X, y = ridge_problem(rng, 200, 5)
        data = Dataset.from_arrays(y, X)
        problem = KktProblem(data, slope_system(5))
        curve, sol = select_tolerance(data, slope_system(5), 2 * problem.h_tilde, 30, search=search)
        np.testing.assert_allclose(curve.total, curve.bias_proxy + curve.var_proxy)
        assert np.all(curve.bias_proxy >= 0) and np.all(curve.var_proxy >= 0)
        cand = np.flatnonzero(curve.active) if search == "active" and curve.active.any() else np.arange(curve.grid.size)
        best = curve.total[cand].min()
        assert curve.total[curve.index] == best
        assert curve.index == cand[curve.total[cand] == best].max()
        assert sol.c == curve.c_hat == curve.grid[curve.index]

    def test_all_inactive_takes_largest(self):
        rng = np.random.default_rng(3)
        X, y = ridge_problem(rng, 200, 4)
        data = Dataset.from_arrays(y, X)
        problem = KktProblem(data, slope_system(4))
        c0 = problem.h_tilde / (0.5 * GRID_LOWER_RATIO)
        # every grid point above h_tilde
        grid_floor = c0 * GRID_LOWER_RATIO
        assert grid_floor > problem.h_tilde
        curve, sol = select_tolerance(data, slope_system(4), c0, 20)
        assert not curve.active.any()
        assert np.all(curve.total == curve.total[0])
        assert curve.index == curve.grid.size - 1 and sol.c == c0

    def test_rejects_unknown_search(self):
        rng = np.random.default_rng(4)
        X, y = ridge_problem(rng, 50, 3)
        with pytest.raises(ValueError):
            select_tolerance(Dataset.from_arrays(y, X), slope_system(3), 1.0, search="median")

    def test_csv(self, tmp_path):
        rng = np.random.default_rng(5)
        X, y = ridge_problem(rng, 100, 3)
        curve, _ = select_tolerance(Dataset.from_arrays(y, X), slope_system(3), 1.0, 10)
        curve.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "c,bias,var,total,active,selected"
        assert len(lines) == curve.grid.size + 1
        assert sum(int(l.split(",")[-1]) for l in lines[1:]) == 1
