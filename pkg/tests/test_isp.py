import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import isp_delta_q1, ridge_problem
from shadowprice.dsl import RestrictionSystem
from shadowprice.inference import compute_blocks
from shadowprice.isp import (
    SignInstabilityWarning,
    compute_isp,
    conditional_isp_covariance,
    isp_covariance,
    isp_order,
    isp_report,
    plateau_cutoff,
)
from shadowprice.kkt import KktProblem, KktSolution
from shadowprice.model import Dataset
from shadowprice.montecarlo import builtin_scenario, generate_data
from shadowprice.pipeline import estimate


def fake_solution(theta, lam, c=1.0):
    return KktSolution(c, np.asarray(theta, dtype=float), lam, lam > 0, 0.0, 0.0, 0)


def solved(seed, texts, sigma=None, frac=0.5, n=300, p=4):
    rng = np.random.default_rng(seed)
    X, y = ridge_problem(rng, n, p)
    data = Dataset.from_arrays(y, X)
    system = RestrictionSystem.from_strings(texts, p, sigma)
    problem = KktProblem(data, system)
    sol = problem.solve(frac * problem.h_tilde)
    return data, system, sol


MIXED = ["theta[1]=0", "theta[2]-theta[3]^2=0", "theta[1]+theta[3]=0.2"]


class TestValues:
    def test_hand_example(self):
        system = RestrictionSystem.from_strings(["theta[0]=0", "theta[1]=0"], 2)
        np.testing.assert_allclose(compute_isp(fake_solution([3.0, -4.0], 0.5), system), [3.0, 4.0])

    def test_zero_multiplier(self):
        system = RestrictionSystem.from_strings(["theta[0]=0", "theta[1]=0"], 2)
        np.testing.assert_array_equal(compute_isp(fake_solution([3.0, -4.0], 0.0), system), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.2, 5.0), min_size=3, max_size=3), st.floats(0.05, 0.95))
    def test_identities(self, seed, diag, frac):
        data, system, sol = solved(seed, MIXED, diag, frac)
        isp = compute_isp(sol, system)
        assert np.all(isp >= 0)
        assert sol.active
        g = system.g(sol.theta)
        assert abs(np.abs(g) @ isp - 2 * sol.lam * sol.c) < 1e-8
        # reproducible from the stored (theta, lambda)
        np.testing.assert_allclose(isp, 2 * sol.lam * np.sign(g) * np.linalg.solve(system.sigma, g), rtol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_full_sigma_identity(self, seed, frac):
        sigma = [[1.0, 0.3, 0.0], [0.3, 2.0, -0.2], [0.0, -0.2, 0.7]]
        data, system, sol = solved(seed, MIXED, sigma, frac)
        g = system.g(sol.theta)
        assert abs(np.abs(g) @ compute_isp(sol, system) - 2 * sol.lam * sol.c) < 1e-8


class TestCovariance:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_symmetric_psd(self, seed, frac):
        data, system, sol = solved(seed, MIXED, None, frac)
        blocks = compute_blocks(sol, data, system)
        for S in (isp_covariance(blocks, sol, system), conditional_isp_covariance(blocks, sol, system)):
            np.testing.assert_array_equal(S, S.T)
            assert np.linalg.eigvalsh(S).min() > -1e-10 * max(np.abs(S).max(), 1e-300)

    def test_inactive_is_zero(self):
        data, system, sol = solved(0, MIXED, None, 3.0)
        assert not sol.active
        blocks = compute_blocks(sol, data, system)
        np.testing.assert_array_equal(isp_covariance(blocks, sol, system), 0.0)

    @pytest.mark.parametrize("text", ["theta[1]+theta[2]=0", "theta[1]-(-theta[2])^3=0"])
    def test_single_restriction_delta_method(self, text):
        data, system, sol = solved(1, [text], [[2.5]], 0.4)
        blocks = compute_blocks(sol, data, system)
        got = isp_covariance(blocks, sol, system)[0, 0]
        g = system.g(sol.theta)[0]
        expect = isp_delta_q1(sol.lam, g, system.jacobian(sol.theta)[0], 2.5, blocks.V1, blocks.V2, blocks.V3)
        assert got == pytest.approx(expect, rel=1e-10)

    def test_sign_instability_warning(self):
        system = RestrictionSystem.from_strings(["theta[1]=0", "theta[2]=0"], 4)
        data, _, sol = solved(2, ["theta[1]=0", "theta[2]=0"], None, 0.5)
        theta = sol.theta.copy()
        theta[2] = 0.0
        fake = fake_solution(theta, sol.lam)
        blocks = compute_blocks(sol, data, system)
        with pytest.warns(SignInstabilityWarning):
            isp_covariance(blocks, fake, system)


class TestPlateau:
    def test_forced_split(self):
        res = plateau_cutoff(np.array([0.0, 5.0]), np.array([[1.0, 0.2], [0.2, 1.0]]), 100)
        assert res.cutoff == 1
        assert res.order[0] == 0

    def test_break_statistic_by_hand(self):
        isp = np.array([0.3, 0.1, 0.9])
        S = np.diag([0.5, 0.4, 0.7])
        n = 50
        res = plateau_cutoff(isp, S, n)
        np.testing.assert_array_equal(res.order, [1, 0, 2])
        # m = 1: plateau {0.1}; rest {0.3, 0.9}
        w1 = np.array([1.0, -0.5, -0.5])
        v = np.array([0.1, 0.3, 0.9])
        Ssorted = np.diag([0.4, 0.5, 0.7])
        assert res.break_stats[1] == pytest.approx(n * (w1 @ v) ** 2 / (w1 @ Ssorted @ w1))
        w2 = np.array([0.5, 0.5, -1.0])
        assert res.break_stats[2] == pytest.approx(n * (w2 @ v) ** 2 / (w2 @ Ssorted @ w2))
        # screen for m = 2: one adjacent contrast 0.1 - 0.3
        stat = n * 0.2**2 / (0.4 + 0.5)
        assert res.screen_pvalues[2] == pytest.approx(stats.chi2.sf(stat, 1))

    def test_zero_covariance_gives_none(self):
        res = plateau_cutoff(np.array([0.1, 0.2, 0.3]), np.zeros((3, 3)), 100)
        assert res.cutoff is None

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            plateau_cutoff(np.array([0.1, 0.2]), np.eye(2), 10, order=np.array([1, 0]))
        with pytest.raises(ValueError):
            plateau_cutoff(np.array([0.1]), np.eye(1), 10)

    def test_order_tie_break_when_slack(self):
        system = RestrictionSystem.from_strings(["theta[0]=0", "theta[1]=0", "theta[2]=0"], 3)
        order = isp_order(fake_solution([0.5, -0.1, 0.3], 0.0), system)
        np.testing.assert_array_equal(order, [1, 2, 0])

    def test_case1_zero_coefficients_form_plateau(self):
        spec = builtin_scenario(1)
        system = spec.system()
        zero = sorted(j for j in range(system.q) if spec.theta0[j + 1] == 0.0)
        hits = 0
        for seed in range(10):
            est = estimate(generate_data(spec, 500 + seed), system, spec.pipeline_config())
            hits += est.isp.plateau_members == zero
        assert hits >= 8

    def test_report_csv(self, tmp_path):
        data, system, sol = solved(3, MIXED, None, 0.5)
        rep = isp_report(sol, compute_blocks(sol, data, system), system, data.n)
        rep.to_csv(tmp_path / "i.csv", boundary=1.5)
        lines = (tmp_path / "i.csv").read_text().splitlines()
        assert lines[0] == "rank,index,label,isp,abs_isp,in_plateau"
        assert [l.split(",")[-1] for l in lines[1:]] == ["1", "0", "0"]
