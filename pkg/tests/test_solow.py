import math

import numpy as np
import pytest

from shadowprice.dsl import RestrictionSystem
from shadowprice.kkt import KktProblem
from shadowprice.model import DataError, Dataset, fit_unconstrained, r_squared
from shadowprice.solow import (
    SYNTHETIC_THETA_S,
    SolowConfig,
    build_solow_model,
    restricted_ols,
    run_solow,
    solow_restrictions,
    synthetic_solow_rows,
    write_solow_csv,
)


def textbook(X, y, R, r):
    XtX_inv = np.linalg.inv(X.T @ X)
    theta = XtX_inv @ X.T @ y
    return theta - XtX_inv @ R.T @ np.linalg.solve(R @ XtX_inv @ R.T, R @ theta - r)


@pytest.fixture
def synthetic_csv(tmp_path):
    def make(**kw):
        path = tmp_path / "solow.csv"
        write_solow_csv(synthetic_solow_rows(**kw), path)
        return path

    return make


class TestModel:
    def test_restriction_strings(self):
        assert solow_restrictions() == ["theta[1]+theta[2]=0", "theta[1]-(-theta[2])^2=0", "theta[1]-(-theta[2])^3=0"]

    def test_design(self, synthetic_csv):
        cfg = SolowConfig(str(synthetic_csv()))
        data, system = build_solow_model(cfg)
        assert data.column_names == ("const", "ln(s)", "ln(n+0.05)")
        assert system.q == 3 and np.array_equal(system.sigma, np.eye(3))
        rows = synthetic_solow_rows()
        np.testing.assert_allclose(data.X[:, 2], [math.log(r["n"] + 0.05) for r in rows])
        np.testing.assert_allclose(data.y, [math.log(r["y"]) for r in rows])

    def test_wrong_sign_power_evaluates(self):
        system = RestrictionSystem.from_strings(solow_restrictions(), 3)
        g = system.g(np.array([0.0, 1.0, 2.0]))
        np.testing.assert_allclose(g, [3.0, 1.0 - 4.0, 1.0 + 8.0])

    @pytest.mark.parametrize(
        "row,needle",
        [({"y": "-1"}, "row 2"), ({"s": "0"}, "saving rate"), ({"n": "-0.06"}, r"n \+ 0\.05"), ({"y": "abc"}, "non-numeric")],
    )
    def test_bad_rows(self, tmp_path, row, needle):
        good = {"country": "A", "y": "1000", "s": "0.2", "n": "0.01"}
        bad = {**good, **row}
        path = tmp_path / "bad.csv"
        lines = ["country,y,s,n"] + [",".join(d[k] for k in ("country", "y", "s", "n")) for d in (good, bad, good, good, good)]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=needle):
            build_solow_model(SolowConfig(str(path)))

    def test_missing_file_and_column(self, tmp_path):
        with pytest.raises(DataError):
            build_solow_model(SolowConfig(str(tmp_path / "none.csv")))
        path = tmp_path / "c.csv"
        path.write_text("country,y,s\nA,1,0.2\n")
        with pytest.raises(DataError, match="columns"):
            build_solow_model(SolowConfig(str(path)))

    @pytest.mark.parametrize("kw", [{"g_plus_delta": 0.0}, {"tau_list": (0,)}, {"bootstrap": -1}, {"c0": -1.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SolowConfig("x.csv", **kw)


class TestRestrictedOls:
    def test_noiseless_recovers_coefficients(self, synthetic_csv):
        data, _ = build_solow_model(SolowConfig(str(synthetic_csv(noise_sd=0.0))))
        theta = restricted_ols(data, "theta[1]+theta[2]=0")
        np.testing.assert_allclose(theta, [4.651, SYNTHETIC_THETA_S, -SYNTHETIC_THETA_S], rtol=0, atol=1e-10)

    def test_constraint_exact(self, synthetic_csv):
        data, _ = build_solow_model(SolowConfig(str(synthetic_csv(seed=3))))
        theta = restricted_ols(data, "theta[1]+theta[2]=0")
        assert abs(theta[1] + theta[2]) < 1e-12

    def test_textbook_formula(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((60, 2))
        y = X @ np.array([0.4, 0.9]) + rng.standard_normal(60)
        data = Dataset.from_arrays(y, X)
        R, r = np.array([[1.0, -2.0]]), np.array([0.3])
        expect = textbook(X, y, R, r)
        np.testing.assert_allclose(restricted_ols(data, (R, r)), expect, rtol=0, atol=1e-10)
        np.testing.assert_allclose(restricted_ols(data, "theta[0]-2*theta[1]=0.3"), expect, rtol=0, atol=1e-10)

    def test_already_satisfied(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
        y = X @ np.array([1.0, 0.5, -0.2]) + rng.standard_normal(50)
        data = Dataset.from_arrays(y, X)
        theta = fit_unconstrained(data)
        restr = (np.array([[0.0, 1.0, 1.0]]), np.array([theta[1] + theta[2]]))
        np.testing.assert_allclose(restricted_ols(data, restr), theta, rtol=0, atol=1e-12)

    def test_rejects(self):
        rng = np.random.default_rng(2)
        data = Dataset.from_arrays(rng.standard_normal(20), rng.standard_normal((20, 3)))
        with pytest.raises(ValueError):
            restricted_ols(data, "theta[1]-theta[2]^2=0")
        with pytest.raises(ValueError):
            restricted_ols(data, (np.ones((1, 2)), np.zeros(1)))


class TestPipeline:
    def test_slopes_recover_alpha(self, synthetic_csv):
        alpha = 0.6
        ts = alpha / (1 - alpha)
        report = run_solow(SolowConfig(str(synthetic_csv(theta_s=ts, n_countries=400, seed=5))))
        th, se = report.theta_unrestricted, report.se_unrestricted
        assert abs(th[1] - ts) < 3 * se[1]
        assert abs(th[2] + ts) < 3 * se[2]

    def test_r2_ordering_and_report(self, synthetic_csv):
        report = run_solow(SolowConfig(str(synthetic_csv(seed=6))))
        assert report.r2_restricted <= report.r2_unrestricted
        d = report.to_dict()
        assert d["wald"]["df"] == 1 and d["wald"]["df_resid"] == report.data.n - 3
        assert 0 <= d["wald"]["p_value"] <= 1

    def test_slack_limit_equals_unrestricted(self, synthetic_csv):
        path = synthetic_csv(seed=7)
        data, system = build_solow_model(SolowConfig(str(path)))
        h_tilde = system.h(fit_unconstrained(data))
        report = run_solow(SolowConfig(str(path), c0=1e3 * h_tilde))
        # the whole grid sits above h_tilde, so the soft fit is the unrestricted one
        assert not report.soft.solution.active
        np.testing.assert_array_equal(report.soft.solution.theta, report.theta_unrestricted)

    def test_tiny_tolerance_reaches_restricted_ols(self, synthetic_csv):
        data, _ = build_solow_model(SolowConfig(str(synthetic_csv(seed=8))))
        system = RestrictionSystem.from_strings(["theta[1]+theta[2]=0"], 3)
        sol = KktProblem(data, system).solve(1e-10)
        assert np.max(np.abs(sol.theta - restricted_ols(data, "theta[1]+theta[2]=0"))) < 1e-4
        assert r_squared(data, sol.theta) <= r_squared(data, fit_unconstrained(data))
