import json

import numpy as np
import pytest

from shadowprice.montecarlo import (
    CASE1_THETA,
    ScenarioSpec,
    StudyFailure,
    ar1_correlation,
    builtin_scenario,
    generate_data,
    iteration_streams,
    load_scenario,
    run_iteration,
    run_study,
)
from shadowprice.pipeline import estimate


def ols_r2(data):
    beta = np.linalg.lstsq(data.X, data.y, rcond=None)[0]
    resid = data.y - data.X @ beta
    return 1 - resid @ resid / np.sum((data.y - data.y.mean()) ** 2)


class TestScenarios:
    def test_case1_truth(self):
        spec = builtin_scenario(1)
        assert spec.theta0 == (0.1, 0.3, 0.0, -0.5, 0.0, 0.3, 0.0, 0.4, 0.0, -0.2, 0.0) == CASE1_THETA
        assert spec.restrictions == tuple(f"theta[{j}]=0" for j in range(1, 11))
        assert spec.rho == 0.8 and spec.n == 1000

    def test_sum_restriction_values(self):
        for case, expect in [(2, 0.0), (3, -0.2)]:
            spec = builtin_scenario(case)
            system = spec.system()
            assert system.q == 11
            assert system.g(np.array(spec.theta0))[-1] == expect

    def test_round_trip(self, tmp_path):
        spec = builtin_scenario(3)
        path = tmp_path / "s.json"
        path.write_text(json.dumps(spec.to_dict()))
        assert load_scenario(path) == spec

    @pytest.mark.parametrize(
        "kw",
        [{"rho": 0.0}, {"rho": 1.0}, {"target_snr": 0.0}, {"iterations": 0}, {"n": 11}, {"theta0": (0.0,) * 3},
         {"restrictions": ()}, {"bootstrap": -1}, {"multiplier_law": "x"}, {"search": "x"}, {"restrictions": ("theta[99]=0",)}],
    )
    def test_rejects(self, kw):
        base = builtin_scenario(1).to_dict()
        base.update(kw)
        if "restrictions" in kw:
            base["labels"] = list(kw["restrictions"])
        with pytest.raises(ValueError):
            ScenarioSpec.from_dict(base)

    def test_unknown_key(self):
        d = builtin_scenario(1).to_dict()
        d["colour"] = 1
        with pytest.raises(ValueError):
            ScenarioSpec.from_dict(d)


class TestGenerate:
    def test_ar1_matrix(self):
        R = ar1_correlation(4, 0.5)
        assert R[0, 3] == 0.125 and np.all(np.diag(R) == 1)

    def test_adjacent_correlation(self):
        spec = builtin_scenario(1).with_overrides(n=100_000)
        X = generate_data(spec, 1).X[:, 1:]
        r = [np.corrcoef(X[:, j], X[:, j + 1])[0, 1] for j in range(spec.p - 1)]
        assert np.all(np.abs(np.array(r) - 0.8) < 0.01), r

    def test_independence_limit(self):
        spec = builtin_scenario(1).with_overrides(n=10_000, rho=1e-9)
        X = generate_data(spec, 2).X[:, 1:]
        r = [np.corrcoef(X[:, j], X[:, j + 1])[0, 1] for j in range(spec.p - 1)]
        assert np.all(np.abs(r) < 0.05)

    def test_r2_large_n(self):
        data = generate_data(builtin_scenario(1).with_overrides(n=100_000), 3)
        assert abs(ols_r2(data) - 0.5) < 0.03

    def test_r2_calibration(self):
        spec = builtin_scenario(1)
        r2 = [ols_r2(generate_data(spec, s)) for s in range(50)]
        assert 0.45 <= np.mean(r2) <= 0.55

    def test_design(self):
        spec = builtin_scenario(2)
        data = generate_data(spec, 4)
        assert data.X.shape == (1000, 11) and np.all(data.X[:, 0] == 1)
        np.testing.assert_array_equal(data.y, generate_data(spec, 4).y)

    def test_streams_independent_of_order(self):
        a, sa = iteration_streams(7, 3)
        b, sb = iteration_streams(7, 3)
        assert sa == sb and a.random() == b.random()
        assert iteration_streams(7, 4)[1] != sa

    def test_noiseless_limit(self):
        spec = builtin_scenario(1).with_overrides(target_snr=1e14, search="full")
        est = estimate(generate_data(spec, 5), spec.system(), spec.pipeline_config())
        np.testing.assert_allclose(est.solution.theta, spec.theta0, atol=1e-6)
        np.testing.assert_allclose(est.debiased.theta_db, spec.theta0, atol=1e-6)
        assert est.isp.isp.max() < 1e-6


class TestStudy:
    def small(self, **kw):
        kw.setdefault("bootstrap", 0)
        return builtin_scenario(2).with_overrides(n=300, grid_size=15, **kw)

    def test_aggregates(self, tmp_path):
        spec = self.small()
        res = run_study(spec, iterations=6)
        assert len(res.ok) == 6 and not res.failures
        cov = res.coverage()
        assert "bootstrap" not in cov and np.all((0 <= cov["analytic"]) & (cov["analytic"] <= 1))
        est = res.estimate_stats()
        db = np.array([r.theta_db for r in res.ok])
        np.testing.assert_allclose(est["mean"], db.mean(axis=0))
        assert np.all(est["sd"] >= 0)
        res.table1_csv(tmp_path / "t1.csv")
        res.table2_csv(tmp_path / "t2.csv")
        res.figure1_csv(tmp_path / "f1.csv")
        assert (tmp_path / "t1.csv").read_text().splitlines()[0] == "kind,name,truth,mean,sd,abs_bias,plateau_frequency,in_plateau"
        assert (tmp_path / "t2.csv").read_text().splitlines()[0] == "row,analytic,bootstrap"
        fig = (tmp_path / "f1.csv").read_text().splitlines()
        assert fig[0].startswith("rank,index,label,isp_mean")
        means = [float(l.split(",")[3]) for l in fig[1:]]
        assert means == sorted(means) and len(means) == spec.q

    def test_iteration_matches_study(self):
        spec = self.small()
        res = run_study(spec, iterations=3)
        again = run_iteration(spec, 2)
        np.testing.assert_array_equal(res.results[2].theta_db, again.theta_db)

    def test_worker_invariance(self):
        spec = self.small(bootstrap=5)
        one = run_study(spec, iterations=4, workers=1)
        two = run_study(spec, iterations=4, workers=2)
        assert json.dumps(one.to_dict()) == json.dumps(two.to_dict())
        assert "bootstrap" in one.coverage()

    def test_failure_budget(self, monkeypatch):
        import shadowprice.montecarlo as mc
        from shadowprice.kkt import KktConvergenceError

        def boom(*a, **k):
            raise KktConvergenceError("forced", 1.0, 1.0)

        monkeypatch.setattr(mc, "estimate", boom)
        with pytest.raises(StudyFailure):
            run_study(self.small(), iterations=3)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            run_study(self.small(), iterations=0)
        with pytest.raises(ValueError):
            run_study(self.small(), iterations=2, workers=0)
