"""Simulation design with AR(1) regressors and the study harness.

Regressors are ``X = [1, Z L']`` with ``L`` the Cholesky factor of the
AR(1) correlation matrix, and the noise variance is calibrated on each
realised design so that ``Var(X theta0) / Var(eps)`` hits the target.
Every iteration owns two seed streams (data and bootstrap) derived from
``(seed, iteration)``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .bootstrap import MULTIPLIER_LAWS, REPLICATION_ERRORS, BootstrapConfig, BootstrapFailure, run_bootstrap
from .dsl import RestrictionSystem
from .model import Dataset, r_squared
from .pipeline import PipelineConfig, estimate

__all__ = [
    "ScenarioSpec",
    "IterationResult",
    "StudyResult",
    "StudyFailure",
    "MAX_FAILURE_RATE",
    "ar1_correlation",
    "generate_data",
    "iteration_streams",
    "run_iteration",
    "run_study",
    "builtin_scenario",
    "load_scenario",
]

MAX_FAILURE_RATE = 0.02
CASE1_THETA = (0.1, 0.3, 0.0, -0.5, 0.0, 0.3, 0.0, 0.4, 0.0, -0.2, 0.0)
SUM_RESTRICTION = "theta[1]+theta[2]+theta[3]+theta[4]=0"


class StudyFailure(RuntimeError):
    """Too many simulation iterations failed."""


@dataclass(frozen=True)
class ScenarioSpec:
    case_id: int
    theta0: tuple[float, ...]
    restrictions: tuple[str, ...]
    n: int = 1000
    p: int = 10
    rho: float = 0.8
    target_snr: float = 1.0
    c0: float = 1.0
    iterations: int = 1000
    seed: int = 0
    sigma: object = "identity"
    grid_size: int = 50
    level: float = 0.95
    screen_level: float = 0.05
    search: str = "active"
    bootstrap: int = 0
    multiplier_law: str = "rademacher"
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "theta0", tuple(float(t) for t in self.theta0))
        object.__setattr__(self, "restrictions", tuple(self.restrictions))
        object.__setattr__(self, "labels", tuple(self.labels) if self.labels else tuple(self.restrictions))
        if len(self.theta0) != self.p + 1:
            raise ValueError(f"theta0 needs p + 1 = {self.p + 1} entries, got {len(self.theta0)}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.target_snr > 0:
            raise ValueError(f"target_snr must be positive, got {self.target_snr}")
        if self.n <= self.p + 1:
            raise ValueError(f"n must exceed p + 1, got n={self.n}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if not self.restrictions:
            raise ValueError("scenario needs at least one restriction")
        if len(self.labels) != len(self.restrictions):
            raise ValueError("labels and restrictions differ in length")
        if self.bootstrap < 0:
            raise ValueError(f"bootstrap must be non-negative, got {self.bootstrap}")
        if self.multiplier_law not in MULTIPLIER_LAWS:
            raise ValueError(f"multiplier_law must be one of {MULTIPLIER_LAWS}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.pipeline_config()
        self.system()

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta0"] = list(self.theta0)
        d["restrictions"] = list(self.restrictions)
        d["labels"] = list(self.labels)
        return d

    def with_overrides(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(c0=self.c0, grid_size=self.grid_size, level=self.level, screen_level=self.screen_level, search=self.search)

    def system(self) -> RestrictionSystem:
        return RestrictionSystem.from_strings(self.restrictions, self.p + 1, self.sigma, self.labels)

    @property
    def q(self) -> int:
        return len(self.restrictions)


def builtin_scenario(case_id: int) -> ScenarioSpec:
    """One of the three shipped scenarios."""
    if case_id not in (1, 2, 3):
        raise ValueError(f"case_id must be 1, 2 or 3, got {case_id}")
    text = resources.files("shadowprice").joinpath(f"data/case{case_id}.json").read_text()
    return ScenarioSpec.from_dict(json.loads(text))


def load_scenario(path: str | Path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))


def ar1_correlation(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def iteration_streams(seed: int, iteration: int) -> tuple[np.random.Generator, int]:
    """Data generator and bootstrap seed for one iteration."""
    data_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration, 0)))
    boot_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(iteration, 1)).generate_state(1, np.uint64)[0])
    return data_rng, boot_seed


def generate_data(spec: ScenarioSpec, rep_seed) -> Dataset:
    """Draw one dataset; ``rep_seed`` is a Generator or an integer seed."""
    rng = rep_seed if isinstance(rep_seed, np.random.Generator) else np.random.default_rng(rep_seed)
    L = np.linalg.cholesky(ar1_correlation(spec.p, spec.rho))
    Z = rng.standard_normal((spec.n, spec.p))
    X = np.column_stack([np.ones(spec.n), Z @ L.T])
    theta0 = np.asarray(spec.theta0)
    signal = X @ theta0
    sigma_eps = math.sqrt(np.var(signal) / spec.target_snr)
    y = signal + sigma_eps * rng.standard_normal(spec.n)
    names = ["const"] + [f"x{j}" for j in range(1, spec.p + 1)]
    return Dataset(y, X, tuple(names), True)


@dataclass(frozen=True)
class IterationResult:
    index: int
    theta_hat: np.ndarray | None = None
    theta_db: np.ndarray | None = None
    lam: float = float("nan")
    c_hat: float = float("nan")
    bias_proxy: float = float("nan")
    var_proxy: float = float("nan")
    isp: np.ndarray | None = None
    cutoff: int | None = None
    point_members: np.ndarray | None = None
    boundary_members: np.ndarray | None = None
    boot_cutoff_mean: float | None = None
    boot_cutoff_sd: float | None = None
    covered_analytic: np.ndarray | None = None
    covered_boot: np.ndarray | None = None
    r2: float = float("nan")
    error: str | None = None

    @property
    def members(self) -> np.ndarray:
        """Plateau membership: bootstrap boundary when available, else the point cutoff."""
        return self.boundary_members if self.boundary_members is not None else self.point_members


def _mask(q: int, idx) -> np.ndarray:
    out = np.zeros(q, dtype=bool)
    out[list(idx)] = True
    return out


def run_iteration(spec: ScenarioSpec, i: int, system: RestrictionSystem | None = None) -> IterationResult:
    system = spec.system() if system is None else system
    data_rng, boot_seed = iteration_streams(spec.seed, i)
    data = generate_data(spec, data_rng)
    theta0 = np.asarray(spec.theta0)
    try:
        est = estimate(data, system, spec.pipeline_config())
        db = est.debiased
        out = dict(
            index=i,
            theta_hat=est.solution.theta,
            theta_db=db.theta_db,
            lam=est.solution.lam,
            c_hat=est.c_hat,
            bias_proxy=est.bias_proxy,
            var_proxy=est.var_proxy,
            isp=est.isp.isp,
            cutoff=est.isp.cutoff,
            point_members=_mask(system.q, est.isp.plateau_members),
            covered_analytic=(db.ci_lower <= theta0) & (theta0 <= db.ci_upper),
            r2=r_squared(data, db.theta_db),
        )
        if spec.bootstrap:
            bcfg = BootstrapConfig(B=spec.bootstrap, multiplier_law=spec.multiplier_law, seed=boot_seed, level=spec.level)
            summ = run_bootstrap(data, system, bcfg, spec.pipeline_config(), original=est)
            lo, hi = summ.theta_ci
            out.update(
                boundary_members=_mask(system.q, summ.plateau_members()),
                boot_cutoff_mean=summ.cutoff_mean,
                boot_cutoff_sd=summ.cutoff_sd,
                covered_boot=(lo <= theta0) & (theta0 <= hi),
            )
    except REPLICATION_ERRORS + (BootstrapFailure,) as exc:
        return IterationResult(index=i, error=f"{type(exc).__name__}: {exc}")
    return IterationResult(**out)


_WORKER: dict = {}


def _init_worker(spec):
    _WORKER["spec"] = spec
    _WORKER["system"] = spec.system()


def _worker_run(indices):
    return [run_iteration(_WORKER["spec"], i, _WORKER["system"]) for i in indices]


def _summary(x: np.ndarray) -> dict:
    return {
        "min": float(np.min(x)),
        "q1": float(np.quantile(x, 0.25)),
        "median": float(np.median(x)),
        "mean": float(np.mean(x)),
        "q3": float(np.quantile(x, 0.75)),
        "max": float(np.max(x)),
    }


def _sd(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


@dataclass(frozen=True)
class StudyResult:
    spec: ScenarioSpec
    results: tuple[IterationResult, ...]
    failures: dict[int, str] = field(default_factory=dict)

    # ---------------------------------------------------------- raw arrays

    @property
    def ok(self) -> list[IterationResult]:
        return [r for r in self.results if r.error is None]

    def _stack(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.ok])

    @property
    def has_bootstrap(self) -> bool:
        return bool(self.ok) and self.ok[0].covered_boot is not None

    # ---------------------------------------------------------- aggregates

    def estimate_stats(self) -> dict:
        theta0 = np.asarray(self.spec.theta0)
        db = self._stack("theta_db")
        return {
            "mean": db.mean(axis=0),
            "sd": db.std(axis=0, ddof=1) if len(db) > 1 else np.zeros(db.shape[1]),
            "abs_bias": np.abs(db.mean(axis=0) - theta0),
        }

    def isp_stats(self) -> dict:
        isp = self._stack("isp")
        members = np.array([r.members for r in self.ok])
        return {
            "mean": isp.mean(axis=0),
            "sd": isp.std(axis=0, ddof=1) if len(isp) > 1 else np.zeros(isp.shape[1]),
            "plateau_frequency": members.mean(axis=0),
        }

    def scalar_stats(self) -> dict:
        bias, var = self._stack("bias_proxy"), self._stack("var_proxy")
        cols = {
            "lambda": self._stack("lam"),
            "c_hat": self._stack("c_hat"),
            "risk": bias + var,
            "bias_proxy": bias,
            "var_proxy": var,
            "r2": self._stack("r2"),
        }
        return {k: (float(np.mean(v)), _sd(v)) for k, v in cols.items()}

    def coverage(self) -> dict:
        out = {"analytic": self._stack("covered_analytic").mean(axis=0)}
        if self.has_bootstrap:
            out["bootstrap"] = self._stack("covered_boot").mean(axis=0)
        return out

    def cutoff_lines(self) -> tuple[float | None, float | None]:
        """Mean cutoff and its sd for the sorted-ISP figure.

        With the bootstrap these average the per-iteration bootstrap mean and
        sd; without it they summarise the point cutoffs across iterations.
        """
        if self.has_bootstrap:
            means = [r.boot_cutoff_mean for r in self.ok if r.boot_cutoff_mean is not None]
            sds = [r.boot_cutoff_sd for r in self.ok if r.boot_cutoff_sd is not None]
            if not means:
                return None, None
            return float(np.mean(means)), float(np.mean(sds))
        cuts = [r.cutoff for r in self.ok if r.cutoff is not None]
        if not cuts:
            return None, None
        return float(np.mean(cuts)), _sd(cuts)

    def to_dict(self) -> dict:
        est, isp, cov = self.estimate_stats(), self.isp_stats(), self.coverage()
        mean_cut, sd_cut = self.cutoff_lines()
        return {
            "scenario": self.spec.to_dict(),
            "iterations_ok": len(self.ok),
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "estimates": {k: v.tolist() for k, v in est.items()},
            "isp": {k: v.tolist() for k, v in isp.items()},
            "scalars": {k: {"mean": m, "sd": s} for k, (m, s) in self.scalar_stats().items()},
            "coverage": {k: v.tolist() for k, v in cov.items()},
            "cutoff_mean": mean_cut,
            "cutoff_sd": sd_cut,
        }

    # ---------------------------------------------------------- CSV exports

    def table1_csv(self, path: str | Path) -> None:
        est, isp = self.estimate_stats(), self.isp_stats()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "name", "truth", "mean", "sd", "abs_bias", "plateau_frequency", "in_plateau"])
            for j, t in enumerate(self.spec.theta0):
                w.writerow(["parameter", f"theta[{j}]", repr(t), repr(float(est["mean"][j])), repr(float(est["sd"][j])), repr(float(est["abs_bias"][j])), "", ""])
            for j, label in enumerate(self.spec.labels):
                freq = float(isp["plateau_frequency"][j])
                w.writerow(["isp", label, "", repr(float(isp["mean"][j])), repr(float(isp["sd"][j])), "", repr(freq), int(freq > 0.5)])
            for name, (m, s) in self.scalar_stats().items():
                w.writerow(["scalar", name, "", repr(m), repr(s), "", "", ""])

    def table2_csv(self, path: str | Path) -> None:
        cov = self.coverage()
        boot = cov.get("bootstrap")
        slopes = slice(1, None)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "analytic", "bootstrap"])
            for j in range(len(self.spec.theta0)):
                w.writerow([f"theta[{j}]", repr(float(cov["analytic"][j])), "" if boot is None else repr(float(boot[j]))])
            sa = _summary(cov["analytic"][slopes])
            sb = None if boot is None else _summary(boot[slopes])
            for key in sa:
                w.writerow([key, repr(sa[key]), "" if sb is None else repr(sb[key])])

    def figure1_csv(self, path: str | Path) -> None:
        isp = self.isp_stats()
        order = np.argsort(isp["mean"], kind="stable")
        mean_cut, sd_cut = self.cutoff_lines()
        lines = ["" if mean_cut is None else repr(mean_cut), "" if sd_cut is None else repr(sd_cut)]
        boundary = "" if mean_cut is None else repr(mean_cut + sd_cut)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "index", "label", "isp_mean", "isp_sd", "plateau_frequency", "cutoff_mean", "cutoff_sd", "boundary"])
            for rank, j in enumerate(order, start=1):
                w.writerow([
                    rank, int(j), self.spec.labels[j], repr(float(isp["mean"][j])), repr(float(isp["sd"][j])),
                    repr(float(isp["plateau_frequency"][j])), *lines, boundary,
                ])


def run_study(spec: ScenarioSpec, iterations: int | None = None, workers: int = 1) -> StudyResult:
    """Run the full pipeline on ``iterations`` fresh datasets."""
    iterations = spec.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    if workers == 1 or iterations == 1:
        system = spec.system()
        results = [run_iteration(spec, i, system) for i in range(iterations)]
    else:
        chunks = [list(range(iterations))[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(spec,)) as pool:
            results = [r for part in pool.map(_worker_run, chunks) for r in part]
        results.sort(key=lambda r: r.index)
    failures = {r.index: r.error for r in results if r.error is not None}
    if len(failures) > MAX_FAILURE_RATE * iterations:
        raise StudyFailure(f"{len(failures)} of {iterations} iterations failed (limit {MAX_FAILURE_RATE:.0%})")
    if len(failures) == iterations:
        raise StudyFailure("every iteration failed")
    return StudyResult(spec, tuple(results), failures)
