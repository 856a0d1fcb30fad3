"""Cross-country Solow regressions with soft steady-state restrictions.

The log-linear steady state is

    ln y = c + theta_s ln s + theta_n ln(n + g + delta) + e

with theta_s = alpha / (1 - alpha) = -theta_n.  The linear restriction
``theta_s + theta_n = 0`` is relaxed by polynomial versions
``theta_s - (-theta_n)^tau = 0``.  Parameter order is (intercept,
theta_s, theta_n).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import linalg

from .bootstrap import BootstrapConfig, BootstrapSummary, run_bootstrap
from .dsl import Polynomial, RestrictionSystem, parse_restriction
from .inference import sandwich, wald_pvalue, wald_test
from .model import DataError, Dataset, fit_unconstrained, r_squared, score_covariance
from .pipeline import Estimate, PipelineConfig, estimate

__all__ = [
    "SolowConfig",
    "SolowReport",
    "solow_restrictions",
    "build_solow_model",
    "restricted_ols",
    "run_solow",
    "synthetic_solow_rows",
    "write_solow_csv",
    "SYNTHETIC_THETA_S",
]

SYNTHETIC_THETA_S = 1.3791


@dataclass(frozen=True)
class SolowConfig:
    csv_path: str
    country_col: str = "country"
    y_col: str = "y"
    s_col: str = "s"
    n_col: str = "n"
    g_plus_delta: float = 0.05
    tau_list: tuple[int, ...] = (2, 3)
    c0: float = 500.0
    grid_size: int = 50
    level: float = 0.95
    screen_level: float = 0.05
    bootstrap: int = 0
    multiplier_law: str = "rademacher"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tau_list", tuple(int(t) for t in self.tau_list))
        if not self.g_plus_delta > 0:
            raise ValueError(f"g_plus_delta must be positive, got {self.g_plus_delta}")
        if any(t < 1 for t in self.tau_list):
            raise ValueError(f"tau_list entries must be positive integers, got {self.tau_list}")
        if self.bootstrap < 0:
            raise ValueError(f"bootstrap must be non-negative, got {self.bootstrap}")
        PipelineConfig(c0=self.c0, grid_size=self.grid_size, level=self.level, screen_level=self.screen_level)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "SolowConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown solow config keys: {sorted(extra)}")
        d = dict(d)
        if base_dir is not None and "csv_path" in d and not Path(d["csv_path"]).is_absolute():
            d["csv_path"] = str(Path(base_dir) / d["csv_path"])
        return cls(**d)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(c0=self.c0, grid_size=self.grid_size, level=self.level, screen_level=self.screen_level)

    @property
    def n_column_name(self) -> str:
        return f"ln(n+{self.g_plus_delta:g})"


def solow_restrictions(tau_list=(2, 3)) -> list[str]:
    out = ["theta[1]+theta[2]=0"]
    out += [f"theta[1]-(-theta[2])^{tau}=0" for tau in tau_list]
    return out


def build_solow_model(cfg: SolowConfig) -> tuple[Dataset, RestrictionSystem]:
    path = Path(cfg.csv_path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in (cfg.y_col, cfg.s_col, cfg.n_col) if c not in cols]
        if missing:
            raise DataError(f"{path}: columns not found: {missing}")
        rows = list(reader)
    y, s, n = [], [], []
    for i, row in enumerate(rows, start=1):
        try:
            yi, si, ni = float(row[cfg.y_col]), float(row[cfg.s_col]), float(row[cfg.n_col])
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: non-numeric entry ({exc})") from exc
        if not yi > 0:
            raise DataError(f"{path}: row {i}: output {yi} must be positive")
        if not si > 0:
            raise DataError(f"{path}: row {i}: saving rate {si} must be positive")
        if not ni + cfg.g_plus_delta > 0:
            raise DataError(f"{path}: row {i}: n + {cfg.g_plus_delta:g} = {ni + cfg.g_plus_delta} must be positive")
        y.append(yi)
        s.append(si)
        n.append(ni)
    X = np.column_stack([np.ones(len(y)), np.log(s), np.log(np.asarray(n) + cfg.g_plus_delta)])
    data = Dataset(np.log(y), X, ("const", "ln(s)", cfg.n_column_name), True)
    texts = solow_restrictions(cfg.tau_list)
    system = RestrictionSystem.from_strings(texts, 3, "identity", texts)
    return data, system


def restricted_ols(data: Dataset, linear_restriction) -> np.ndarray:
    """Least squares subject to ``R theta = r``, from the bordered normal equations.

    ``linear_restriction`` is restriction text, a parsed expression, or an
    ``(R, r)`` pair.
    """
    if isinstance(linear_restriction, tuple):
        R, r = linear_restriction
        R = np.atleast_2d(np.asarray(R, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
    else:
        expr = parse_restriction(linear_restriction, data.p) if isinstance(linear_restriction, str) else linear_restriction
        poly = Polynomial.from_expr(expr, data.p)
        if not poly.is_affine:
            raise ValueError("restricted_ols needs a linear restriction")
        row, const = poly.linear_part()
        R, r = row[None, :], np.array([-const])
    if R.shape[1] != data.p or R.shape[0] != r.shape[0]:
        raise ValueError(f"restriction shapes R{R.shape}, r{r.shape} do not fit p={data.p}")
    k = R.shape[0]
    XtX = data.X.T @ data.X
    K = np.block([[XtX, R.T], [R, np.zeros((k, k))]])
    rhs = np.concatenate([data.X.T @ data.y, r])
    sol = linalg.solve(K, rhs)
    theta = sol[: data.p]
    # one refinement pass so R theta = r holds to round-off
    resid = rhs - K @ sol
    theta = theta + linalg.solve(K, resid)[: data.p]
    return theta


@dataclass(frozen=True)
class SolowReport:
    data: Dataset
    system: RestrictionSystem
    config: SolowConfig
    theta_unrestricted: np.ndarray
    se_unrestricted: np.ndarray
    r2_unrestricted: float
    theta_restricted: np.ndarray
    r2_restricted: float
    soft: Estimate
    wald_stat: float
    wald_pvalue: float
    wald_pvalue_f: float
    bootstrap: BootstrapSummary | None = None
    notes: list[str] = field(default_factory=list)

    def plateau_members(self) -> list[int]:
        if self.bootstrap is not None and self.bootstrap.distribution is not None:
            return self.bootstrap.plateau_members()
        return list(self.soft.isp.plateau_members)

    def to_dict(self) -> dict:
        soft = self.soft
        db = soft.debiased
        out = {
            "columns": list(self.data.column_names),
            "n": self.data.n,
            "restrictions": list(self.system.labels),
            "unrestricted": {
                "theta": self.theta_unrestricted.tolist(),
                "se": self.se_unrestricted.tolist(),
                "r2": self.r2_unrestricted,
            },
            "restricted": {"theta": self.theta_restricted.tolist(), "r2": self.r2_restricted},
            "soft": {
                "c_hat": soft.c_hat,
                "lambda": soft.solution.lam,
                "active": soft.solution.active,
                "theta_hat": soft.solution.theta.tolist(),
                "theta_db": db.theta_db.tolist(),
                "se": db.se.tolist(),
                "ci_lower": db.ci_lower.tolist(),
                "ci_upper": db.ci_upper.tolist(),
                "r2": soft.r2_debiased,
                "risk": soft.risk,
                "bias_proxy": soft.bias_proxy,
                "var_proxy": soft.var_proxy,
            },
            "wald": {
                "restriction": self.system.labels[0],
                "statistic": self.wald_stat,
                "df": 1,
                "p_value": self.wald_pvalue,
                "p_value_f": self.wald_pvalue_f,
                "df_resid": self.data.n - self.data.p,
            },
            "isp": soft.isp.to_dict(),
            "plateau_members": self.plateau_members(),
            "bootstrap": None if self.bootstrap is None else self.bootstrap.to_dict(),
            "notes": list(self.notes),
        }
        return out


def run_solow(cfg: SolowConfig, workers: int = 1) -> SolowReport:
    data, system = build_solow_model(cfg)
    theta_u = fit_unconstrained(data)
    V = sandwich(data.X.T @ data.X / data.n, score_covariance(data, theta_u))
    se_u = np.sqrt(np.clip(np.diag(V), 0, None) / data.n)
    theta_r = restricted_ols(data, system.labels[0])
    pcfg = cfg.pipeline_config()
    soft = estimate(data, system, pcfg)
    stat, pval = wald_test(system.labels[0], theta_u, data)
    boot = None
    if cfg.bootstrap:
        bcfg = BootstrapConfig(B=cfg.bootstrap, multiplier_law=cfg.multiplier_law, seed=cfg.seed, level=cfg.level, workers=workers)
        boot = run_bootstrap(data, system, bcfg, pcfg, original=soft)
    notes = []
    if not soft.solution.active:
        notes.append("restriction form slack at every grid tolerance; soft estimate equals the unrestricted fit")
    return SolowReport(
        data=data,
        system=system,
        config=cfg,
        theta_unrestricted=theta_u,
        se_unrestricted=se_u,
        r2_unrestricted=r_squared(data, theta_u),
        theta_restricted=theta_r,
        r2_restricted=r_squared(data, theta_r),
        soft=soft,
        wald_stat=stat,
        wald_pvalue=pval,
        wald_pvalue_f=wald_pvalue(stat, 1, data.n - data.p),
        bootstrap=boot,
        notes=notes,
    )


def synthetic_solow_rows(
    n_countries: int = 90,
    theta_s: float = SYNTHETIC_THETA_S,
    intercept: float = 4.651,
    noise_sd: float = 0.6,
    g_plus_delta: float = 0.05,
    seed: int = 0,
) -> list[dict]:
    """Countries drawn from the restricted steady state ``theta_n = -theta_s``."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.04, 0.36, n_countries)
    n = rng.uniform(-0.01, 0.04, n_countries)
    log_y = intercept + theta_s * np.log(s) - theta_s * np.log(n + g_plus_delta) + noise_sd * rng.standard_normal(n_countries)
    return [
        {"country": f"C{i + 1:03d}", "y": math.exp(float(ly)), "s": float(si), "n": float(ni)}
        for i, (ly, si, ni) in enumerate(zip(log_y, s, n))
    ]


def write_solow_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["country", "y", "s", "n"])
        for r in rows:
            w.writerow([r["country"], repr(r["y"]), repr(r["s"]), repr(r["n"])])
