"""End-to-end bi-level estimation on one dataset."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsl import RestrictionSystem
from .inference import INTERVAL_VARIANCES, AsymptoticBlocks, DebiasedEstimate, compute_blocks, debias
from .isp import DEFAULT_SCREEN_LEVEL, PLATEAU_VARIANCES, IspReport, isp_report
from .kkt import KktProblem, KktSolution
from .model import LEAST_SQUARES, Dataset, r_squared
from .tolerance import DEFAULT_GRID_SIZE, SEARCH_MODES, RiskCurve, risk_proxy, select_tolerance

__all__ = ["PipelineConfig", "Estimate", "estimate"]


@dataclass(frozen=True)
class PipelineConfig:
    c0: float = 1.0
    grid_size: int = DEFAULT_GRID_SIZE
    level: float = 0.95
    screen_level: float = DEFAULT_SCREEN_LEVEL
    plateau_variance: str = "conditional"
    search: str = "active"
    interval_variance: str = "db"
    # when set, skip tolerance selection and solve at this c
    fixed_c: float | None = None

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError(f"c0 must be positive, got {self.c0}")
        if self.grid_size < 2:
            raise ValueError(f"grid_size must be at least 2, got {self.grid_size}")
        if not 0 < self.level < 1:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if not 0 < self.screen_level < 1:
            raise ValueError(f"screen_level must lie in (0, 1), got {self.screen_level}")
        if self.plateau_variance not in PLATEAU_VARIANCES:
            raise ValueError(f"plateau_variance must be one of {PLATEAU_VARIANCES}, got {self.plateau_variance!r}")
        if self.search not in SEARCH_MODES:
            raise ValueError(f"search must be one of {SEARCH_MODES}, got {self.search!r}")
        if self.interval_variance not in INTERVAL_VARIANCES:
            raise ValueError(f"interval_variance must be one of {INTERVAL_VARIANCES}, got {self.interval_variance!r}")
        if self.fixed_c is not None and not self.fixed_c > 0:
            raise ValueError(f"fixed_c must be positive, got {self.fixed_c}")


@dataclass(frozen=True)
class Estimate:
    theta_tilde: np.ndarray
    h_tilde: float
    curve: RiskCurve | None
    solution: KktSolution
    bias_proxy: float
    var_proxy: float
    blocks: AsymptoticBlocks
    debiased: DebiasedEstimate
    isp: IspReport
    r2_unrestricted: float
    r2_debiased: float

    @property
    def c_hat(self) -> float:
        return self.solution.c

    @property
    def risk(self) -> float:
        return self.bias_proxy + self.var_proxy


def estimate(data: Dataset, system: RestrictionSystem, cfg: PipelineConfig = PipelineConfig(), loss=LEAST_SQUARES) -> Estimate:
    problem = KktProblem(data, system, loss)
    if cfg.fixed_c is None:
        curve, sol = select_tolerance(data, system, cfg.c0, cfg.grid_size, problem=problem, loss=loss, search=cfg.search)
        bias, var = float(curve.bias_proxy[curve.index]), float(curve.var_proxy[curve.index])
    else:
        curve = None
        sol = problem.solve(cfg.fixed_c)
        bias, var = risk_proxy(sol, problem.theta_tilde, data, system, loss)
    blocks = compute_blocks(sol, data, system, loss)
    db = debias(sol, problem.theta_tilde, data, system, blocks=blocks, level=cfg.level, loss=loss, variance=cfg.interval_variance)
    report = isp_report(sol, blocks, system, data.n, cfg.screen_level, cfg.plateau_variance)
    return Estimate(
        theta_tilde=problem.theta_tilde,
        h_tilde=problem.h_tilde,
        curve=curve,
        solution=sol,
        bias_proxy=bias,
        var_proxy=var,
        blocks=blocks,
        debiased=db,
        isp=report,
        r2_unrestricted=r_squared(data, problem.theta_tilde),
        r2_debiased=r_squared(data, db.theta_db),
    )
