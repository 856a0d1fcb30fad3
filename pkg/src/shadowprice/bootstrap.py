"""Wild bootstrap that re-runs the whole bi-level estimator per replication.

Pseudo-outcomes keep the design fixed and perturb the residuals of the
constrained fit at the selected tolerance::

    y_b = X theta_hat(c_hat) + u_hat * w_b,    E[w] = 0, E[w^2] = 1

``centering="unrestricted"`` instead perturbs around the unconstrained fit,
``y_b = X theta_tilde + u_tilde * w_b``, which keeps the expected bootstrap
loss equal to the sample loss so the multiplier is preserved at fixed c.

Each replication draws from its own stream derived from ``(seed, b)``, so
the output does not depend on how replications are spread over workers.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsl import RestrictionSystem
from .inference import SingularSystemError
from .kkt import InfeasibleToleranceError, KktConvergenceError, KktSolution
from .model import DataError, Dataset
from .pipeline import Estimate, PipelineConfig, estimate

__all__ = [
    "MULTIPLIER_LAWS",
    "CENTERINGS",
    "MAX_FAILURE_RATE",
    "BootstrapConfig",
    "BootstrapFailure",
    "BootstrapSummary",
    "CutoffDistribution",
    "draw_multipliers",
    "replication_rng",
    "wild_resample",
    "run_bootstrap",
    "cutoff_distribution",
]

MULTIPLIER_LAWS = ("rademacher", "mammen", "gaussian")
CENTERINGS = ("fitted", "unrestricted")
MAX_FAILURE_RATE = 0.05

# errors that count as a failed replication rather than a bug
REPLICATION_ERRORS = (
    KktConvergenceError,
    InfeasibleToleranceError,
    SingularSystemError,
    DataError,
    np.linalg.LinAlgError,
)

_SQRT5 = math.sqrt(5.0)
_MAMMEN_LOW = -(_SQRT5 - 1) / 2
_MAMMEN_HIGH = (_SQRT5 + 1) / 2
_MAMMEN_P_LOW = (_SQRT5 + 1) / (2 * _SQRT5)


class BootstrapFailure(RuntimeError):
    """Too many replications failed to solve."""


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 200
    multiplier_law: str = "rademacher"
    seed: int = 0
    level: float = 0.95
    workers: int = 1
    centering: str = "fitted"

    def __post_init__(self):
        if self.centering not in CENTERINGS:
            raise ValueError(f"centering must be one of {CENTERINGS}, got {self.centering!r}")
        if self.B < 1:
            raise ValueError(f"B must be at least 1, got {self.B}")
        if self.multiplier_law not in MULTIPLIER_LAWS:
            raise ValueError(f"multiplier_law must be one of {MULTIPLIER_LAWS}, got {self.multiplier_law!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0 < self.level < 1:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if self.workers < 1:
            raise ValueError(f"workers must be at least 1, got {self.workers}")


def replication_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))


def draw_multipliers(law: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero, unit-variance multipliers."""
    if law == "rademacher":
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)
    if law == "mammen":
        return np.where(rng.random(n) < _MAMMEN_P_LOW, _MAMMEN_LOW, _MAMMEN_HIGH)
    if law == "gaussian":
        return rng.standard_normal(n)
    raise ValueError(f"unknown multiplier law {law!r}")


def wild_resample(data: Dataset, sol_at_chat: KktSolution | np.ndarray, multipliers) -> Dataset:
    """Pseudo-outcomes around ``sol_at_chat`` (a solution or a bare parameter vector)."""
    w = np.asarray(multipliers, dtype=float)
    if w.shape != (data.n,):
        raise ValueError(f"need {data.n} multipliers, got shape {w.shape}")
    theta = sol_at_chat.theta if isinstance(sol_at_chat, KktSolution) else np.asarray(sol_at_chat, dtype=float)
    resid = data.y - data.X @ theta
    # same as fitted + resid * w, written so that w = 1 returns y bit for bit
    return data.with_outcome(data.y + (w - 1.0) * resid)


@dataclass(frozen=True)
class _Replication:
    index: int
    c_hat: float = float("nan")
    theta: np.ndarray | None = None
    theta_db: np.ndarray | None = None
    lam: float = float("nan")
    isp: np.ndarray | None = None
    cutoff: int | None = None
    error: str | None = None


def _replicate(data, system, pipeline_cfg, sol_at_chat, law, seed, b, w=None) -> _Replication:
    if w is None:
        w = draw_multipliers(law, data.n, replication_rng(seed, b))
    try:
        est = estimate(wild_resample(data, sol_at_chat, w), system, pipeline_cfg)
    except REPLICATION_ERRORS as exc:
        return _Replication(index=b, error=f"{type(exc).__name__}: {exc}")
    return _Replication(
        index=b,
        c_hat=est.c_hat,
        theta=est.solution.theta,
        theta_db=est.debiased.theta_db,
        lam=est.solution.lam,
        isp=est.isp.isp,
        cutoff=est.isp.cutoff,
    )


# worker-side state, set once per process by the pool initializer
_WORKER: dict = {}


def _init_worker(data, system, pipeline_cfg, sol_at_chat, law, seed):
    _WORKER.update(data=data, system=system, cfg=pipeline_cfg, sol=sol_at_chat, law=law, seed=seed)


def _worker_run(indices):
    s = _WORKER
    return [_replicate(s["data"], s["system"], s["cfg"], s["sol"], s["law"], s["seed"], b) for b in indices]


@dataclass(frozen=True)
class CutoffDistribution:
    count: int
    mean: float
    sd: float
    adjusted_boundary: float
    histogram: dict[int, int]


def cutoff_distribution(cutoffs) -> CutoffDistribution:
    """Mean, sd (ddof 1) and ``mean + sd`` of the non-missing cutoffs."""
    if isinstance(cutoffs, BootstrapSummary):
        cutoffs = cutoffs.cutoffs
    vals = np.array([m for m in cutoffs if m is not None], dtype=float)
    if vals.size == 0:
        raise ValueError("cutoff distribution undefined: every replication lacks a cutoff")
    if vals.size < 2:
        raise ValueError("cutoff distribution needs at least two defined cutoffs")
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1))
    hist = dict(sorted(Counter(int(m) for m in vals).items()))
    return CutoffDistribution(int(vals.size), mean, sd, mean + sd, hist)


@dataclass(frozen=True)
class BootstrapSummary:
    config: BootstrapConfig
    c_hats: np.ndarray
    thetas: np.ndarray
    theta_db: np.ndarray
    lambdas: np.ndarray
    isps: np.ndarray
    cutoffs: tuple
    theta_ci: tuple[np.ndarray, np.ndarray]
    order: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)
    distribution: CutoffDistribution | None = None

    @property
    def n_success(self) -> int:
        return len(self.c_hats)

    @property
    def cutoff_mean(self) -> float | None:
        return None if self.distribution is None else self.distribution.mean

    @property
    def cutoff_sd(self) -> float | None:
        return None if self.distribution is None else self.distribution.sd

    @property
    def adjusted_boundary(self) -> float | None:
        return None if self.distribution is None else self.distribution.adjusted_boundary

    def plateau_members(self) -> list[int]:
        """Restrictions whose ascending rank in the original sample is at most the boundary."""
        if self.distribution is None:
            return []
        bound = self.distribution.adjusted_boundary
        return sorted(int(j) for rank, j in enumerate(self.order, start=1) if rank <= bound)

    def to_dict(self) -> dict:
        d = self.distribution
        return {
            "B": self.config.B,
            "multiplier_law": self.config.multiplier_law,
            "centering": self.config.centering,
            "seed": self.config.seed,
            "level": self.config.level,
            "interval": "percentile on debiased replications",
            "n_success": self.n_success,
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "c_hat_mean": _mean_or_none(self.c_hats),
            "lambda_mean": _mean_or_none(self.lambdas),
            "theta_ci_lower": self.theta_ci[0].tolist(),
            "theta_ci_upper": self.theta_ci[1].tolist(),
            "cutoffs": list(self.cutoffs),
            "cutoff_mean": None if d is None else d.mean,
            "cutoff_sd": None if d is None else d.sd,
            "adjusted_boundary": None if d is None else d.adjusted_boundary,
            "cutoff_histogram": {} if d is None else {str(k): v for k, v in d.histogram.items()},
            "plateau_members": self.plateau_members(),
        }

    def histogram_csv(self, path: str | Path) -> None:
        hist = {} if self.distribution is None else self.distribution.histogram
        missing = sum(m is None for m in self.cutoffs)
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cutoff", "count"])
            for m, k in hist.items():
                writer.writerow([m, k])
            if missing:
                writer.writerow(["none", missing])


def _mean_or_none(x: np.ndarray):
    return float(np.mean(x)) if len(x) else None


def run_bootstrap(
    data: Dataset,
    system: RestrictionSystem,
    cfg: BootstrapConfig = BootstrapConfig(),
    pipeline_cfg: PipelineConfig = PipelineConfig(),
    original: Estimate | None = None,
    multipliers: np.ndarray | None = None,
) -> BootstrapSummary:
    """Run ``cfg.B`` replications of the full pipeline.

    ``multipliers`` (shape ``(B, n)``) overrides the random draws, which is
    how the identity fixed point is checked.
    """
    if original is None:
        original = estimate(data, system, pipeline_cfg)
    sol = original.solution if cfg.centering == "fitted" else original.theta_tilde
    B = cfg.B
    if multipliers is not None:
        multipliers = np.asarray(multipliers, dtype=float)
        if multipliers.shape != (B, data.n):
            raise ValueError(f"multipliers must have shape {(B, data.n)}, got {multipliers.shape}")
        reps = [
            _replicate(data, system, pipeline_cfg, sol, cfg.multiplier_law, cfg.seed, b, multipliers[b])
            for b in range(B)
        ]
    elif cfg.workers == 1 or B == 1:
        reps = [_replicate(data, system, pipeline_cfg, sol, cfg.multiplier_law, cfg.seed, b) for b in range(B)]
    else:
        chunks = [list(range(B))[i :: cfg.workers] for i in range(cfg.workers)]
        with ProcessPoolExecutor(
            max_workers=cfg.workers,
            initializer=_init_worker,
            initargs=(data, system, pipeline_cfg, sol, cfg.multiplier_law, cfg.seed),
        ) as pool:
            reps = [r for part in pool.map(_worker_run, chunks) for r in part]
        reps.sort(key=lambda r: r.index)

    failures = {r.index: r.error for r in reps if r.error is not None}
    if len(failures) > MAX_FAILURE_RATE * B:
        raise BootstrapFailure(f"{len(failures)} of {B} bootstrap replications failed (limit {MAX_FAILURE_RATE:.0%})")
    ok = [r for r in reps if r.error is None]
    p, q = data.p, system.q
    thetas = np.array([r.theta for r in ok]).reshape(-1, p)
    theta_db = np.array([r.theta_db for r in ok]).reshape(-1, p)
    alpha = 1 - cfg.level
    if len(ok):
        lo, hi = np.quantile(theta_db, [alpha / 2, 1 - alpha / 2], axis=0)
    else:
        lo = hi = np.full(p, np.nan)
    cutoffs = tuple(r.cutoff for r in ok)
    try:
        dist = cutoff_distribution(cutoffs)
    except ValueError:
        dist = None
    return BootstrapSummary(
        config=cfg,
        c_hats=np.array([r.c_hat for r in ok]),
        thetas=thetas,
        theta_db=theta_db,
        lambdas=np.array([r.lam for r in ok]),
        isps=np.array([r.isp for r in ok]).reshape(-1, q),
        cutoffs=cutoffs,
        theta_ci=(lo, hi),
        order=original.isp.order,
        failures=failures,
        distribution=dist,
    )
