"""Individual shadow prices and the plateau cutoff.

``ISP_j = 2 lambda sign(g_j) [Sigma^{-1} g]_j`` splits the global shadow
price across restrictions.  Sorting the magnitudes in ascending order, the
plateau cutoff is the break point ``m`` maximising the Wald statistic of
the contrast "mean of the lowest m minus mean of the rest", among the
cutoffs whose lower block passes a homogeneity screen.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsl import RestrictionSystem
from .inference import AsymptoticBlocks, chi2_sf
from .kkt import KktSolution

__all__ = [
    "SignInstabilityWarning",
    "IspReport",
    "PlateauResult",
    "compute_isp",
    "isp_jacobians",
    "isp_order",
    "unstable_signs",
    "isp_covariance",
    "conditional_isp_covariance",
    "PLATEAU_VARIANCES",
    "plateau_cutoff",
    "isp_report",
    "DEFAULT_SCREEN_LEVEL",
    "MIN_PLATEAU_SIZE",
]

DEFAULT_SCREEN_LEVEL = 0.05
MIN_PLATEAU_SIZE = 1
SIGN_THRESHOLD = 1e-8
PLATEAU_VARIANCES = ("conditional", "full")


class SignInstabilityWarning(RuntimeWarning):
    pass


def compute_isp(sol: KktSolution, system: RestrictionSystem) -> np.ndarray:
    if sol.lam == 0.0:
        return np.zeros(system.q)
    g = system.g(sol.theta)
    return 2.0 * sol.lam * np.sign(g) * system.sigma_solve(g)


def unstable_signs(g: np.ndarray) -> np.ndarray:
    """Indices whose restriction value is too close to zero for a stable sign."""
    return np.flatnonzero(np.abs(g) < SIGN_THRESHOLD * (1 + np.linalg.norm(g)))


def isp_order(sol: KktSolution, system: RestrictionSystem) -> np.ndarray:
    """Ascending ``|ISP|`` ranking; ties broken by ``|[Sigma^{-1} g]_j|``.

    When the constraint is slack every ISP is zero and the tie-break gives
    the ranking the ISPs take as soon as the multiplier turns positive.
    """
    isp = compute_isp(sol, system)
    direction = np.abs(system.sigma_solve(system.g(sol.theta)))
    return np.lexsort((np.arange(system.q), direction, np.abs(isp)))


def isp_jacobians(sol: KktSolution, system: RestrictionSystem) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the ISP vector in ``theta`` (q x p) and ``lambda`` (q,)."""
    g = system.g(sol.theta)
    S = np.sign(g)
    S[unstable_signs(g)] = 0.0
    J_theta = 2.0 * sol.lam * S[:, None] * system.sigma_solve(system.jacobian(sol.theta))
    J_lambda = 2.0 * S * system.sigma_solve(g)
    return J_theta, J_lambda


def isp_covariance(blocks: AsymptoticBlocks, sol: KktSolution, system: RestrictionSystem) -> np.ndarray:
    """Delta-method covariance of ``sqrt(n) * ISP`` at a fixed tolerance."""
    q = system.q
    if sol.lam == 0.0 or not blocks.active:
        return np.zeros((q, q))
    g = system.g(sol.theta)
    bad = unstable_signs(g)
    if bad.size:
        warnings.warn(
            f"restrictions {bad.tolist()} have |g_j| near zero; excluded from ISP covariance",
            SignInstabilityWarning,
            stacklevel=2,
        )
    J_theta, J_lambda = isp_jacobians(sol, system)
    cross = J_theta @ blocks.V2
    out = (
        J_theta @ blocks.V1 @ J_theta.T
        + np.outer(cross, J_lambda)
        + np.outer(J_lambda, cross)
        + blocks.V3 * np.outer(J_lambda, J_lambda)
    )
    return 0.5 * (out + out.T)


def conditional_isp_covariance(blocks: AsymptoticBlocks, sol: KktSolution, system: RestrictionSystem) -> np.ndarray:
    """Covariance of ``sqrt(n) * ISP`` holding the multiplier at its estimate.

    Only the ``theta`` channel ``J_theta V1 J_theta'`` remains.  The common
    factor ``lambda`` rescales every ISP alike, so it carries no information
    about where the sorted magnitudes break.
    """
    q = system.q
    if sol.lam == 0.0 or not blocks.active:
        return np.zeros((q, q))
    J_theta, _ = isp_jacobians(sol, system)
    out = J_theta @ blocks.V1 @ J_theta.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class PlateauResult:
    cutoff: int | None
    break_stats: dict[int, float]
    screen_pvalues: dict[int, float]
    admissible: list[int]
    order: np.ndarray
    diagnostic: str = ""


def plateau_cutoff(
    isp: np.ndarray,
    sigma_isp: np.ndarray,
    n: int,
    screen_level: float = DEFAULT_SCREEN_LEVEL,
    m0: int = MIN_PLATEAU_SIZE,
    order: np.ndarray | None = None,
) -> PlateauResult:
    """Structural-break cutoff on ascending ISP magnitudes.

    Returns a cutoff ``m`` meaning the ``m`` smallest restrictions form the
    plateau, or ``None`` when every contrast has zero variance.  ``order``
    overrides the ascending ranking (it must sort ``|isp|``).
    """
    isp = np.asarray(isp, dtype=float)
    q = isp.size
    if q < 2:
        raise ValueError("plateau cutoff needs at least two restrictions")
    if order is None:
        order = np.argsort(np.abs(isp), kind="stable")
    else:
        order = np.asarray(order)
        if sorted(order.tolist()) != list(range(q)) or np.any(np.diff(np.abs(isp[order])) < 0):
            raise ValueError("order must be a permutation sorting |isp| ascending")
    vals = isp[order]
    signs = np.where(vals < 0, -1.0, 1.0)
    cov = np.asarray(sigma_isp, dtype=float)[np.ix_(order, order)]
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)

    break_stats: dict[int, float] = {}
    pvalues: dict[int, float] = {}
    admissible: list[int] = []
    for m in range(m0, q):
        w = np.where(np.arange(q) < m, signs / m, -signs / (q - m))
        delta = float(w @ vals)
        var = float(w @ cov @ w)
        break_stats[m] = n * delta**2 / var if var > 1e-14 * scale else float("nan")
        if m == 1:
            pvalues[m] = 1.0
        else:
            D = np.zeros((m - 1, q))
            idx = np.arange(m - 1)
            D[idx, idx] = signs[: m - 1]
            D[idx, idx + 1] = -signs[1:m]
            diffs = D @ vals
            V = D @ cov @ D.T
            eig, vec = np.linalg.eigh(0.5 * (V + V.T))
            keep = eig > 1e-12 * max(float(eig.max()), 1e-300)
            if not keep.any():
                pvalues[m] = 0.0 if np.any(np.abs(diffs) > 0) else 1.0
            else:
                proj = vec[:, keep].T @ diffs
                stat = n * float(np.sum(proj**2 / eig[keep]))
                pvalues[m] = float(chi2_sf(stat, int(keep.sum())))
        if pvalues[m] >= screen_level:
            admissible.append(m)

    def best(cands):
        finite = [m for m in cands if np.isfinite(break_stats[m])]
        if not finite:
            return None
        top = max(break_stats[m] for m in finite)
        return min(m for m in finite if break_stats[m] == top)

    cutoff = best(admissible)
    diagnostic = ""
    if cutoff is None:
        cutoff = best(list(break_stats))
        diagnostic = "no admissible cutoff; maximised over all candidates"
    if cutoff is None:
        diagnostic = "zero contrast variance; cutoff undefined"
    return PlateauResult(cutoff, break_stats, pvalues, admissible, order, diagnostic)


@dataclass(frozen=True)
class IspReport:
    isp: np.ndarray
    sigma_isp: np.ndarray
    order: np.ndarray
    cutoff: int | None
    plateau_members: list[int]
    break_stats: dict[int, float]
    admissible: list[int]
    screen_pvalues: dict[int, float] = field(default_factory=dict)
    labels: list[str] = field(default_factory=list)
    diagnostic: str = ""

    def members_for_boundary(self, boundary: float) -> list[int]:
        """Restrictions whose 1-based ascending rank is at most ``boundary``."""
        return sorted(int(j) for rank, j in enumerate(self.order, start=1) if rank <= boundary)

    def to_dict(self) -> dict:
        return {
            "isp": self.isp.tolist(),
            "sigma_isp": self.sigma_isp.tolist(),
            "order": [int(j) for j in self.order],
            "cutoff": self.cutoff,
            "plateau_members": self.plateau_members,
            "break_stats": {str(m): _finite_or_none(v) for m, v in self.break_stats.items()},
            "screen_pvalues": {str(m): v for m, v in self.screen_pvalues.items()},
            "admissible": self.admissible,
            "labels": self.labels,
            "diagnostic": self.diagnostic,
        }

    def to_csv(self, path: str | Path, boundary: float | None = None) -> None:
        """Sorted ISP table; ``in_plateau`` uses ``boundary`` when given, else the cutoff."""
        limit = boundary if boundary is not None else (self.cutoff or 0)
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["rank", "index", "label", "isp", "abs_isp", "in_plateau"])
            for rank, j in enumerate(self.order, start=1):
                label = self.labels[j] if self.labels else str(j)
                writer.writerow([rank, int(j), label, repr(float(self.isp[j])), repr(abs(float(self.isp[j]))), int(rank <= limit)])


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def isp_report(
    sol: KktSolution,
    blocks: AsymptoticBlocks,
    system: RestrictionSystem,
    n: int,
    screen_level: float = DEFAULT_SCREEN_LEVEL,
    plateau_variance: str = "conditional",
) -> IspReport:
    """ISP values, their covariance and the plateau cutoff.

    ``plateau_variance`` picks the covariance fed to the break statistics:
    ``"conditional"`` holds lambda fixed, ``"full"`` uses ``sigma_isp``.
    """
    if plateau_variance not in PLATEAU_VARIANCES:
        raise ValueError(f"plateau_variance must be one of {PLATEAU_VARIANCES}, got {plateau_variance!r}")
    isp = compute_isp(sol, system)
    sigma = isp_covariance(blocks, sol, system)
    if system.q >= 2:
        if plateau_variance == "full":
            sigma_break = sigma
        else:
            sigma_break = conditional_isp_covariance(blocks, sol, system)
        plateau = plateau_cutoff(isp, sigma_break, n, screen_level, order=isp_order(sol, system))
        cutoff = plateau.cutoff
        members = sorted(int(j) for j in plateau.order[:cutoff]) if cutoff is not None else []
        return IspReport(
            isp, sigma, plateau.order, cutoff, members, plateau.break_stats, plateau.admissible,
            plateau.screen_pvalues, list(system.labels), plateau.diagnostic,
        )
    order = isp_order(sol, system)
    return IspReport(isp, sigma, order, None, [], {}, [], {}, list(system.labels), "single restriction")
