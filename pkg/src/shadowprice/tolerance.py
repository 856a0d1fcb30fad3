"""Outer problem: pick the tolerance minimising a Stein-type risk proxy.

For each candidate ``c`` the risk proxy is

    bias(c) = lambda(c)^2 * ||H^{-1} a||^2          (H, a at the unconstrained fit)
    var(c)  = tr(V1(c)) / n

with ``V1`` the projected sandwich when the constraint binds and the
ordinary sandwich when it is slack.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .dsl import RestrictionSystem
from .inference import SingularSystemError, compute_blocks, sandwich
from .kkt import KktProblem, KktSolution
from .model import LEAST_SQUARES, Dataset, score_covariance

__all__ = [
    "RiskCurve",
    "make_grid",
    "risk_proxy",
    "select_tolerance",
    "DEFAULT_GRID_SIZE",
    "GRID_LOWER_RATIO",
    "SEARCH_MODES",
]

DEFAULT_GRID_SIZE = 50
GRID_LOWER_RATIO = 1e-3
SEARCH_MODES = ("active", "full")


@dataclass(frozen=True)
class RiskCurve:
    grid: np.ndarray
    bias_proxy: np.ndarray
    var_proxy: np.ndarray
    total: np.ndarray
    active: np.ndarray
    c_hat: float
    index: int
    c0: float

    def rows(self):
        for c, b, v, t, a in zip(self.grid, self.bias_proxy, self.var_proxy, self.total, self.active):
            yield float(c), float(b), float(v), float(t), bool(a)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["c", "bias", "var", "total", "active", "selected"])
            for i, (c, b, v, t, a) in enumerate(self.rows()):
                writer.writerow([repr(c), repr(b), repr(v), repr(t), int(a), int(i == self.index)])


def make_grid(c0: float, grid_size: int = DEFAULT_GRID_SIZE, h_tilde: float | None = None) -> np.ndarray:
    """Geometric grid on ``(c0 * 1e-3, c0]``, plus ``h_tilde`` when it falls inside."""
    if not c0 > 0:
        raise ValueError(f"c0 must be positive, got {c0}")
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    grid = np.geomspace(c0 * GRID_LOWER_RATIO, c0, grid_size + 1)[1:]
    grid[-1] = c0
    if h_tilde is not None and c0 * GRID_LOWER_RATIO < h_tilde < c0 and h_tilde not in grid:
        grid = np.sort(np.append(grid, h_tilde))
    return grid


class _RiskEvaluator:
    """Pieces of the risk proxy that stay fixed along the tolerance path."""

    def __init__(self, problem: KktProblem):
        self.problem = problem
        data, loss = problem.data, problem.loss
        theta_tilde = problem.theta_tilde
        H = loss.hess(data, theta_tilde)
        a_hat = problem.system.h_grad(theta_tilde)
        Hi_a = linalg.solve(H, a_hat, assume_a="sym")
        self.bias_factor = float(Hi_a @ Hi_a)
        self.sandwich_trace = float(np.trace(sandwich(H, score_covariance(data, theta_tilde, loss))))

    def batch(self, sols: list[KktSolution]) -> np.ndarray:
        """``(K, 2)`` array of ``(bias, var)`` over a path of solutions."""
        problem = self.problem
        if not (problem.closed_form and problem.loss is LEAST_SQUARES):
            return np.array([self(s) for s in sols])
        n = problem.data.n
        out = np.empty((len(sols), 2))
        act = [k for k, s in enumerate(sols) if s.active]
        for k, s in enumerate(sols):
            if not s.active:
                out[k] = 0.0, self.sandwich_trace / n
        if act:
            lam = np.array([sols[k].lam for k in act])
            theta = np.array([sols[k].theta for k in act])
            out[act, 0] = lam**2 * self.bias_factor
            out[act, 1] = _affine_ls_traces(problem, lam, theta) / n
        return out

    def __call__(self, sol: KktSolution) -> tuple[float, float]:
        n = self.problem.data.n
        if not sol.active:
            return 0.0, self.sandwich_trace / n
        blocks = compute_blocks(sol, self.problem.data, self.problem.system, self.problem.loss)
        return sol.lam**2 * self.bias_factor, float(np.trace(blocks.V1)) / n


def _affine_ls_traces(problem: KktProblem, lam: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``tr(V1)`` at each ``(lambda_k, theta_k)`` for least squares with affine restrictions.

    Uses ``A^{-1} = T diag(1 / (1 + 2 lambda d)) T'`` from the shared
    simultaneous diagonalisation, so nothing is refactored per point.
    """
    d, T = problem.spectral_factors()
    data = problem.data
    X, n, p = data.X, data.n, data.p
    Ai = (T[None, :, :] / (1.0 + 2.0 * lam[:, None, None] * d[None, None, :])) @ T.T
    a = problem.affine_h_grad(theta)
    Ai_a = np.einsum("kij,kj->ki", Ai, a)
    s = np.einsum("ki,ki->k", a, Ai_a)
    if np.any(s <= 0):
        raise SingularSystemError("a'A^-1 a <= 0 on the tolerance path")
    M = Ai - Ai_a[:, :, None] * Ai_a[:, None, :] / s[:, None, None]
    resid = data.y[None, :] - theta @ X.T
    # score covariance per point as one product with the column outer products
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)
    S = ((resid**2) @ outer / n).reshape(-1, p, p)
    mean = resid @ X / n
    S -= mean[:, :, None] * mean[:, None, :]
    MS = M @ S
    return np.einsum("kij,kji->k", MS, M)


def risk_proxy(
    sol: KktSolution,
    theta_tilde,
    data: Dataset,
    system: RestrictionSystem,
    loss=LEAST_SQUARES,
) -> tuple[float, float]:
    """Return ``(bias, variance)`` proxies at one inner solution."""
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    H = loss.hess(data, theta_tilde)
    if np.linalg.cond(H) > 1e12:
        raise SingularSystemError("loss Hessian at the unconstrained fit is singular")
    if not sol.active:
        return 0.0, float(np.trace(sandwich(H, score_covariance(data, theta_tilde, loss)))) / data.n
    Hi_a = linalg.solve(H, system.h_grad(theta_tilde), assume_a="sym")
    blocks = compute_blocks(sol, data, system, loss)
    return sol.lam**2 * float(Hi_a @ Hi_a), float(np.trace(blocks.V1)) / data.n


def select_tolerance(
    data: Dataset,
    system: RestrictionSystem,
    c0: float,
    grid_size: int = DEFAULT_GRID_SIZE,
    problem: KktProblem | None = None,
    loss=LEAST_SQUARES,
    search: str = "active",
) -> tuple[RiskCurve, KktSolution]:
    """Grid search for the risk-minimising tolerance; ties go to the larger ``c``.

    ``search="active"`` minimises over the grid points where the constraint
    binds and falls back to the whole grid when none does; ``"full"``
    always searches the whole grid.
    """
    if search not in SEARCH_MODES:
        raise ValueError(f"search must be one of {SEARCH_MODES}, got {search!r}")
    if problem is None:
        problem = KktProblem(data, system, loss)
    grid = make_grid(c0, grid_size, problem.h_tilde)
    sols = problem.path(grid)
    evaluate = _RiskEvaluator(problem)
    parts = evaluate.batch(sols)
    bias, var = parts[:, 0], parts[:, 1]
    total = bias + var
    active = np.array([s.active for s in sols])
    cand = np.flatnonzero(active) if search == "active" and active.any() else np.arange(grid.size)
    best = total[cand].min()
    idx = int(cand[total[cand] == best][-1])
    curve = RiskCurve(
        grid=grid,
        bias_proxy=bias,
        var_proxy=var,
        total=total,
        active=active,
        c_hat=float(grid[idx]),
        index=idx,
        c0=float(c0),
    )
    return curve, sols[idx]
