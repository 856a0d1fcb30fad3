"""Inner problem: minimise the loss subject to ``h(theta) <= c``.

In the binding regime the pair ``(theta, lambda)`` solves

    grad phi(theta) + lambda * grad h(theta) = 0,    h(theta) = c.

For a fixed multiplier the first block is the stationarity condition of
the convex Lagrangian ``phi + lambda h``, so the solver nests a scalar
root-find on ``m(lambda) = h(theta(lambda)) - c`` (decreasing in lambda)
around a Newton solve in ``theta``.  Least squares with affine
restrictions uses a closed form obtained by simultaneously diagonalising
the loss Hessian and ``G' Sigma^{-1} G``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dsl import RestrictionSystem
from .model import LEAST_SQUARES, Dataset, fit_unconstrained

__all__ = [
    "KktConvergenceError",
    "InfeasibleToleranceError",
    "KktSolution",
    "KktProblem",
    "solve_inner",
    "solve_path",
    "STATIONARITY_TOL",
    "MAX_OUTER_ITER",
]

STATIONARITY_TOL = 1e-10
CONSTRAINT_TOL = 1e-10
MAX_OUTER_ITER = 200
MAX_INNER_ITER = 100
_MAX_BRACKET_DOUBLINGS = 400


class KktConvergenceError(RuntimeError):
    def __init__(self, message: str, c: float, residual: float):
        self.c = c
        self.residual = residual
        super().__init__(f"{message} (c={c:.6g}, residual={residual:.3g})")


class InfeasibleToleranceError(ValueError):
    pass


@dataclass(frozen=True)
class KktSolution:
    c: float
    theta: np.ndarray
    lam: float
    active: bool
    kkt_residual: float
    h_value: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "theta": self.theta.tolist(),
            "lambda": self.lam,
            "active": self.active,
            "kkt_residual": self.kkt_residual,
            "h_value": self.h_value,
            "iterations": self.iterations,
        }


class KktProblem:
    """Data, restrictions and cached factorizations shared across tolerances."""

    def __init__(self, data: Dataset, system: RestrictionSystem, loss=LEAST_SQUARES):
        if system.p != data.p:
            raise ValueError(f"restrictions bound to p={system.p}, data has p={data.p}")
        self.data = data
        self.system = system
        self.loss = loss
        self.theta_tilde = fit_unconstrained(data) if loss is LEAST_SQUARES else self._fit_general()
        self.h_tilde = system.h(self.theta_tilde)
        self.H = loss.hess(data, self.theta_tilde)
        self._closed_form = bool(getattr(loss, "quadratic", False) and system.is_affine)
        if self._closed_form:
            self._prepare_closed_form()

    def _fit_general(self) -> np.ndarray:
        theta = np.zeros(self.data.p)
        for _ in range(MAX_INNER_ITER):
            step = np.linalg.solve(self.loss.hess(self.data, theta), self.loss.grad(self.data, theta))
            theta = theta - step
            if np.max(np.abs(step)) < 1e-14 * (1 + np.max(np.abs(theta))):
                break
        return theta

    # ------------------------------------------------------------ closed form

    def _prepare_closed_form(self) -> None:
        G, g0 = self.system.affine_form()
        SiG = self.system.sigma_solve(G)
        Q = G.T @ SiG
        Q = 0.5 * (Q + Q.T)
        qv = -SiG.T @ g0
        b = self.data.X.T @ self.data.y / self.data.n
        L = np.linalg.cholesky(self.H)
        C = linalg.solve_triangular(L, linalg.solve_triangular(L, Q, lower=True).T, lower=True)
        d, U = np.linalg.eigh(0.5 * (C + C.T))
        d = np.clip(d, 0.0, None)
        T = linalg.solve_triangular(L.T, U, lower=False)
        self._d = d
        self._T = T
        self._beta = T.T @ b
        self._gamma = T.T @ qv
        self._k0 = float(g0 @ self.system.sigma_solve(g0))
        self._Q = Q
        self._b = b
        self._qv = qv
        # h as lambda -> infinity, i.e. the smallest attainable h
        pos = d > 1e-14 * max(d.max(), 1.0)
        z_inf = np.where(pos, self._gamma / np.where(pos, d, 1.0), self._beta)
        self._h_min = float(d @ z_inf**2 - 2 * self._gamma @ z_inf + self._k0)

    def _cf_h(self, lam: float) -> tuple[float, float, np.ndarray]:
        denom = 1.0 + 2.0 * lam * self._d
        z = (self._beta + 2.0 * lam * self._gamma) / denom
        dz = 2.0 * (self._gamma - self._d * self._beta) / denom**2
        h = float(self._d @ z**2 - 2.0 * self._gamma @ z + self._k0)
        dh = float(2.0 * dz @ (self._d * z - self._gamma))
        return h, dh, z

    # ------------------------------------------------------------ general case

    def _lagrangian_argmin(self, lam: float, theta: np.ndarray) -> tuple[np.ndarray, int]:
        """Damped Newton on ``phi + lam*h`` from ``theta``."""
        data, loss, system = self.data, self.loss, self.system
        theta = theta.copy()

        def objective(t):
            return loss.value(data, t) + lam * system.h(t)

        f = objective(theta)
        for it in range(1, MAX_INNER_ITER + 1):
            grad_h = system.h_grad(theta)
            grad = loss.grad(data, theta) + lam * grad_h
            if np.max(np.abs(grad)) <= 1e-13 * (1 + np.max(np.abs(grad_h)) * max(lam, 1.0)):
                return theta, it
            hess = loss.hess(data, theta) + lam * system.h_hess(theta)
            shift = 0.0
            while True:
                try:
                    cf = linalg.cho_factor(hess + shift * np.eye(len(theta)))
                    break
                except linalg.LinAlgError:
                    shift = max(2 * shift, 1e-8 * (1 + np.abs(hess).max()))
            step = -linalg.cho_solve(cf, grad)
            if shift == 0.0 and -(grad @ step) <= 1e-10 * (1 + abs(f)):
                # inside the quadratic zone the predicted decrease is below the
                # rounding noise of f, so a line search cannot judge the step
                theta = theta + step
                f = objective(theta)
                continue
            t = 1.0
            while True:
                cand = theta + t * step
                f_new = objective(cand)
                if f_new <= f + 1e-4 * t * (grad @ step) or t < 1e-12:
                    break
                t *= 0.5
            if t < 1e-12 and f_new > f:
                # already at the attainable accuracy for this objective scale
                return theta, it
            theta, f = cand, f_new
        return theta, MAX_INNER_ITER

    def _general_h(self, lam: float, theta_start: np.ndarray):
        theta, it = self._lagrangian_argmin(lam, theta_start)
        system = self.system
        a = system.h_grad(theta)
        A = self.loss.hess(self.data, theta) + lam * system.h_hess(theta)
        try:
            dh = -float(a @ np.linalg.solve(A, a))
        except np.linalg.LinAlgError:
            dh = float("nan")
        return system.h(theta), dh, theta, it

    # ------------------------------------------------------------ public

    def theta_at(self, lam: float, theta_start: np.ndarray | None = None) -> np.ndarray:
        """Minimiser of the Lagrangian at a fixed multiplier."""
        if self._closed_form:
            return self._T @ self._cf_h(lam)[2]
        start = self.theta_tilde if theta_start is None else theta_start
        return self._lagrangian_argmin(lam, start)[0]

    def stationarity(self, theta: np.ndarray, lam: float) -> tuple[float, float]:
        grad_h = self.system.h_grad(theta)
        res = self.loss.grad(self.data, theta) + lam * grad_h
        return float(np.max(np.abs(res))), float(np.max(np.abs(grad_h)))

    def solve(self, c: float, warm_start: KktSolution | None = None) -> KktSolution:
        c = float(c)
        if not (c > 0 and math.isfinite(c)):
            raise InfeasibleToleranceError(f"tolerance must be positive and finite, got {c!r}")
        if self.h_tilde <= c:
            res, _ = self.stationarity(self.theta_tilde, 0.0)
            return KktSolution(c, self.theta_tilde.copy(), 0.0, False, res, self.h_tilde, 0)
        if self._closed_form and self._h_min >= c:
            raise InfeasibleToleranceError(f"no theta satisfies h(theta) <= {c:.6g}; min h = {self._h_min:.6g}")

        theta_cur = self.theta_tilde if warm_start is None else warm_start.theta

        def evaluate(lam: float):
            nonlocal theta_cur
            if self._closed_form:
                h, dh, _ = self._cf_h(lam)
                return h - c, dh, 1
            h, dh, theta_cur, it = self._general_h(lam, theta_cur)
            return h - c, dh, it

        iterations = 0
        # bracket [lo, hi] with m(lo) > 0 >= m(hi); m(0) = h_tilde - c > 0
        lo, hi = 0.0, math.inf
        lam = warm_start.lam if warm_start is not None and warm_start.lam > 0 else 1.0
        m, dm, it = evaluate(lam)
        iterations += it
        doublings = 0
        while m > 0 and hi == math.inf:
            lo = lam
            if doublings == _MAX_BRACKET_DOUBLINGS:
                raise InfeasibleToleranceError(f"could not bracket the multiplier for c={c:.6g}; c may be infeasible")
            lam *= 2.0
            doublings += 1
            m, dm, it = evaluate(lam)
            iterations += it
            if m <= 0:
                hi = lam
        if hi == math.inf:
            hi = lam

        tol_m = CONSTRAINT_TOL * (1 + c) * 1e-3
        converged = False
        for _ in range(MAX_OUTER_ITER):
            if abs(m) <= tol_m:
                converged = True
                break
            if m > 0:
                lo = max(lo, lam)
            else:
                hi = min(hi, lam)
            step_ok = math.isfinite(dm) and dm < 0
            new = lam - m / dm if step_ok else None
            if new is None or not (lo < new < hi):
                new = 0.5 * (lo + hi)
            if abs(new - lam) <= 1e-16 * max(1.0, lam) or hi - lo <= 1e-16 * max(1.0, hi):
                lam = new
                m, dm, it = evaluate(lam)
                iterations += it
                converged = abs(m) <= CONSTRAINT_TOL * (1 + c)
                break
            lam = new
            m, dm, it = evaluate(lam)
            iterations += it
        # the tight target can sit below inner-solve noise for nonlinear h
        if not converged and abs(m) <= CONSTRAINT_TOL * (1 + c):
            converged = True
        if not converged:
            raise KktConvergenceError("multiplier search did not converge", c, abs(m))

        theta = self._T @ self._cf_h(lam)[2] if self._closed_form else theta_cur
        h_val = self.system.h(theta)
        stat, grad_h_norm = self.stationarity(theta, lam)
        if stat > 1e-8 * (1 + grad_h_norm) or abs(h_val - c) > 1e-8 * (1 + c):
            raise KktConvergenceError("KKT residuals above tolerance", c, max(stat, abs(h_val - c)))
        return KktSolution(c, theta, float(lam), True, max(stat, abs(h_val - c)), h_val, iterations)

    @property
    def closed_form(self) -> bool:
        return self._closed_form

    def spectral_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """``(d, T)`` with ``T' H T = I`` and ``T' Q T = diag(d)``; closed form only."""
        if not self._closed_form:
            raise AttributeError("spectral factors exist only for quadratic loss with affine restrictions")
        return self._d, self._T

    def affine_h_grad(self, thetas: np.ndarray) -> np.ndarray:
        """Rows of ``grad h`` at each row of ``thetas``; closed form only."""
        return 2.0 * (np.asarray(thetas) @ self._Q - self._qv)

    def _cf_path(self, grid: np.ndarray) -> list[KktSolution]:
        """All binding tolerances at once by monotone Newton from ``lambda = 0``.

        ``h(lambda)`` is convex and decreasing here, so Newton iterates
        started left of the root increase to it without overshooting.
        """
        binding = grid < self.h_tilde
        if np.any(grid[binding] <= self._h_min):
            bad = float(grid[binding][grid[binding] <= self._h_min][0])
            raise InfeasibleToleranceError(f"no theta satisfies h(theta) <= {bad:.6g}; min h = {self._h_min:.6g}")
        c = grid[binding]
        d, beta, gamma = self._d, self._beta, self._gamma
        lam = np.zeros(c.size)
        todo = np.ones(c.size, dtype=bool)
        iterations = np.zeros(c.size, dtype=int)
        for _ in range(MAX_OUTER_ITER):
            if not todo.any():
                break
            lt = lam[todo][:, None]
            denom = 1.0 + 2.0 * lt * d
            z = (beta + 2.0 * lt * gamma) / denom
            dz = 2.0 * (gamma - d * beta) / denom**2
            m = np.sum(d * z**2 - 2.0 * gamma * z, axis=1) + self._k0 - c[todo]
            dm = 2.0 * np.sum(dz * (d * z - gamma), axis=1)
            iterations[todo] += 1
            step = np.where(dm < 0, -m / np.where(dm < 0, dm, -1.0), 0.0)
            new = lam[todo] + np.maximum(step, 0.0)
            done = (np.abs(m) <= CONSTRAINT_TOL * (1 + c[todo]) * 1e-3) | (new - lam[todo] <= 1e-15 * np.maximum(1.0, new))
            lam[todo] = new
            idx = np.flatnonzero(todo)
            todo[idx[done]] = False
        # residual checks for every binding point in one pass
        thetas = (self._T @ ((beta + 2.0 * lam[:, None] * gamma) / (1.0 + 2.0 * lam[:, None] * d)).T).T
        grad_phi = thetas @ self.H - self._b
        grad_h = self.affine_h_grad(thetas)
        stat = np.max(np.abs(grad_phi + lam[:, None] * grad_h), axis=1)
        gnorm = np.max(np.abs(grad_h), axis=1)
        h_vals = np.einsum("ki,ij,kj->k", thetas, self._Q, thetas) - 2.0 * thetas @ self._qv + self._k0
        ok = (stat <= 1e-8 * (1 + gnorm)) & (np.abs(h_vals - c) <= 1e-8 * (1 + c))

        out: list[KktSolution] = []
        res0 = None
        k = 0
        for ci, bind in zip(grid, binding):
            if not bind:
                if res0 is None:
                    res0, _ = self.stationarity(self.theta_tilde, 0.0)
                out.append(KktSolution(float(ci), self.theta_tilde.copy(), 0.0, False, res0, self.h_tilde, 0))
                continue
            if ok[k]:
                resid = max(float(stat[k]), abs(float(h_vals[k]) - float(ci)))
                out.append(KktSolution(float(ci), thetas[k], float(lam[k]), True, resid, float(h_vals[k]), int(iterations[k])))
            else:
                # fall back to the safeguarded scalar search for this point
                out.append(self.solve(float(ci)))
            k += 1
        return out

    def path(self, c_grid) -> list[KktSolution]:
        grid = np.asarray(c_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("c_grid must be a non-empty vector")
        if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("c_grid must be strictly ascending and positive")
        if self._closed_form:
            return self._cf_path(grid)
        out: list[KktSolution] = []
        warm = None
        for c in grid:
            sol = self.solve(c, warm)
            out.append(sol)
            warm = sol if sol.active else None
        return out


def solve_inner(
    data: Dataset,
    system: RestrictionSystem,
    c: float,
    warm_start: KktSolution | None = None,
    loss=LEAST_SQUARES,
) -> KktSolution:
    return KktProblem(data, system, loss).solve(c, warm_start)


def solve_path(data: Dataset, system: RestrictionSystem, c_grid, loss=LEAST_SQUARES) -> list[KktSolution]:
    return KktProblem(data, system, loss).path(c_grid)
