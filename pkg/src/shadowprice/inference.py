"""Asymptotic variance blocks, debiasing, confidence intervals and Wald tests.

The variance blocks come from linearising the KKT system around the
constrained solution.  With ``s = a' A^{-1} a`` and the projected inverse
Hessian ``M = A^{-1} - A^{-1} a a' A^{-1} / s``::

    sqrt(n) (theta_hat - theta*)  ~  -M psi_n
    sqrt(n) (lambda_hat - lambda*) ~ -(a' A^{-1} psi_n) / s

so ``V1 = M S M``, ``V2 = M S A^{-1} a / s`` and
``V3 = a' A^{-1} S A^{-1} a / s^2`` with ``S`` the score covariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .dsl import Polynomial, RestrictionExpr, RestrictionSystem, parse_restriction
from .kkt import KktSolution
from .model import LEAST_SQUARES, Dataset, score_covariance

__all__ = [
    "SingularSystemError",
    "AsymptoticBlocks",
    "DebiasedEstimate",
    "compute_blocks",
    "sandwich",
    "debias",
    "debiased_covariance",
    "INTERVAL_VARIANCES",
    "confidence_intervals",
    "normal_quantile",
    "chi2_sf",
    "wald_test",
    "wald_pvalue",
    "WALD_REFERENCES",
    "MAX_CONDITION",
]

MAX_CONDITION = 1e12
INTERVAL_VARIANCES = ("db", "v1")


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class AsymptoticBlocks:
    A: np.ndarray
    a: np.ndarray
    M: np.ndarray
    Sigma_psi: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V3: float
    scale_n: int
    active: bool


@dataclass(frozen=True)
class DebiasedEstimate:
    theta_db: np.ndarray
    bias_correction: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    covariance: np.ndarray | None = None
    variance: str = "db"


def _factor(A: np.ndarray, what: str):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError(f"{what} is singular or ill-conditioned (cond={cond:.3g})")
    return linalg.lu_factor(A)


def sandwich(H: np.ndarray, Sigma_psi: np.ndarray) -> np.ndarray:
    """``H^{-1} S H^{-1}`` for symmetric ``H``."""
    lu = _factor(H, "loss Hessian")
    HiS = linalg.lu_solve(lu, Sigma_psi)
    V = linalg.lu_solve(lu, HiS.T)
    return 0.5 * (V + V.T)


def compute_blocks(
    sol: KktSolution,
    data: Dataset,
    system: RestrictionSystem,
    loss=LEAST_SQUARES,
) -> AsymptoticBlocks:
    theta = sol.theta
    S = score_covariance(data, theta, loss)
    H = loss.hess(data, theta)
    a = system.h_grad(theta)
    p = data.p
    if not sol.active or sol.lam == 0.0:
        lu = _factor(H, "loss Hessian")
        M = linalg.lu_solve(lu, np.eye(p))
        M = 0.5 * (M + M.T)
        return AsymptoticBlocks(
            A=H, a=a, M=M, Sigma_psi=S, V1=sandwich(H, S), V2=np.zeros(p), V3=0.0,
            scale_n=data.n, active=False,
        )
    A = H + sol.lam * system.h_hess(theta)
    A = 0.5 * (A + A.T)
    lu = _factor(A, "Lagrangian Hessian")
    Ai = linalg.lu_solve(lu, np.eye(p))
    Ai = 0.5 * (Ai + Ai.T)
    Ai_a = Ai @ a
    s = float(a @ Ai_a)
    if not s > 0:
        raise SingularSystemError(f"a'A^-1 a = {s:.3g} <= 0: second-order condition fails")
    M = Ai - np.outer(Ai_a, Ai_a) / s
    M = 0.5 * (M + M.T)
    V1 = M @ S @ M
    V1 = 0.5 * (V1 + V1.T)
    V2 = M @ S @ Ai_a / s
    V3 = float(Ai_a @ S @ Ai_a) / s**2
    return AsymptoticBlocks(A=A, a=a, M=M, Sigma_psi=S, V1=V1, V2=V2, V3=V3, scale_n=data.n, active=True)


def normal_quantile(prob):
    return special.ndtri(prob)


def chi2_sf(x, df):
    """Upper tail of the chi-square distribution."""
    return special.chdtrc(df, x)


WALD_REFERENCES = ("chi2", "f")


def wald_pvalue(stat: float, df: int, df_resid: int | None = None) -> float:
    """Tail probability of a Wald statistic.

    With ``df_resid`` the finite-sample reference ``F(df, df_resid)`` is
    applied to ``stat / df``; otherwise the asymptotic chi-square.
    """
    if df_resid is None:
        return float(chi2_sf(stat, df))
    if df_resid < 1:
        raise ValueError(f"df_resid must be positive, got {df_resid}")
    return float(special.fdtrc(df, df_resid, stat / df))


def confidence_intervals(est, blocks: AsymptoticBlocks, level: float = 0.95, covariance=None):
    """Wald intervals ``est +/- z * sqrt(diag(V)/n)``; ``V`` is ``covariance`` or ``V1``."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    est = np.asarray(est, dtype=float)
    V = blocks.V1 if covariance is None else np.asarray(covariance, dtype=float)
    diag = np.diag(V).copy()
    scale = max(float(np.max(np.abs(diag))), 1e-300)
    if np.any(diag < -1e-10 * scale):
        raise SingularSystemError("negative variance on the diagonal of the covariance")
    diag = np.clip(diag, 0.0, None)
    se = np.sqrt(diag / blocks.scale_n)
    z = normal_quantile(0.5 * (1 + level))
    return se, est - z * se, est + z * se


def debiased_covariance(
    sol_at_chat: KktSolution,
    theta_tilde,
    data: Dataset,
    system: RestrictionSystem,
    blocks: AsymptoticBlocks,
    loss=LEAST_SQUARES,
) -> np.ndarray:
    """Plug-in covariance of ``sqrt(n) (theta_db - theta0)``.

    Linearising ``theta_hat + lambda_hat * H^{-1} a_hat`` in the score gives
    ``-K psi`` with::

        K = M + H^{-1} a_hat a' A^{-1} / s + lambda * H^{-1} hess_h(theta_tilde) H^{-1}

    the three terms coming from ``theta_hat``, ``lambda_hat`` and
    ``a_hat = grad h(theta_tilde)``.  ``H`` is treated as fixed, which is
    exact conditional on the regressors for least squares.  When the
    constraint is slack this is the sandwich.
    """
    if not blocks.active or sol_at_chat.lam == 0.0:
        return blocks.V1
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    lu_H = _factor(loss.hess(data, theta_tilde), "loss Hessian")
    Hi_a_hat = linalg.lu_solve(lu_H, system.h_grad(theta_tilde))
    Ai_a = linalg.lu_solve(_factor(blocks.A, "Lagrangian Hessian"), blocks.a)
    s = float(blocks.a @ Ai_a)
    Hi_hess = linalg.lu_solve(lu_H, system.h_hess(theta_tilde))
    K = blocks.M + np.outer(Hi_a_hat, Ai_a) / s + sol_at_chat.lam * linalg.lu_solve(lu_H, Hi_hess.T).T
    V = K @ blocks.Sigma_psi @ K.T
    return 0.5 * (V + V.T)


def debias(
    sol_at_chat: KktSolution,
    theta_tilde,
    data: Dataset,
    system: RestrictionSystem,
    blocks: AsymptoticBlocks | None = None,
    level: float = 0.95,
    loss=LEAST_SQUARES,
    variance: str = "db",
) -> DebiasedEstimate:
    """Add ``lambda * H^{-1} a`` (both at the unconstrained fit) to the constrained estimate.

    Intervals use the debiased covariance (``variance="db"``) or the
    projected block ``V1`` (``"v1"``).
    """
    if variance not in INTERVAL_VARIANCES:
        raise ValueError(f"variance must be one of {INTERVAL_VARIANCES}, got {variance!r}")
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    if sol_at_chat.lam == 0.0:
        correction = np.zeros(data.p)
    else:
        H = loss.hess(data, theta_tilde)
        a_hat = system.h_grad(theta_tilde)
        correction = sol_at_chat.lam * linalg.lu_solve(_factor(H, "loss Hessian"), a_hat)
    theta_db = sol_at_chat.theta + correction
    if blocks is None:
        blocks = compute_blocks(sol_at_chat, data, system, loss)
    cov = debiased_covariance(sol_at_chat, theta_tilde, data, system, blocks, loss) if variance == "db" else blocks.V1
    se, lo, hi = confidence_intervals(theta_db, blocks, level, covariance=cov)
    return DebiasedEstimate(theta_db, correction, se, lo, hi, level, cov, variance)


def _as_polys(restrictions, p: int) -> list[Polynomial]:
    if isinstance(restrictions, RestrictionSystem):
        return list(restrictions.polys)
    if isinstance(restrictions, (str, RestrictionExpr.__args__)):
        restrictions = [restrictions]
    out = []
    for r in restrictions:
        expr = parse_restriction(r, p) if isinstance(r, str) else r
        out.append(Polynomial.from_expr(expr, p))
    return out


def wald_test(
    restrictions, theta_tilde, data: Dataset, loss=LEAST_SQUARES, reference: str = "chi2"
) -> tuple[float, float]:
    """Wald test of ``g(theta) = 0`` using the unconstrained sandwich covariance.

    ``restrictions`` is an expression, restriction text, a list of either,
    or a ``RestrictionSystem``; degrees of freedom equal the number of rows.
    ``reference="f"`` reads the p-value from ``F(q, n - p)``.
    """
    if reference not in WALD_REFERENCES:
        raise ValueError(f"reference must be one of {WALD_REFERENCES}, got {reference!r}")
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    polys = _as_polys(restrictions, data.p)
    g = np.array([poly.value(theta_tilde) for poly in polys])
    G = np.vstack([poly.gradient(theta_tilde) for poly in polys])
    V = sandwich(loss.hess(data, theta_tilde), score_covariance(data, theta_tilde, loss))
    middle = G @ V @ G.T
    cond = np.linalg.cond(middle)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError("Wald middle matrix is singular")
    stat = float(data.n * g @ np.linalg.solve(middle, g))
    df_resid = data.n - data.p if reference == "f" else None
    return stat, wald_pvalue(stat, len(polys), df_resid)
