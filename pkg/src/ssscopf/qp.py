"""Dense convex quadratic programming by a primal-dual interior-point method.

Solves   min 0.5 u'Pu + q'u   s.t.  G u <= w
with P symmetric positive semidefinite.  The search-direction subproblems
here always carry slack variables that make them strictly feasible, and a
strictly feasible starting point can be supplied, so a Mehrotra
predictor-corrector with the reduced normal equations is reliable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = ["QpSolverError", "QpResult", "solve_qp", "solve_qp_enumeration"]


class QpSolverError(Exception):
    def __init__(self, message: str, residual: float = np.nan):
        super().__init__(message)
        self.residual = residual


@dataclass
class QpResult:
    x: np.ndarray
    lam: np.ndarray          # multipliers of G u <= w, nonnegative
    slack: np.ndarray        # w - G u
    kkt_residual: float
    iterations: int


def _kkt_residual(p_mat, q, g_mat, w, x, lam, slack) -> float:
    """Scaled max of stationarity, primal feasibility and complementarity."""
    stat = np.abs(p_mat @ x + q + g_mat.T @ lam).max() / (1.0 + np.abs(q).max())
    wscale = 1.0 + (np.abs(w).max() if w.size else 0.0)
    prim = max(np.max(g_mat @ x - w, initial=0.0), 0.0) / wscale
    dual = max(-lam.min(), 0.0) if lam.size else 0.0
    comp = float(slack @ lam) / max(1, len(w)) / (1.0 + np.abs(q).max())
    return max(stat, prim, dual, comp)


def _ruiz_equilibrate(p_mat, q, g_mat, w, iters: int = 3):
    """Row/column equilibration of the constraint matrix (Ruiz scaling).

    Returns scaled copies plus the diagonal scalings (d_row, d_col) with
    G_s = Dr G Dc, w_s = Dr w, P_s = Dc P Dc, q_s = Dc q.
    """
    m, n = g_mat.shape
    d_row = np.ones(m)
    d_col = np.ones(n)
    gs = g_mat.copy()
    for _ in range(iters):
        rn = np.sqrt(np.maximum(np.abs(gs).max(axis=1), 1e-12))
        gs /= rn[:, None]
        d_row /= rn
        cn = np.sqrt(np.maximum(np.abs(gs).max(axis=0), 1e-12))
        cn = np.maximum(cn, 1e-6)
        gs /= cn[None, :]
        d_col /= cn
    ps = (d_col[:, None] * p_mat) * d_col[None, :]
    qs = d_col * q
    ws = d_row * w
    return ps, qs, gs, ws, d_row, d_col


def solve_qp(p_mat: np.ndarray, q: np.ndarray, g_mat: np.ndarray,
             w: np.ndarray, *, x0: np.ndarray | None = None,
             tol: float = 1e-8, max_iter: int = 100) -> QpResult:
    """Mehrotra predictor-corrector for the inequality-constrained QP.

    The problem is Ruiz-equilibrated internally; the reported KKT residual
    is the scaled-space relative residual (stationarity, primal
    feasibility, dual nonnegativity, complementarity).  ``x0``, when
    given, must satisfy G x0 < w strictly; it seeds the interior iterates.
    Raises :class:`QpSolverError` with the best residual if the iteration
    cap is exceeded.
    """
    n = len(q)
    m = len(w)
    if m == 0:
        x = np.linalg.solve(p_mat, -q)
        return QpResult(x, np.zeros(0), np.zeros(0), 0.0, 0)

    p_orig, g_orig, w_orig = p_mat, g_mat, w
    p_mat, q, g_mat, w, d_row, d_col = _ruiz_equilibrate(p_mat, q, g_mat, w)

    if x0 is None:
        x = np.zeros(n)
    else:
        x = x0.astype(float) / d_col
    s = w - g_mat @ x
    if np.any(s <= 0):
        # fall back to a shifted interior start
        s = np.maximum(s, 1.0)
    lam = np.ones(m)

    def unscaled(xv, lv):
        return xv * d_col, lv * d_row

    best = None
    for it in range(1, max_iter + 1):
        res = _kkt_residual(p_mat, q, g_mat, w, x, lam, s)
        if best is None or res < best[0]:
            best = (res, x.copy(), lam.copy(), s.copy(), it - 1)
        if res <= tol:
            xo, lo = unscaled(x, lam)
            return QpResult(xo, lo, w_orig - g_orig @ xo, res, it - 1)

        r_dual = p_mat @ x + q + g_mat.T @ lam
        r_prim = g_mat @ x + s - w
        mu = (s @ lam) / m

        # augmented (quasidefinite) KKT system with static regularization
        # and one round of iterative refinement per solve
        reg = 1e-11
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = p_mat + reg * np.eye(n)
        kkt[:n, n:] = g_mat.T
        kkt[n:, :n] = g_mat
        kkt[n:, n:] = -np.diag(s / lam + reg)
        try:
            lu_piv = sla.lu_factor(kkt, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as err:
            raise QpSolverError(f"KKT factorization failed: {err}", res) from err

        kkt_exact = kkt.copy()
        kkt_exact[:n, :n] -= reg * np.eye(n)
        kkt_exact[n:, n:] += reg * np.eye(m)

        def newton_step(r_comp):
            rhs = np.concatenate([-r_dual, -r_prim + r_comp / lam])
            sol = sla.lu_solve(lu_piv, rhs, check_finite=False)
            sol += sla.lu_solve(lu_piv, rhs - kkt_exact @ sol, check_finite=False)
            dx, dlam = sol[:n], sol[n:]
            ds = -r_prim - g_mat @ dx
            return dx, ds, dlam

        # affine predictor
        dx_a, ds_a, dlam_a = newton_step(s * lam)
        alpha_p = _max_step(s, ds_a)
        alpha_d = _max_step(lam, dlam_a)
        mu_aff = ((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # centering + corrector
        dx, ds, dlam = newton_step(s * lam + ds_a * dlam_a - sigma * mu)
        frac = 0.995 if mu > 1e-10 else 0.9999
        alpha_p = frac * _max_step(s, ds)
        alpha_d = frac * _max_step(lam, dlam)
        x = x + alpha_p * dx
        s = s + alpha_p * ds
        lam = lam + alpha_d * dlam

    res = best[0]
    raise QpSolverError(
        f"interior-point iteration cap {max_iter} reached (kkt residual {res:.3e})",
        res)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve_qp_enumeration(p_mat: np.ndarray, q: np.ndarray, g_mat: np.ndarray,
                         w: np.ndarray) -> np.ndarray:
    """Brute-force oracle: enumerate active sets, solve the KKT equalities,
    keep candidates that are primal feasible with nonnegative multipliers,
    and return the best.  P must be positive definite.  Exponential in the
    number of rows; for small test problems only.
    """
    from itertools import combinations

    n = len(q)
    m = len(w)
    if m > 18:
        raise ValueError("enumeration oracle limited to 18 rows")
    best_x, best_val = None, np.inf
    for k in range(0, min(n, m) + 1):
        for active in combinations(range(m), k):
            ga = g_mat[list(active), :]
            kkt = np.block([[p_mat, ga.T], [ga, np.zeros((k, k))]])
            rhs = np.concatenate([-q, w[list(active)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam_a = sol[:n], sol[n:]
            if np.any(g_mat @ x - w > 1e-9):
                continue
            if np.any(lam_a < -1e-9):
                continue
            val = 0.5 * x @ p_mat @ x + q @ x
            if val < best_val - 1e-12:
                best_val, best_x = val, x
    if best_x is None:
        raise ValueError("enumeration found no KKT point (infeasible problem?)")
    return best_x
