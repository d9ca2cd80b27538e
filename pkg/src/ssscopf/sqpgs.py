"""Sequential quadratic programming with gradient sampling.

Problem-agnostic solver for nonsmooth constrained programs: the gradient
of every function with a positive sample size is evaluated at the iterate
and at points drawn uniformly from a shrinking ball around it, a convex QP
over those linearizations yields the search direction, a penalty merit
function drives the backtracking line search, and the penalty / sampling
radius / violation tolerance follow a fixed reduction schedule on null
steps.  With all sample sizes zero this reduces to a classic penalty SQP.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .qp import QpSolverError, solve_qp

__all__ = [
    "SolverParams",
    "IterationRecord",
    "QpSolution",
    "SolveResult",
    "LineSearchUnderflow",
    "sample_points",
    "infeasibility",
    "model_reduction",
    "DampedLbfgs",
    "solve",
]


@dataclass
class SolverParams:
    """Algorithm constants; defaults follow the published tuning."""

    rho0: float = 0.1          # initial penalty on the objective
    mu_rho: float = 0.5        # penalty reduction factor
    eps0: float = 0.1          # initial sampling radius
    mu_eps: float = 0.5        # radius reduction factor
    tau0: float = 0.1          # constraint-violation tolerance
    mu_tau: float = 0.8        # its reduction factor
    varpi: float = 1.0         # line-search sufficient-decrease constant
    gamma: float = 0.8         # backtracking factor
    nu_in: float = 1e-3        # infeasibility tolerance
    nu_s: float = 1e-2         # stationarity tolerance
    p: int = 30                # default sample size (consumed by model builders)
    k_max: int = 100           # iteration cap
    lbfgs_memory: int = 10
    seed: int = 0
    qp_tol: float = 1e-8
    h_min: float = 1e-8        # floor on the Hessian approximation
    beta_min: float = 1e-12    # line-search underflow
    threads: int = 1

    def __post_init__(self):
        for name in ("mu_rho", "mu_eps", "mu_tau", "gamma"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
        for name in ("rho0", "eps0", "tau0", "nu_in", "nu_s", "qp_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.varpi <= 1.0:
            raise ValueError("varpi must lie in (0, 1]")


@dataclass
class IterationRecord:
    """Per-iteration diagnostics; eps/rho/tau are the values in effect
    while the iteration ran (before any null-step reduction)."""

    k: int
    f: float
    sigma_max: float
    delta_q: float
    beta: float
    eps: float
    rho: float
    tau: float
    eta: Optional[float] = None
    modes: Optional[list] = None
    profile: Optional[dict] = None

    def to_json_dict(self) -> dict:
        out = {"k": self.k, "f": self.f, "sigma_max": self.sigma_max,
               "delta_q": self.delta_q, "beta": self.beta, "eps": self.eps,
               "rho": self.rho, "tau": self.tau, "eta": self.eta}
        if self.modes is not None:
            out["modes"] = self.modes
        if self.profile is not None:
            out["profile"] = self.profile
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


@dataclass
class QpSolution:
    d: np.ndarray
    z: float
    e: np.ndarray
    r_upper: np.ndarray       # dense over inequality rows (0 where no bound)
    r_lower: np.ndarray
    mult_obj: np.ndarray      # one per objective sample row
    mult_eq: np.ndarray       # signed aggregate per equality
    mult_ineq: np.ndarray     # signed aggregate per inequality
    kkt_residual: float


class LineSearchUnderflow(Exception):
    pass


@dataclass
class SolveResult:
    x: np.ndarray
    f: float
    status: str               # converged | iteration-limit | qp-failure | line-search-failure
    trace: list
    sigma_max: float
    iterations: int
    diagnostics: list = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def substream(seed: int, k: int, fid: int) -> np.random.Generator:
    """Independent, reproducible stream per (iteration, function)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, k, fid)))


def sample_points(x: np.ndarray, eps: float, p: int,
                  rng: np.random.Generator) -> np.ndarray:
    """The iterate plus p i.i.d. points uniform in the eps-ball around it.

    Uniformity comes from a normalized Gaussian direction with radius
    eps * U^(1/n); the first row is always x itself.
    """
    n = len(x)
    pts = np.empty((p + 1, n))
    pts[0] = x
    for s in range(1, p + 1):
        direction = rng.standard_normal(n)
        nrm = np.linalg.norm(direction)
        if nrm < 1e-300:
            direction = np.zeros(n)
            direction[0] = 1.0
            nrm = 1.0
        radius = eps * rng.uniform() ** (1.0 / n)
        pts[s] = x + (radius / nrm) * direction
    return pts


# ---------------------------------------------------------------------------
# infeasibility and model reduction
# ---------------------------------------------------------------------------

def sigma_vector(h: np.ndarray, g: np.ndarray, g_lower: np.ndarray,
                 g_upper: np.ndarray) -> np.ndarray:
    """(|h|, upper-bound violations, lower-bound violations)."""
    up = np.zeros_like(g)
    finite = np.isfinite(g_upper)
    up[finite] = np.maximum(g[finite] - g_upper[finite], 0.0)
    lo = np.zeros_like(g)
    finite = np.isfinite(g_lower)
    lo[finite] = np.maximum(g_lower[finite] - g[finite], 0.0)
    return np.concatenate([np.abs(h), up, lo])


def infeasibility(problem, x: np.ndarray) -> np.ndarray:
    h = problem.eq_values(x)
    g = problem.ineq_values(x)
    return sigma_vector(h, g, problem.g_lower, problem.g_upper)


@dataclass
class _Samples:
    """Anchored values and sampled gradients for one iteration."""

    f0: float
    obj_grads: np.ndarray          # (p_f + 1, n)
    h0: np.ndarray
    eq_grads: list                 # per equality: (p_i + 1, n)
    g0: np.ndarray
    ineq_grads: list               # per inequality: (p_j + 1, n)


def model_reduction(rho: float, samples: _Samples, h_mat: np.ndarray,
                    g_lower: np.ndarray, g_upper: np.ndarray,
                    d: np.ndarray) -> float:
    """Merit value at the iterate minus the sampled linearized model at d
    (including the quadratic term).  Zero at d = 0 by construction."""
    sig = sigma_vector(samples.h0, samples.g0, g_lower, g_upper)
    merit = rho * samples.f0 + sig.sum()
    model = rho * np.max(samples.f0 + samples.obj_grads @ d)
    model += 0.5 * d @ h_mat @ d
    for i, grads in enumerate(samples.eq_grads):
        model += np.max(np.abs(samples.h0[i] + grads @ d))
    for j, grads in enumerate(samples.ineq_grads):
        lin = samples.g0[j] + grads @ d
        if np.isfinite(g_upper[j]):
            model += max(np.max(lin) - g_upper[j], 0.0)
        if np.isfinite(g_lower[j]):
            model += max(g_lower[j] - np.min(lin), 0.0)
    return merit - model


# ---------------------------------------------------------------------------
# QP subproblem
# ---------------------------------------------------------------------------

@dataclass
class _QpLayout:
    n: int
    m_h: int
    m_g: int
    up_rows: np.ndarray
    lo_rows: np.ndarray
    nvar: int
    z_col: int
    e_cols: slice
    rup_cols: dict
    rlo_cols: dict


def build_subproblem(samples: _Samples, h_mat: np.ndarray, rho: float,
                     g_lower: np.ndarray, g_upper: np.ndarray):
    """Assemble the QP over (d, z, e, r_upper, r_lower).

    One row per sampled gradient per function; values are anchored at the
    iterate.  Equalities contribute an absolute-value pair of rows so the
    slack e_i majorizes |h_i + grad.d| over the sample set.  Rows for
    infinite bounds are omitted (their slacks would be structurally zero).
    Returns (P, q, G, w, layout, meta) with meta labelling every row.
    """
    n = len(samples.obj_grads[0])
    m_h = len(samples.h0)
    m_g = len(samples.g0)
    up_rows = np.where(np.isfinite(g_upper))[0]
    lo_rows = np.where(np.isfinite(g_lower))[0]

    z_col = n
    e_cols = slice(n + 1, n + 1 + m_h)
    rup_cols = {}
    col = n + 1 + m_h
    for j in up_rows:
        rup_cols[int(j)] = col
        col += 1
    rlo_cols = {}
    for j in lo_rows:
        rlo_cols[int(j)] = col
        col += 1
    nvar = col
    lay = _QpLayout(n=n, m_h=m_h, m_g=m_g, up_rows=up_rows, lo_rows=lo_rows,
                    nvar=nvar, z_col=z_col, e_cols=e_cols,
                    rup_cols=rup_cols, rlo_cols=rlo_cols)

    rows, rhs, meta = [], [], []

    def add_row(grad_part, extra_col, extra_val, bound, tag):
        row = np.zeros(nvar)
        row[:n] = grad_part
        row[extra_col] = extra_val
        rows.append(row)
        rhs.append(bound)
        meta.append(tag)

    for s, gf in enumerate(samples.obj_grads):
        add_row(gf, z_col, -1.0, -samples.f0, ("obj", 0, s))
    for i in range(m_h):
        for s, gh in enumerate(samples.eq_grads[i]):
            add_row(gh, e_cols.start + i, -1.0, -samples.h0[i], ("eq+", i, s))
            add_row(-gh, e_cols.start + i, -1.0, samples.h0[i], ("eq-", i, s))
    for j in up_rows:
        for s, gg in enumerate(samples.ineq_grads[j]):
            add_row(gg, rup_cols[int(j)], -1.0,
                    g_upper[j] - samples.g0[j], ("ineq+", int(j), s))
    for j in lo_rows:
        for s, gg in enumerate(samples.ineq_grads[j]):
            add_row(-gg, rlo_cols[int(j)], -1.0,
                    samples.g0[j] - g_lower[j], ("ineq-", int(j), s))
    # nonnegativity of the slacks
    for i in range(m_h):
        add_row(np.zeros(n), e_cols.start + i, -1.0, 0.0, ("e>=0", i, 0))
    for j in up_rows:
        add_row(np.zeros(n), rup_cols[int(j)], -1.0, 0.0, ("r+>=0", int(j), 0))
    for j in lo_rows:
        add_row(np.zeros(n), rlo_cols[int(j)], -1.0, 0.0, ("r->=0", int(j), 0))

    g_qp = np.array(rows)
    w_qp = np.array(rhs)
    p_qp = np.zeros((nvar, nvar))
    p_qp[:n, :n] = h_mat
    q_qp = np.zeros(nvar)
    q_qp[z_col] = rho
    q_qp[e_cols] = 1.0
    for c in rup_cols.values():
        q_qp[c] = 1.0
    for c in rlo_cols.values():
        q_qp[c] = 1.0
    return p_qp, q_qp, g_qp, w_qp, lay, meta


def _feasible_start(samples: _Samples, lay: _QpLayout, g_lower, g_upper):
    u0 = np.zeros(lay.nvar)
    u0[lay.z_col] = samples.f0 + 1.0
    u0[lay.e_cols] = np.abs(samples.h0) + 1.0
    for j, c in lay.rup_cols.items():
        u0[c] = max(samples.g0[j] - g_upper[j], 0.0) + 1.0
    for j, c in lay.rlo_cols.items():
        u0[c] = max(g_lower[j] - samples.g0[j], 0.0) + 1.0
    return u0


def solve_subproblem(samples: _Samples, h_mat: np.ndarray, rho: float,
                     g_lower: np.ndarray, g_upper: np.ndarray,
                     qp_tol: float) -> QpSolution:
    """Solve the sampled QP to the KKT tolerance and aggregate multipliers
    per function (sampled rows summed, signed for two-sided rows)."""
    p_qp, q_qp, g_qp, w_qp, lay, meta = build_subproblem(
        samples, h_mat, rho, g_lower, g_upper)
    res = solve_qp(p_qp, q_qp, g_qp, w_qp,
                   x0=_feasible_start(samples, lay, g_lower, g_upper),
                   tol=qp_tol)
    mult_eq = np.zeros(lay.m_h)
    mult_ineq = np.zeros(lay.m_g)
    mult_obj = []
    for lam_i, tag in zip(res.lam, meta):
        kind, idx, _s = tag
        if kind == "obj":
            mult_obj.append(lam_i)
        elif kind == "eq+":
            mult_eq[idx] += lam_i
        elif kind == "eq-":
            mult_eq[idx] -= lam_i
        elif kind == "ineq+":
            mult_ineq[idx] += lam_i
        elif kind == "ineq-":
            mult_ineq[idx] -= lam_i
    u = res.x
    r_upper = np.zeros(lay.m_g)
    for j, c in lay.rup_cols.items():
        r_upper[j] = u[c]
    r_lower = np.zeros(lay.m_g)
    for j, c in lay.rlo_cols.items():
        r_lower[j] = u[c]
    return QpSolution(d=u[:lay.n], z=float(u[lay.z_col]),
                      e=u[lay.e_cols].copy(), r_upper=r_upper, r_lower=r_lower,
                      mult_obj=np.array(mult_obj), mult_eq=mult_eq,
                      mult_ineq=mult_ineq, kkt_residual=res.kkt_residual)


# ---------------------------------------------------------------------------
# damped limited-memory BFGS
# ---------------------------------------------------------------------------

class DampedLbfgs:
    """Dense Hessian approximation rebuilt from a bounded pair history.

    Each stored displacement pair folds in through a Powell-damped BFGS
    update (threshold 0.2), which keeps the matrix positive definite; a
    small multiple of the identity is added as a numerical floor.
    """

    def __init__(self, n: int, memory: int = 10, h_min: float = 1e-8):
        self.n = n
        self.memory = memory
        self.h_min = h_min
        self.pairs: deque = deque(maxlen=memory)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a pair; zero displacements are skipped."""
        if np.linalg.norm(s) == 0.0:
            return False
        self.pairs.append((s.copy(), y.copy()))
        return True

    def reset(self):
        self.pairs.clear()

    def matrix(self) -> np.ndarray:
        b = np.eye(self.n)
        if self.pairs:
            s_last, y_last = self.pairs[-1]
            sy = s_last @ y_last
            yy = y_last @ y_last
            if sy > 1e-12 and yy > 0:
                b *= min(max(yy / sy, 1e-4), 1e6)
        for s, y in self.pairs:
            bs = b @ s
            sbs = s @ bs
            if sbs <= 0:
                continue
            sy = s @ y
            if sy < 0.2 * sbs:
                theta = 0.8 * sbs / (sbs - sy)
                y = theta * y + (1.0 - theta) * bs
                sy = s @ y
            b = b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy
        return b + self.h_min * np.eye(self.n)


# ---------------------------------------------------------------------------
# line search
# ---------------------------------------------------------------------------

def _merit(problem, rho: float, x: np.ndarray):
    f, _ = problem.objective(x)
    sig = infeasibility(problem, x)
    return rho * f + sig.sum(), f, sig


def line_search(problem, x: np.ndarray, d: np.ndarray, rho: float,
                delta_q: float, varpi: float, gamma: float,
                beta_min: float, merit0: float):
    """Largest beta in {1, gamma, gamma^2, ...} whose trial point cuts the
    merit by at least varpi * beta * delta_q.  Trial points where a model
    evaluation fails count as +inf merit (the step keeps shrinking)."""
    beta = 1.0
    trials = 0
    while beta >= beta_min:
        trial = x + beta * d
        trials += 1
        try:
            merit_t, f_t, sig_t = _merit(problem, rho, trial)
        except Exception:
            merit_t = np.inf
        if merit_t <= merit0 - varpi * beta * delta_q:
            return beta, trial, trials
        beta *= gamma
    raise LineSearchUnderflow(
        f"no acceptable step above {beta_min:g} ({trials} trials)")


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def _gather_samples(problem, x, f0, grad_f, h0, jac_h, g0, jac_g,
                    eps, k, seed, threads) -> _Samples:
    """Sampled gradients for every function with a positive sample size.

    Draws are taken from per-(iteration, function) substreams so the
    resulting QP does not depend on evaluation order; only the gradient
    evaluations run on the thread pool.
    """
    m_h, m_g = problem.m_h, problem.m_g
    tasks = []  # (kind, index, point, slot)
    obj_pts = None
    if problem.obj_samples > 0:
        obj_pts = sample_points(x, eps, problem.obj_samples, substream(seed, k, 0))
    eq_pts = {}
    for i in range(m_h):
        p_i = int(problem.eq_samples[i])
        if p_i > 0:
            eq_pts[i] = sample_points(x, eps, p_i, substream(seed, k, 1 + i))
    ineq_pts = {}
    for j in range(m_g):
        p_j = int(problem.ineq_samples[j])
        if p_j > 0 and (np.isfinite(problem.g_upper[j])
                        or np.isfinite(problem.g_lower[j])):
            ineq_pts[j] = sample_points(x, eps, p_j,
                                        substream(seed, k, 1 + m_h + j))

    obj_grads = [grad_f]
    if obj_pts is not None:
        obj_grads += [None] * (len(obj_pts) - 1)
        for s in range(1, len(obj_pts)):
            tasks.append(("objective", 0, obj_pts[s], (obj_grads, s)))
    eq_grads = []
    for i in range(m_h):
        grads = [jac_h[i]]
        if i in eq_pts:
            grads += [None] * (len(eq_pts[i]) - 1)
            for s in range(1, len(eq_pts[i])):
                tasks.append(("equality", i, eq_pts[i][s], (grads, s)))
        eq_grads.append(grads)
    ineq_grads = []
    for j in range(m_g):
        grads = [jac_g[j]]
        if j in ineq_pts:
            grads += [None] * (len(ineq_pts[j]) - 1)
            for s in range(1, len(ineq_pts[j])):
                tasks.append(("inequality", j, ineq_pts[j][s], (grads, s)))
        ineq_grads.append(grads)

    def run(task):
        kind, idx, pt, (store, slot) = task
        store[slot] = problem.row_gradient(kind, idx, pt)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tasks))
    else:
        for t in tasks:
            run(t)

    return _Samples(f0=f0, obj_grads=np.array(obj_grads), h0=h0,
                    eq_grads=[np.array(gl) for gl in eq_grads], g0=g0,
                    ineq_grads=[np.array(gl) for gl in ineq_grads])


def solve(problem, x0: np.ndarray, params: SolverParams | None = None, *,
          log_modes: bool = False, profile: bool = False) -> SolveResult:
    """Run the sampling SQP loop from x0 until stationarity and
    feasibility tolerances hold, or a cap/failure stops it.

    The trace holds one record per executed iteration; ``diagnostics``
    carries solver-internal quantities (QP residuals, merit bookkeeping)
    useful for verification but not part of the serialized trace format.
    """
    params = params or SolverParams()
    x = np.asarray(x0, dtype=float).copy()
    if len(x) != problem.n:
        raise ValueError(f"x0 has length {len(x)}, expected {problem.n}")
    rho, eps, tau = params.rho0, params.eps0, params.tau0
    hess = DampedLbfgs(problem.n, params.lbfgs_memory, params.h_min)
    trace: list[IterationRecord] = []
    diagnostics: list[dict] = []
    prev_dq: Optional[float] = None
    pend_pair = None  # (x_prev, grad_f_prev, jac_h_prev, jac_g_prev, x_now)
    status, message = "iteration-limit", ""
    f0, sig_max = np.nan, np.nan
    model = getattr(problem, "model", None)

    k = 0
    while k < params.k_max:
        k += 1
        stats0 = dict(model.stats) if (profile and model is not None) else None
        try:
            f0, grad_f = problem.objective(x)
            h0 = problem.eq_values(x)
            g0 = problem.ineq_values(x)
        except Exception as err:
            status, message = "line-search-failure", f"evaluation failed at iterate: {err}"
            k -= 1
            break
        sig = sigma_vector(h0, g0, problem.g_lower, problem.g_upper)
        sig_max = float(sig.max()) if sig.size else 0.0

        if prev_dq is not None and prev_dq < params.nu_s and sig_max < params.nu_in:
            status = "converged"
            k -= 1
            break

        jac_h = problem.eq_jacobian(x)
        jac_g = problem.ineq_jacobian(x)
        samples = _gather_samples(problem, x, f0, grad_f, h0, jac_h, g0, jac_g,
                                  eps, k, params.seed, params.threads)

        h_mat = hess.matrix()
        try:
            qsol = solve_subproblem(samples, h_mat, rho, problem.g_lower,
                                    problem.g_upper, params.qp_tol)
        except QpSolverError:
            hess.reset()
            h_mat = hess.matrix()
            try:
                qsol = solve_subproblem(samples, h_mat, rho, problem.g_lower,
                                        problem.g_upper, params.qp_tol)
            except QpSolverError as err:
                status = "qp-failure"
                message = str(err)
                break

        # fold in the displacement pair of the last accepted step, using the
        # multipliers of the QP just solved
        if pend_pair is not None:
            x_prev, gf_prev, jh_prev, jg_prev = pend_pair
            s_vec = x - x_prev
            if np.linalg.norm(s_vec) > 0:
                grad_now = rho * grad_f + jac_h.T @ qsol.mult_eq + jac_g.T @ qsol.mult_ineq
                grad_prev = (rho * gf_prev + jh_prev.T @ qsol.mult_eq
                             + jg_prev.T @ qsol.mult_ineq)
                hess.push(s_vec, grad_now - grad_prev)
            pend_pair = None

        delta_q = model_reduction(rho, samples, h_mat, problem.g_lower,
                                  problem.g_upper, qsol.d)
        eta_val = None
        if problem.spectral_index is not None:
            eta_val = float(g0[problem.spectral_index])
        rec = IterationRecord(k=k, f=float(f0), sigma_max=sig_max,
                              delta_q=float(delta_q), beta=0.0,
                              eps=eps, rho=rho, tau=tau, eta=eta_val)
        if log_modes and model is not None:
            rec.modes = model.leading_modes(x)
        diag = {"k": k, "kkt_residual": qsol.kkt_residual,
                "merit": rho * f0 + sig.sum(), "accepted": False,
                "delta_q": float(delta_q), "d_norm": float(np.linalg.norm(qsol.d))}

        if delta_q > params.nu_s * eps ** 2:
            merit0 = rho * f0 + sig.sum()
            try:
                beta, x_new, trials = line_search(
                    problem, x, qsol.d, rho, delta_q, params.varpi,
                    params.gamma, params.beta_min, merit0)
                rec.beta = beta
                diag.update(accepted=True, ls_trials=trials,
                            merit_new=_merit(problem, rho, x_new)[0])
                pend_pair = (x.copy(), grad_f, jac_h, jac_g)
                x = x_new
            except LineSearchUnderflow:
                diag["line_search_underflow"] = True
                if sig_max <= tau:
                    tau *= params.mu_tau
                else:
                    rho *= params.mu_rho
                eps *= params.mu_eps
        else:
            if sig_max <= tau:
                tau *= params.mu_tau
            else:
                rho *= params.mu_rho
            eps *= params.mu_eps

        if profile and stats0 is not None:
            rec.profile = {key: model.stats[key] - stats0[key] for key in stats0}
        trace.append(rec)
        diagnostics.append(diag)
        prev_dq = float(delta_q)

    if status == "iteration-limit":
        message = f"stopped after {k} iterations"
    try:
        f_final = problem.objective(x)[0]
        sig_final = infeasibility(problem, x)
        sig_max = float(sig_final.max()) if sig_final.size else 0.0
    except Exception:
        f_final = f0
    return SolveResult(x=x, f=float(f_final), status=status, trace=trace,
                       sigma_max=sig_max, iterations=len(trace),
                       diagnostics=diagnostics, message=message)
