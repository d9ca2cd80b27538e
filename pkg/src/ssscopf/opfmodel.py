"""Dispatch optimization model with an optional stability bound.

Assembles the cost objective, the network/machine steady-state equalities
and the operating-limit inequalities over the flat variable vector

    x = [P_G | Q_G | V | theta (reference dropped) | delta | E'_d | E'_q |
         I_d | I_q | E_fd]

and exposes them through the problem-agnostic :class:`NlpProblem` consumed
by the gradient-sampling SQP solver.  Every function is smooth except the
spectral-abscissa row, which is the single inequality carrying a nonzero
sample size.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cases import NetworkCase, build_admittance
from . import smallsignal as ss
from .netfuncs import injections, injection_jacobians

__all__ = ["NlpProblem", "VariableLayout", "SsscOpf", "assemble_sssc_opf",
           "flat_start"]


@dataclass
class NlpProblem:
    """Problem-agnostic view of a nonsmooth NLP.

    Rows of the equality/inequality evaluators play the role of individual
    scalar constraint functions; ``row_gradient`` evaluates the gradient of
    one row at an arbitrary point (used for gradient sampling, so it must
    stay cheap for rows with ``sample size > 0``).  Bounds may be infinite
    on either side; the spectral constraint registers as upper-bounded only.
    """

    n: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    eq_values: Callable[[np.ndarray], np.ndarray]
    eq_jacobian: Callable[[np.ndarray], np.ndarray]
    ineq_values: Callable[[np.ndarray], np.ndarray]
    ineq_jacobian: Callable[[np.ndarray], np.ndarray]
    g_lower: np.ndarray
    g_upper: np.ndarray
    m_h: int
    m_g: int
    obj_samples: int = 0
    eq_samples: np.ndarray = None
    ineq_samples: np.ndarray = None
    row_gradient: Callable[[str, int, np.ndarray], np.ndarray] = None
    variable_names: list = None
    spectral_index: Optional[int] = None
    model: object = None

    def __post_init__(self):
        if self.eq_samples is None:
            self.eq_samples = np.zeros(self.m_h, dtype=int)
        if self.ineq_samples is None:
            self.ineq_samples = np.zeros(self.m_g, dtype=int)
        if self.row_gradient is None:
            self.row_gradient = self._default_row_gradient
        if self.variable_names is None:
            self.variable_names = [f"x{i}" for i in range(self.n)]

    def _default_row_gradient(self, kind: str, index: int, x: np.ndarray):
        if kind == "objective":
            return self.objective(x)[1]
        if kind == "equality":
            return self.eq_jacobian(x)[index]
        if kind == "inequality":
            return self.ineq_jacobian(x)[index]
        raise ValueError(f"unknown function kind {kind!r}")


@dataclass
class VariableLayout:
    """Offsets of the variable groups inside the flat vector.

    The angle of the reference bus is pinned to zero by eliminating it, so
    the theta slice has one entry fewer than there are buses.
    """

    n_gen: int
    n_bus: int
    ref_bus: int
    slices: dict = field(default_factory=dict)
    n: int = 0

    @classmethod
    def for_case(cls, case: NetworkCase) -> "VariableLayout":
        g, nb = case.n_gen, case.n_bus
        lay = cls(n_gen=g, n_bus=nb, ref_bus=case.reference_bus)
        start = 0
        for name, size in (("pg", g), ("qg", g), ("v", nb), ("theta", nb - 1),
                           ("delta", g), ("edp", g), ("eqp", g), ("id", g),
                           ("iq", g), ("efd", g)):
            lay.slices[name] = slice(start, start + size)
            start += size
        lay.n = start
        return lay

    def get(self, x: np.ndarray, name: str) -> np.ndarray:
        return x[self.slices[name]]

    def theta_full(self, x: np.ndarray) -> np.ndarray:
        """Per-bus angles with the pinned reference re-inserted."""
        th = self.get(x, "theta")
        return np.insert(th, self.ref_bus, 0.0)

    def theta_index(self, bus: int) -> Optional[int]:
        """Flat index of a bus angle, or None for the reference bus."""
        if bus == self.ref_bus:
            return None
        pos = bus if bus < self.ref_bus else bus - 1
        return self.slices["theta"].start + pos

    def scatter_theta(self, values_full: np.ndarray) -> np.ndarray:
        """Drop the reference entry from a per-bus array."""
        return np.delete(values_full, self.ref_bus)

    def pack(self, op: ss.OperatingPoint) -> np.ndarray:
        x = np.empty(self.n)
        x[self.slices["pg"]] = op.p_g
        x[self.slices["qg"]] = op.q_g
        x[self.slices["v"]] = op.v
        x[self.slices["theta"]] = self.scatter_theta(op.theta)
        x[self.slices["delta"]] = op.delta
        x[self.slices["edp"]] = op.edp
        x[self.slices["eqp"]] = op.eqp
        x[self.slices["id"]] = op.i_d
        x[self.slices["iq"]] = op.i_q
        x[self.slices["efd"]] = op.efd
        return x

    def names(self, case: NetworkCase) -> list[str]:
        out = []
        for m in range(self.n_gen):
            out.append(f"pg[{case.generators[m].bus}]")
        for m in range(self.n_gen):
            out.append(f"qg[{case.generators[m].bus}]")
        for b in case.buses:
            out.append(f"v[{b.id}]")
        for i, b in enumerate(case.buses):
            if i != self.ref_bus:
                out.append(f"theta[{b.id}]")
        for grp in ("delta", "edp", "eqp", "id", "iq", "efd"):
            for m in range(self.n_gen):
                out.append(f"{grp}[{case.generators[m].bus}]")
        return out


class SsscOpf:
    """Evaluators of the dispatch model over one case.

    Carries the admittance matrix, the variable layout and a bounded memo
    of spectral evaluations (an accepted line-search point is re-queried as
    the next iterate's anchor, which saves one eigensolve per iteration).
    """

    def __init__(self, case: NetworkCase, eta_bar: float | None = None,
                 spectral_samples: int = 30, zero_mode_tol: float = 1e-6,
                 degeneracy_tol: float = 1e-8):
        if eta_bar is not None and not np.isfinite(eta_bar) and eta_bar != np.inf:
            raise ValueError("eta_bar must be finite or +inf")
        self.case = case
        self.eta_bar = eta_bar
        self.spectral_samples = int(spectral_samples)
        self.zero_mode_tol = zero_mode_tol
        self.degeneracy_tol = degeneracy_tol
        self.layout = VariableLayout.for_case(case)
        self.ybus = build_admittance(case)
        self.gen_bus = case.gen_bus_numbers()
        self.p_load = np.array([b.p_load for b in case.buses])
        self.q_load = np.array([b.q_load for b in case.buses])
        self.base_mva = case.base_mva
        self._a2 = np.array([g.a2 for g in case.generators])
        self._a1 = np.array([g.a1 for g in case.generators])
        self._a0 = np.array([g.a0 for g in case.generators])
        self._cache: OrderedDict[bytes, tuple] = OrderedDict()
        self._cache_lock = threading.Lock()
        self.stats = {"eigen_calls": 0, "eigen_time": 0.0,
                      "sens_calls": 0, "sens_time": 0.0}

    # -- dimensions ---------------------------------------------------------

    @property
    def m_h(self) -> int:
        return 2 * self.case.n_bus + 6 * self.case.n_gen

    @property
    def m_g(self) -> int:
        base = self.case.n_bus + 2 * self.case.n_gen + self.case.n_line
        return base + (1 if self.eta_bar is not None else 0)

    @property
    def spectral_row(self) -> Optional[int]:
        if self.eta_bar is None:
            return None
        return self.m_g - 1

    # -- objective ----------------------------------------------------------

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Generation cost in $/h and its gradient (P_G in per-unit)."""
        pg_mw = self.layout.get(x, "pg") * self.base_mva
        val = float(np.sum(self._a2 * pg_mw ** 2 + self._a1 * pg_mw + self._a0))
        grad = np.zeros(self.layout.n)
        grad[self.layout.slices["pg"]] = (2.0 * self._a2 * pg_mw + self._a1) * self.base_mva
        return val, grad

    def cost_of_dispatch_mw(self, pg_mw: np.ndarray) -> float:
        return float(np.sum(self._a2 * pg_mw ** 2 + self._a1 * pg_mw + self._a0))

    # -- equalities ---------------------------------------------------------

    def _electrical(self, x: np.ndarray):
        lay = self.layout
        v = lay.get(x, "v")
        theta = lay.theta_full(x)
        return v, theta

    def eq_values(self, x: np.ndarray) -> np.ndarray:
        lay = self.layout
        case = self.case
        g, nb = case.n_gen, case.n_bus
        v, theta = self._electrical(x)
        pg, qg = lay.get(x, "pg"), lay.get(x, "qg")
        delta = lay.get(x, "delta")
        edp, eqp = lay.get(x, "edp"), lay.get(x, "eqp")
        i_d, i_q = lay.get(x, "id"), lay.get(x, "iq")
        efd = lay.get(x, "efd")

        p_net, q_net = injections(self.ybus, v, theta)
        p_inj = -self.p_load.copy()
        q_inj = -self.q_load.copy()
        np.add.at(p_inj, self.gen_bus, pg)
        np.add.at(q_inj, self.gen_bus, qg)

        vb = v[self.gen_bus]
        ang = delta - theta[self.gen_bus]
        sn, cs = np.sin(ang), np.cos(ang)
        xd = np.array([gen.machine.xd for gen in case.generators])
        xq = np.array([gen.machine.xq for gen in case.generators])
        xdp = np.array([gen.machine.xdp for gen in case.generators])
        xqp = np.array([gen.machine.xqp for gen in case.generators])
        rs = np.array([gen.machine.rs for gen in case.generators])
        pt = vb * (i_d * sn + i_q * cs)
        qt = vb * (i_d * cs - i_q * sn)

        return np.concatenate([
            p_inj - p_net,
            q_inj - q_net,
            edp - vb * sn - rs * i_d + xqp * i_q,
            eqp - vb * cs - rs * i_q - xdp * i_d,
            pg - pt,
            qg - qt,
            efd - eqp - (xd - xdp) * i_d,
            edp - (xq - xqp) * i_q,
        ])

    def eq_jacobian(self, x: np.ndarray) -> np.ndarray:
        lay = self.layout
        case = self.case
        g, nb = case.n_gen, case.n_bus
        v, theta = self._electrical(x)
        delta = lay.get(x, "delta")
        i_d, i_q = lay.get(x, "id"), lay.get(x, "iq")

        jac = np.zeros((self.m_h, lay.n))
        jpt, jpv, jqt, jqv = injection_jacobians(self.ybus, v, theta)
        sl = lay.slices
        th_cols = np.array([lay.theta_index(b) for b in range(nb)
                            if b != lay.ref_bus])
        th_buses = np.array([b for b in range(nb) if b != lay.ref_bus])

        # power flow rows
        for m, b in enumerate(self.gen_bus):
            jac[b, sl["pg"].start + m] = 1.0
            jac[nb + b, sl["qg"].start + m] = 1.0
        rows = np.arange(nb)
        jac[np.ix_(rows, np.arange(sl["v"].start, sl["v"].stop))] = -jpv
        jac[np.ix_(rows + nb, np.arange(sl["v"].start, sl["v"].stop))] = -jqv
        jac[np.ix_(rows, th_cols)] = -jpt[:, th_buses]
        jac[np.ix_(rows + nb, th_cols)] = -jqt[:, th_buses]

        vb = v[self.gen_bus]
        ang = delta - theta[self.gen_bus]
        sn, cs = np.sin(ang), np.cos(ang)
        pt = vb * (i_d * sn + i_q * cs)
        qt = vb * (i_d * cs - i_q * sn)
        r_st_d = 2 * nb
        r_st_q = r_st_d + g
        r_tp = r_st_q + g
        r_tq = r_tp + g
        r_fd = r_tq + g
        r_fq = r_fd + g
        for m, gen in enumerate(case.generators):
            mac = gen.machine
            b = self.gen_bus[m]
            cv = sl["v"].start + b
            cth = lay.theta_index(b)
            cd = sl["delta"].start + m
            ced, ceq = sl["edp"].start + m, sl["eqp"].start + m
            cid, ciq = sl["id"].start + m, sl["iq"].start + m
            cef = sl["efd"].start + m
            cpg, cqg = sl["pg"].start + m, sl["qg"].start + m

            jac[r_st_d + m, ced] = 1.0
            jac[r_st_d + m, cd] = -vb[m] * cs[m]
            jac[r_st_d + m, cv] = -sn[m]
            jac[r_st_d + m, cid] = -mac.rs
            jac[r_st_d + m, ciq] = mac.xqp
            if cth is not None:
                jac[r_st_d + m, cth] = vb[m] * cs[m]

            jac[r_st_q + m, ceq] = 1.0
            jac[r_st_q + m, cd] = vb[m] * sn[m]
            jac[r_st_q + m, cv] = -cs[m]
            jac[r_st_q + m, cid] = -mac.xdp
            jac[r_st_q + m, ciq] = -mac.rs
            if cth is not None:
                jac[r_st_q + m, cth] = -vb[m] * sn[m]

            jac[r_tp + m, cpg] = 1.0
            jac[r_tp + m, cd] = -qt[m]
            jac[r_tp + m, cv] = -pt[m] / vb[m]
            jac[r_tp + m, cid] = -vb[m] * sn[m]
            jac[r_tp + m, ciq] = -vb[m] * cs[m]
            if cth is not None:
                jac[r_tp + m, cth] = qt[m]

            jac[r_tq + m, cqg] = 1.0
            jac[r_tq + m, cd] = pt[m]
            jac[r_tq + m, cv] = -qt[m] / vb[m]
            jac[r_tq + m, cid] = -vb[m] * cs[m]
            jac[r_tq + m, ciq] = vb[m] * sn[m]
            if cth is not None:
                jac[r_tq + m, cth] = -pt[m]

            jac[r_fd + m, cef] = 1.0
            jac[r_fd + m, ceq] = -1.0
            jac[r_fd + m, cid] = -(mac.xd - mac.xdp)

            jac[r_fq + m, ced] = 1.0
            jac[r_fq + m, ciq] = -(mac.xq - mac.xqp)
        return jac

    # -- inequalities -------------------------------------------------------

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        case = self.case
        lo = [b.v_min for b in case.buses]
        hi = [b.v_max for b in case.buses]
        lo += [g.p_min for g in case.generators]
        hi += [g.p_max for g in case.generators]
        lo += [g.q_min for g in case.generators]
        hi += [g.q_max for g in case.generators]
        lo += [-np.inf] * case.n_line
        hi += [ln.i_max ** 2 for ln in case.lines]
        if self.eta_bar is not None:
            lo.append(-np.inf)
            hi.append(self.eta_bar)
        return np.array(lo), np.array(hi)

    def _line_currents(self, x: np.ndarray, jacobian: bool):
        lay = self.layout
        case = self.case
        v, theta = self._electrical(x)
        vc = v * np.exp(1j * theta)
        vals = np.empty(case.n_line)
        jac = np.zeros((case.n_line, lay.n)) if jacobian else None
        for k, ln in enumerate(case.lines):
            i = case.bus_number(ln.from_bus)
            j = case.bus_number(ln.to_bus)
            a = ln.series_admittance + ln.shunt_admittance_half
            bb = ln.series_admittance
            fcur = a * vc[i] - bb * vc[j]
            vals[k] = float(fcur.real ** 2 + fcur.imag ** 2)
            if jacobian:
                cf = np.conj(fcur)
                dvi = 2.0 * (cf * a * np.exp(1j * theta[i])).real
                dvj = 2.0 * (cf * (-bb) * np.exp(1j * theta[j])).real
                dti = 2.0 * (cf * a * 1j * vc[i]).real
                dtj = 2.0 * (cf * (-bb) * 1j * vc[j]).real
                jac[k, lay.slices["v"].start + i] = dvi
                jac[k, lay.slices["v"].start + j] = dvj
                ci = lay.theta_index(i)
                cj = lay.theta_index(j)
                if ci is not None:
                    jac[k, ci] = dti
                if cj is not None:
                    jac[k, cj] = dtj
        return vals, jac

    def ineq_values(self, x: np.ndarray) -> np.ndarray:
        lay = self.layout
        line_vals, _ = self._line_currents(x, jacobian=False)
        parts = [lay.get(x, "v"), lay.get(x, "pg"), lay.get(x, "qg"), line_vals]
        if self.eta_bar is not None:
            parts.append([self.spectral_value(x)])
        return np.concatenate(parts)

    def ineq_jacobian(self, x: np.ndarray) -> np.ndarray:
        lay = self.layout
        case = self.case
        jac = np.zeros((self.m_g, lay.n))
        nb, g = case.n_bus, case.n_gen
        for i in range(nb):
            jac[i, lay.slices["v"].start + i] = 1.0
        for m in range(g):
            jac[nb + m, lay.slices["pg"].start + m] = 1.0
            jac[nb + g + m, lay.slices["qg"].start + m] = 1.0
        _, line_jac = self._line_currents(x, jacobian=True)
        jac[nb + 2 * g: nb + 2 * g + case.n_line, :] = line_jac
        if self.eta_bar is not None:
            jac[self.spectral_row, :] = self.spectral_gradient_row(x)
        return jac

    # -- spectral constraint -------------------------------------------------

    def op_from_x(self, x: np.ndarray) -> ss.OperatingPoint:
        """Operating point built from the flat vector as-is (no projection
        onto the feasible set); omega, V_R, R_F and the inputs are the
        consistent steady-state values implied by the machine states."""
        lay = self.layout
        case = self.case
        v = lay.get(x, "v")
        theta = lay.theta_full(x)
        delta = lay.get(x, "delta")
        edp, eqp = lay.get(x, "edp"), lay.get(x, "eqp")
        i_d, i_q = lay.get(x, "id"), lay.get(x, "iq")
        efd = lay.get(x, "efd")
        g = case.n_gen
        omega = np.array([gen.machine.omega_s for gen in case.generators])
        se = np.array([gen.exciter.saturation(efd[m])
                       for m, gen in enumerate(case.generators)])
        ke = np.array([gen.exciter.ke for gen in case.generators])
        kf = np.array([gen.exciter.kf for gen in case.generators])
        tf = np.array([gen.exciter.tf for gen in case.generators])
        ka = np.array([gen.exciter.ka for gen in case.generators])
        v_r = (ke + se) * efd
        r_f = (kf / tf) * efd
        vb = v[self.gen_bus]
        ang = delta - theta[self.gen_bus]
        xdp = np.array([gen.machine.xdp for gen in case.generators])
        xqp = np.array([gen.machine.xqp for gen in case.generators])
        torque = (eqp - xdp * i_d) * i_q + (edp + xqp * i_q) * i_d
        return ss.OperatingPoint(
            p_g=lay.get(x, "pg").copy(), q_g=lay.get(x, "qg").copy(),
            v=v.copy(), theta=theta, delta=delta.copy(), omega=omega,
            edp=edp.copy(), eqp=eqp.copy(), efd=efd.copy(), v_r=v_r,
            r_f=r_f, i_d=i_d.copy(), i_q=i_q.copy(), t_m=torque,
            v_ref=vb + v_r / ka)

    def _spectral_bundle(self, x: np.ndarray):
        """Memoized (eta, lambda_eta, leading mode list) at a point."""
        key = x.tobytes()
        with self._cache_lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        t0 = time.perf_counter()
        op = self.op_from_x(x)
        xs, ys, _ = ss.operating_vectors(self.case, op)
        blocks = ss.assemble_blocks(self.case, xs, ys, self.ybus)
        state = ss.reduce_state_matrix(blocks)
        lam = np.linalg.eigvals(state.a)
        keep = np.abs(lam) > self.zero_mode_tol
        if not keep.any():
            raise ss.DefectiveModeError("spectrum vanished under zero-mode filter")
        kept = lam[keep]
        eta = float(kept.real.max())
        k = ss._select_critical(lam, self.zero_mode_tol)
        modes = _leading_modes(kept)
        bundle = (eta, complex(lam[k]), modes)
        self.stats["eigen_calls"] += 1
        self.stats["eigen_time"] += time.perf_counter() - t0
        with self._cache_lock:
            self._cache[key] = bundle
            while len(self._cache) > 4096:
                self._cache.popitem(last=False)
        return bundle

    def spectral_value(self, x: np.ndarray) -> float:
        return self._spectral_bundle(x)[0]

    def leading_modes(self, x: np.ndarray) -> list:
        return self._spectral_bundle(x)[2]

    def spectral_gradient_row(self, x: np.ndarray) -> np.ndarray:
        """Closed-form abscissa gradient mapped into the flat layout."""
        t0 = time.perf_counter()
        op = self.op_from_x(x)
        grad = ss.spectral_abscissa_gradient(
            self.case, op, zero_mode_tol=self.zero_mode_tol,
            degeneracy_tol=self.degeneracy_tol)
        lay = self.layout
        row = np.zeros(lay.n)
        row[lay.slices["v"]] = grad.d_v
        row[lay.slices["theta"]] = lay.scatter_theta(grad.d_theta)
        row[lay.slices["delta"]] = grad.d_delta
        row[lay.slices["edp"]] = grad.d_edp
        row[lay.slices["eqp"]] = grad.d_eqp
        row[lay.slices["id"]] = grad.d_id
        row[lay.slices["iq"]] = grad.d_iq
        row[lay.slices["efd"]] = grad.d_efd
        self.stats["sens_calls"] += 1
        self.stats["sens_time"] += time.perf_counter() - t0
        return row

    def _row_gradient(self, kind: str, index: int, x: np.ndarray) -> np.ndarray:
        if kind == "inequality" and index == self.spectral_row:
            return self.spectral_gradient_row(x)
        if kind == "objective":
            return self.objective(x)[1]
        if kind == "equality":
            return self.eq_jacobian(x)[index]
        return self.ineq_jacobian(x)[index]

    # -- assembly ------------------------------------------------------------

    def as_nlp(self) -> NlpProblem:
        lo, hi = self.bounds()
        ineq_samples = np.zeros(self.m_g, dtype=int)
        if self.eta_bar is not None:
            ineq_samples[self.spectral_row] = self.spectral_samples
        return NlpProblem(
            n=self.layout.n,
            objective=self.objective,
            eq_values=self.eq_values,
            eq_jacobian=self.eq_jacobian,
            ineq_values=self.ineq_values,
            ineq_jacobian=self.ineq_jacobian,
            g_lower=lo, g_upper=hi,
            m_h=self.m_h, m_g=self.m_g,
            ineq_samples=ineq_samples,
            row_gradient=self._row_gradient,
            variable_names=self.layout.names(self.case),
            spectral_index=self.spectral_row,
            model=self,
        )


def _leading_modes(kept: np.ndarray, count: int = 4) -> list:
    """Most critical modes, one entry per conjugate pair, as [re, im]."""
    seen = []
    for lam in sorted(kept, key=lambda z: (-z.real, abs(z.imag))):
        if lam.imag < 0 and any(abs(lam.conjugate() - z) < 1e-9 for z in seen):
            continue
        seen.append(lam)
        if len(seen) == count:
            break
    return [[float(z.real), float(abs(z.imag))] for z in seen]


def assemble_sssc_opf(case: NetworkCase, eta_bar: float | None = None,
                      spectral_samples: int = 30, **kwargs) -> NlpProblem:
    """Build the dispatch NLP; omit ``eta_bar`` for the plain OPF instance."""
    return SsscOpf(case, eta_bar=eta_bar, spectral_samples=spectral_samples,
                   **kwargs).as_nlp()


def flat_start(case: NetworkCase) -> np.ndarray:
    """Standard cold start: V = 1, angles 0, dispatch at limit midpoints,
    machine states initialized per machine (with a safe fallback where the
    closed-form solve fails at the infeasible flat point)."""
    lay = VariableLayout.for_case(case)
    x = np.zeros(lay.n)
    x[lay.slices["v"]] = 1.0
    pg = np.array([(g.p_min + g.p_max) / 2.0 for g in case.generators])
    qg = np.array([(g.q_min + g.q_max) / 2.0 for g in case.generators])
    x[lay.slices["pg"]] = pg
    x[lay.slices["qg"]] = qg
    for m, gen in enumerate(case.generators):
        try:
            sol = ss.machine_equilibrium(gen.machine, gen.exciter,
                                         pg[m], qg[m], 1.0, 0.0)
        except ss.InitializationError:
            sol = dict(delta=0.0, edp=0.0, eqp=1.0, i_d=0.0, i_q=0.0, efd=1.0)
        x[lay.slices["delta"].start + m] = sol["delta"]
        x[lay.slices["edp"].start + m] = sol["edp"]
        x[lay.slices["eqp"].start + m] = sol["eqp"]
        x[lay.slices["id"].start + m] = sol["i_d"]
        x[lay.slices["iq"].start + m] = sol["i_q"]
        x[lay.slices["efd"].start + m] = sol["efd"]
    return x
