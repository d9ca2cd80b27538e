"""Small-signal machinery: steady-state initialization of the two-axis
machine / DC-1 exciter model, linearization into block form, reduction to
the state matrix, modal analysis and spectral-abscissa sensitivities.

State ordering per machine is ``[delta, omega, E'_q, E'_d, E_fd, V_R, R_F]``
(7 states).  The algebraic vector is ``[I_d, I_q per machine | theta, V per
generator bus | theta, V per load bus]``.  The linearized model is

    d(ds)/dt = A1*ds + B1*dIg + B2*dVg + E1*du
           0 = C1*ds + D1*dIg + D2*dVg
           0 = C2*ds + D3*dIg + D4*dVg + D5*dVl
           0 =                  D6*dVg + D7*dVl

assembled into the compact (Atil, Btil, Ctil, Dtil) form, from which the
state matrix is the Schur complement A = Atil - Btil*inv(Dtil)*Ctil
(evaluated with an LU solve, never an explicit inverse).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .cases import NetworkCase, build_admittance
from .netfuncs import injections, injection_jacobians, injection_jacobian_derivatives

__all__ = [
    "OperatingPoint",
    "LinearizedBlocks",
    "StateMatrix",
    "ModalResult",
    "SpectralGradient",
    "InitializationError",
    "SingularNetworkError",
    "DefectiveModeError",
    "steady_state_init",
    "machine_equilibrium",
    "dynamic_residuals",
    "assemble_blocks",
    "linearize_blocks",
    "reduce_state_matrix",
    "modal_analysis",
    "spectral_abscissa",
    "spectral_abscissa_gradient",
    "finite_difference_gradient",
    "VARIABLE_GROUPS",
]

# per-machine state offsets
DELTA, OMEGA, EQP, EDP, EFD, VR, RF = range(7)
N_STATES = 7

# variable groups of the dispatch/stability vector, in canonical order
VARIABLE_GROUPS = ("pg", "qg", "v", "theta", "delta", "edp", "eqp", "id", "iq", "efd")


class InitializationError(Exception):
    """Steady-state machine initialization failed or left a residual."""


class SingularNetworkError(Exception):
    """The algebraic block Dtil is singular or numerically degenerate."""


class DefectiveModeError(Exception):
    """The critical eigenvalue is (near-)defective; eigenvectors unusable."""


@dataclass(frozen=True)
class OperatingPoint:
    """Full operating point: dispatch, bus voltages, machine and exciter
    states plus the steady-state inputs (t_m, v_ref) derived from them."""

    p_g: np.ndarray
    q_g: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    edp: np.ndarray
    eqp: np.ndarray
    efd: np.ndarray
    v_r: np.ndarray
    r_f: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    t_m: np.ndarray
    v_ref: np.ndarray

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(**{k: np.array(getattr(self, k)) for k in self.__dataclass_fields__})

    def perturbed(self, group: str, index: int, amount: float) -> "OperatingPoint":
        """Copy with one variable of the stability vector shifted by ``amount``."""
        attr = {"pg": "p_g", "qg": "q_g", "v": "v", "theta": "theta",
                "delta": "delta", "edp": "edp", "eqp": "eqp",
                "id": "i_d", "iq": "i_q", "efd": "efd"}[group]
        fields = {k: np.array(getattr(self, k)) for k in self.__dataclass_fields__}
        fields[attr][index] += amount
        return OperatingPoint(**fields)


class DynamicIndex:
    """Index bookkeeping between case records and the stacked vectors."""

    def __init__(self, case: NetworkCase):
        self.g = case.n_gen
        self.nb = case.n_bus
        self.gen_bus = case.gen_bus_numbers()
        self.load_bus = case.load_bus_numbers()
        self.nl = len(self.load_bus)
        self.n_state = N_STATES * self.g
        self.n_alg = 2 * self.g + 2 * self.nb
        # algebraic column of theta/V for every bus
        self.col_theta = np.empty(self.nb, dtype=int)
        for m, b in enumerate(self.gen_bus):
            self.col_theta[b] = 2 * self.g + 2 * m
        for j, b in enumerate(self.load_bus):
            self.col_theta[b] = 4 * self.g + 2 * j
        self.col_v = self.col_theta + 1

    def state(self, machine: int, offset: int) -> int:
        return N_STATES * machine + offset

    def col_id(self, machine: int) -> int:
        return 2 * machine

    def col_iq(self, machine: int) -> int:
        return 2 * machine + 1

    def row_stator_d(self, machine: int) -> int:
        return 2 * machine

    def row_stator_q(self, machine: int) -> int:
        return 2 * machine + 1

    def row_net_p(self, bus: int) -> int:
        # network rows follow the same layout as the theta/V columns
        return int(self.col_theta[bus])

    def row_net_q(self, bus: int) -> int:
        return self.row_net_p(bus) + 1


def operating_vectors(case: NetworkCase, op: OperatingPoint):
    """Stack an operating point into (X, Y, U) dynamic vectors."""
    idx = DynamicIndex(case)
    x = np.empty(idx.n_state)
    for m in range(idx.g):
        x[idx.state(m, DELTA)] = op.delta[m]
        x[idx.state(m, OMEGA)] = op.omega[m]
        x[idx.state(m, EQP)] = op.eqp[m]
        x[idx.state(m, EDP)] = op.edp[m]
        x[idx.state(m, EFD)] = op.efd[m]
        x[idx.state(m, VR)] = op.v_r[m]
        x[idx.state(m, RF)] = op.r_f[m]
    y = np.empty(idx.n_alg)
    for m in range(idx.g):
        y[idx.col_id(m)] = op.i_d[m]
        y[idx.col_iq(m)] = op.i_q[m]
    y[idx.col_theta] = op.theta
    y[idx.col_v] = op.v
    u = np.empty(2 * idx.g)
    u[0::2] = op.t_m
    u[1::2] = op.v_ref
    return x, y, u


# ---------------------------------------------------------------------------
# steady-state initialization
# ---------------------------------------------------------------------------

def machine_equilibrium(machine, exciter, p: float, q: float,
                        vm: float, th: float) -> dict:
    """Closed-form equilibrium of one machine behind its terminal condition.

    Given terminal (P, Q, V, theta), solves the stator, terminal-power and
    steady-state field equations for the rotor angle, dq currents, internal
    voltages and exciter states.
    """
    if vm <= 0.0:
        raise InitializationError("terminal voltage must be positive")
    vph = vm * cmath.exp(1j * th)
    iph = (p - 1j * q) / vph.conjugate()
    e_axis = vph + complex(machine.rs, machine.xq) * iph
    if abs(e_axis) < 1e-12:
        raise InitializationError("degenerate terminal condition: no rotor angle")
    delta = cmath.phase(e_axis)
    rot = cmath.exp(1j * (math.pi / 2.0 - delta))
    vdq = vph * rot
    idq = iph * rot
    vd, vq = vdq.real, vdq.imag
    i_d, i_q = idq.real, idq.imag
    edp = vd + machine.rs * i_d - machine.xqp * i_q
    eqp = vq + machine.rs * i_q + machine.xdp * i_d
    efd = eqp + (machine.xd - machine.xdp) * i_d
    torque = (eqp - machine.xdp * i_d) * i_q + (edp + machine.xqp * i_q) * i_d
    se = exciter.saturation(efd)
    v_r = (exciter.ke + se) * efd
    r_f = (exciter.kf / exciter.tf) * efd
    v_ref = vm + v_r / exciter.ka
    return dict(delta=delta, i_d=i_d, i_q=i_q, edp=edp, eqp=eqp, efd=efd,
                v_r=v_r, r_f=r_f, t_m=torque, v_ref=v_ref)


def steady_state_init(case: NetworkCase, p_g, q_g, v, theta, *,
                      tol: float = 1e-8) -> OperatingPoint:
    """Build the unique machine/exciter equilibrium over a dispatched
    electrical state.  The dispatch is expected to satisfy the power-flow
    equations; machine-level residuals are verified against ``tol``."""
    p_g = np.asarray(p_g, dtype=float)
    q_g = np.asarray(q_g, dtype=float)
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    g = case.n_gen
    gen_bus = case.gen_bus_numbers()
    cols = {k: np.empty(g) for k in
            ("delta", "i_d", "i_q", "edp", "eqp", "efd", "v_r", "r_f", "t_m", "v_ref")}
    for m, gen in enumerate(case.generators):
        b = gen_bus[m]
        sol = machine_equilibrium(gen.machine, gen.exciter,
                                  p_g[m], q_g[m], v[b], theta[b])
        for k, val in sol.items():
            cols[k][m] = val
    omega = np.array([gen.machine.omega_s for gen in case.generators])
    op = OperatingPoint(p_g=p_g.copy(), q_g=q_g.copy(), v=v.copy(),
                        theta=theta.copy(), delta=cols["delta"],
                        omega=omega, edp=cols["edp"], eqp=cols["eqp"],
                        efd=cols["efd"], v_r=cols["v_r"], r_f=cols["r_f"],
                        i_d=cols["i_d"], i_q=cols["i_q"], t_m=cols["t_m"],
                        v_ref=cols["v_ref"])
    worst = _init_residual(case, op)
    if worst > tol:
        raise InitializationError(
            f"initialization residual {worst:.3e} exceeds {tol:.1e}")
    return op


def _init_residual(case: NetworkCase, op: OperatingPoint) -> float:
    """Largest residual of the differential, stator and terminal equations."""
    xs, ys, us = operating_vectors(case, op)
    f_dyn, f_alg = dynamic_residuals(case, xs, ys, us)
    g = case.n_gen
    gen_bus = case.gen_bus_numbers()
    ang = op.delta - op.theta[gen_bus]
    vg = op.v[gen_bus]
    pt = vg * (op.i_d * np.sin(ang) + op.i_q * np.cos(ang))
    qt = vg * (op.i_d * np.cos(ang) - op.i_q * np.sin(ang))
    parts = [f_dyn, f_alg[: 2 * g], op.p_g - pt, op.q_g - qt]
    return max(np.abs(np.concatenate(parts)).max(), 0.0)


# ---------------------------------------------------------------------------
# nonlinear residuals
# ---------------------------------------------------------------------------

def dynamic_residuals(case: NetworkCase, x: np.ndarray, y: np.ndarray,
                      u: np.ndarray, ybus: np.ndarray | None = None):
    """Right-hand sides f_dyn (state derivatives) and f_alg (algebraic
    residuals) of the full machine/exciter/network model."""
    idx = DynamicIndex(case)
    g, nb = idx.g, idx.nb
    if ybus is None:
        ybus = build_admittance(case)

    delta = x[DELTA::N_STATES]
    omega = x[OMEGA::N_STATES]
    eqp = x[EQP::N_STATES]
    edp = x[EDP::N_STATES]
    efd = x[EFD::N_STATES]
    v_r = x[VR::N_STATES]
    r_f = x[RF::N_STATES]
    i_d = y[0:2 * g:2]
    i_q = y[1:2 * g:2]
    theta = y[idx.col_theta]
    vm = y[idx.col_v]
    t_m = u[0::2]
    v_ref = u[1::2]

    f_dyn = np.empty(idx.n_state)
    for m, gen in enumerate(case.generators):
        mac, exc = gen.machine, gen.exciter
        b = idx.gen_bus[m]
        torque = (eqp[m] - mac.xdp * i_d[m]) * i_q[m] + (edp[m] + mac.xqp * i_q[m]) * i_d[m]
        se = exc.saturation(efd[m])
        f_dyn[idx.state(m, DELTA)] = omega[m] - mac.omega_s
        f_dyn[idx.state(m, OMEGA)] = (t_m[m] - torque - mac.d * (omega[m] - mac.omega_s)) / mac.m
        f_dyn[idx.state(m, EQP)] = (-eqp[m] - (mac.xd - mac.xdp) * i_d[m] + efd[m]) / mac.td0p
        f_dyn[idx.state(m, EDP)] = (-edp[m] + (mac.xq - mac.xqp) * i_q[m]) / mac.tq0p
        f_dyn[idx.state(m, EFD)] = (-(exc.ke + se) * efd[m] + v_r[m]) / exc.te
        f_dyn[idx.state(m, VR)] = (-v_r[m] + exc.ka * r_f[m]
                                   - (exc.ka * exc.kf / exc.tf) * efd[m]
                                   + exc.ka * (v_ref[m] - vm[b])) / exc.ta
        f_dyn[idx.state(m, RF)] = (-r_f[m] + (exc.kf / exc.tf) * efd[m]) / exc.tf

    p_net, q_net = injections(ybus, vm, theta)
    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])

    f_alg = np.empty(idx.n_alg)
    for m in range(g):
        b = idx.gen_bus[m]
        ang = delta[m] - theta[b]
        sn, cs = math.sin(ang), math.cos(ang)
        mac = case.generators[m].machine
        f_alg[idx.row_stator_d(m)] = edp[m] - vm[b] * sn - mac.rs * i_d[m] + mac.xqp * i_q[m]
        f_alg[idx.row_stator_q(m)] = eqp[m] - vm[b] * cs - mac.rs * i_q[m] - mac.xdp * i_d[m]
        pt = vm[b] * (i_d[m] * sn + i_q[m] * cs)
        qt = vm[b] * (i_d[m] * cs - i_q[m] * sn)
        f_alg[idx.row_net_p(b)] = pt - p_load[b] - p_net[b]
        f_alg[idx.row_net_q(b)] = qt - q_load[b] - q_net[b]
    for b in idx.load_bus:
        f_alg[idx.row_net_p(b)] = -p_load[b] - p_net[b]
        f_alg[idx.row_net_q(b)] = -q_load[b] - q_net[b]
    return f_dyn, f_alg


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------

@dataclass
class LinearizedBlocks:
    """Named blocks of the linearized model plus the assembled compact form.

    The named blocks are views into the assembled matrices, so they always
    agree with (atil, btil, ctil, dtil) by construction.
    """

    atil: np.ndarray
    btil: np.ndarray
    ctil: np.ndarray
    dtil: np.ndarray
    e1: np.ndarray
    n_gen: int
    n_bus: int

    def __post_init__(self):
        g, nb = self.n_gen, self.n_bus
        ns, na = N_STATES * g, 2 * g + 2 * nb
        if self.atil.shape != (ns, ns) or self.dtil.shape != (na, na):
            raise ValueError("block dimensions do not compose")
        if self.btil.shape != (ns, na) or self.ctil.shape != (na, ns):
            raise ValueError("block dimensions do not compose")
        if self.e1.shape != (ns, 2 * g):
            raise ValueError("input matrix dimension mismatch")

    @property
    def a1(self):
        return self.atil

    @property
    def b1(self):
        return self.btil[:, : 2 * self.n_gen]

    @property
    def b2(self):
        return self.btil[:, 2 * self.n_gen: 4 * self.n_gen]

    @property
    def c1(self):
        return self.ctil[: 2 * self.n_gen, :]

    @property
    def c2(self):
        return self.ctil[2 * self.n_gen: 4 * self.n_gen, :]

    @property
    def d1(self):
        g = self.n_gen
        return self.dtil[: 2 * g, : 2 * g]

    @property
    def d2(self):
        g = self.n_gen
        return self.dtil[: 2 * g, 2 * g: 4 * g]

    @property
    def d3(self):
        g = self.n_gen
        return self.dtil[2 * g: 4 * g, : 2 * g]

    @property
    def d4(self):
        g = self.n_gen
        return self.dtil[2 * g: 4 * g, 2 * g: 4 * g]

    @property
    def d5(self):
        g = self.n_gen
        return self.dtil[2 * g: 4 * g, 4 * g:]

    @property
    def d6(self):
        g = self.n_gen
        return self.dtil[4 * g:, 2 * g: 4 * g]

    @property
    def d7(self):
        g = self.n_gen
        return self.dtil[4 * g:, 4 * g:]


def assemble_blocks(case: NetworkCase, x: np.ndarray, y: np.ndarray,
                    ybus: np.ndarray | None = None) -> LinearizedBlocks:
    """Analytic Jacobian blocks of the model at a dynamic state (x, y)."""
    idx = DynamicIndex(case)
    g, nb = idx.g, idx.nb
    if ybus is None:
        ybus = build_admittance(case)

    eqp = x[EQP::N_STATES]
    edp = x[EDP::N_STATES]
    efd = x[EFD::N_STATES]
    delta = x[DELTA::N_STATES]
    i_d = y[0:2 * g:2]
    i_q = y[1:2 * g:2]
    theta = y[idx.col_theta]
    vm = y[idx.col_v]

    atil = np.zeros((idx.n_state, idx.n_state))
    btil = np.zeros((idx.n_state, idx.n_alg))
    ctil = np.zeros((idx.n_alg, idx.n_state))
    dtil = np.zeros((idx.n_alg, idx.n_alg))
    e1 = np.zeros((idx.n_state, 2 * g))

    for m, gen in enumerate(case.generators):
        mac, exc = gen.machine, gen.exciter
        b = idx.gen_bus[m]
        s = lambda off: idx.state(m, off)
        cid, ciq = idx.col_id(m), idx.col_iq(m)
        cth, cv = idx.col_theta[b], idx.col_v[b]
        ang = delta[m] - theta[b]
        sn, cs = math.sin(ang), math.cos(ang)
        v = vm[b]
        pt = v * (i_d[m] * sn + i_q[m] * cs)
        qt = v * (i_d[m] * cs - i_q[m] * sn)
        se = exc.saturation(efd[m])

        # A1: differential states
        atil[s(DELTA), s(OMEGA)] = 1.0
        atil[s(OMEGA), s(OMEGA)] = -mac.d / mac.m
        atil[s(OMEGA), s(EQP)] = -i_q[m] / mac.m
        atil[s(OMEGA), s(EDP)] = -i_d[m] / mac.m
        atil[s(EQP), s(EQP)] = -1.0 / mac.td0p
        atil[s(EQP), s(EFD)] = 1.0 / mac.td0p
        atil[s(EDP), s(EDP)] = -1.0 / mac.tq0p
        atil[s(EFD), s(EFD)] = -(exc.ke + se + efd[m] * exc.be * se) / exc.te
        atil[s(EFD), s(VR)] = 1.0 / exc.te
        atil[s(VR), s(VR)] = -1.0 / exc.ta
        atil[s(VR), s(RF)] = exc.ka / exc.ta
        atil[s(VR), s(EFD)] = -exc.ka * exc.kf / (exc.tf * exc.ta)
        atil[s(RF), s(RF)] = -1.0 / exc.tf
        atil[s(RF), s(EFD)] = exc.kf / exc.tf ** 2

        # B1: currents into the differential equations
        btil[s(OMEGA), cid] = -(edp[m] + (mac.xqp - mac.xdp) * i_q[m]) / mac.m
        btil[s(OMEGA), ciq] = -(eqp[m] + (mac.xqp - mac.xdp) * i_d[m]) / mac.m
        btil[s(EQP), cid] = -(mac.xd - mac.xdp) / mac.td0p
        btil[s(EDP), ciq] = (mac.xq - mac.xqp) / mac.tq0p
        # B2: terminal voltage into the regulator
        btil[s(VR), cv] = -exc.ka / exc.ta
        # E1: inputs
        e1[s(OMEGA), 2 * m] = 1.0 / mac.m
        e1[s(VR), 2 * m + 1] = exc.ka / exc.ta

        # C1/D1/D2: stator rows
        rd, rq = idx.row_stator_d(m), idx.row_stator_q(m)
        ctil[rd, s(DELTA)] = -v * cs
        ctil[rd, s(EDP)] = 1.0
        ctil[rq, s(DELTA)] = v * sn
        ctil[rq, s(EQP)] = 1.0
        dtil[rd, cid] = -mac.rs
        dtil[rd, ciq] = mac.xqp
        dtil[rq, cid] = -mac.xdp
        dtil[rq, ciq] = -mac.rs
        dtil[rd, cth] = v * cs
        dtil[rd, cv] = -sn
        dtil[rq, cth] = -v * sn
        dtil[rq, cv] = -cs

        # C2/D3 + terminal parts of D4: generator network rows
        rp, rq2 = idx.row_net_p(b), idx.row_net_q(b)
        ctil[rp, s(DELTA)] = qt
        ctil[rq2, s(DELTA)] = -pt
        dtil[rp, cid] = v * sn
        dtil[rp, ciq] = v * cs
        dtil[rq2, cid] = v * cs
        dtil[rq2, ciq] = -v * sn
        dtil[rp, cth] += -qt
        dtil[rp, cv] += pt / v
        dtil[rq2, cth] += pt
        dtil[rq2, cv] += qt / v

    # network Jacobian into all P/Q rows (negative: rows are ... - p_net)
    jpt, jpv, jqt, jqv = injection_jacobians(ybus, vm, theta)
    rows_p = np.array([idx.row_net_p(b) for b in range(nb)])
    cols_t = idx.col_theta
    dtil[np.ix_(rows_p, cols_t)] += -jpt
    dtil[np.ix_(rows_p, cols_t + 1)] += -jpv
    dtil[np.ix_(rows_p + 1, cols_t)] += -jqt
    dtil[np.ix_(rows_p + 1, cols_t + 1)] += -jqv

    return LinearizedBlocks(atil=atil, btil=btil, ctil=ctil, dtil=dtil,
                            e1=e1, n_gen=g, n_bus=nb)


def linearize_blocks(case: NetworkCase, op: OperatingPoint) -> LinearizedBlocks:
    """Blocks of the model linearized at an operating point."""
    x, y, _ = operating_vectors(case, op)
    return assemble_blocks(case, x, y)


# ---------------------------------------------------------------------------
# state matrix and modal analysis
# ---------------------------------------------------------------------------

@dataclass
class StateMatrix:
    a: np.ndarray
    blocks: LinearizedBlocks
    dtil_lu: tuple
    rcond: float


def reduce_state_matrix(blocks: LinearizedBlocks, *,
                        cond_limit: float = 1e12) -> StateMatrix:
    """Schur complement A = Atil - Btil * Dtil^-1 * Ctil via LU solves."""
    dtil = blocks.dtil
    lu, piv = sla.lu_factor(dtil)
    anorm = np.abs(dtil).sum(axis=0).max()
    rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not np.isfinite(rcond) or rcond < 1.0 / cond_limit:
        raise SingularNetworkError(
            f"algebraic block is numerically singular (rcond={rcond:.3e})")
    w = sla.lu_solve((lu, piv), blocks.ctil)
    a = blocks.atil - blocks.btil @ w
    return StateMatrix(a=a, blocks=blocks, dtil_lu=(lu, piv), rcond=rcond)


@dataclass
class ModalResult:
    eigenvalues: np.ndarray
    eta: float
    lambda_eta: complex
    psi_eta: np.ndarray
    phi_eta: np.ndarray
    zero_filtered: np.ndarray
    margin: float
    near_defective: bool


def _select_critical(eigenvalues: np.ndarray, zero_mode_tol: float) -> int:
    """Index of the critical eigenvalue after zero-mode filtering.

    Ties within 1e-12 of the maximum real part break toward the smallest
    |Im|, then toward nonnegative Im, so the selection is deterministic
    under eigensolver reordering.
    """
    keep = np.abs(eigenvalues) > zero_mode_tol
    if not keep.any():
        raise DefectiveModeError("all eigenvalues fell inside the zero-mode filter")
    kept_idx = np.where(keep)[0]
    re = eigenvalues[kept_idx].real
    max_re = re.max()
    cands = kept_idx[re >= max_re - 1e-12]
    key = [(abs(eigenvalues[i].imag), 0 if eigenvalues[i].imag >= 0 else 1, i)
           for i in cands]
    key.sort()
    return key[0][2]


def modal_analysis(a: np.ndarray, *, zero_mode_tol: float = 1e-6,
                   degeneracy_tol: float = 1e-8) -> ModalResult:
    """Full spectrum, spectral abscissa and the critical eigentriple.

    Eigenvalues with |lambda| <= zero_mode_tol are excluded from the
    abscissa (they stem from the uniform rotor-angle-shift symmetry of a
    network with no infinite bus) and reported in ``zero_filtered``.  The
    left eigenvector comes from the transposed matrix, paired by nearest
    eigenvalue, and the pair is normalized so psi . phi = 1.
    """
    if not np.all(np.isfinite(a)):
        raise ValueError("state matrix contains non-finite entries")
    lam, vr = sla.eig(a)
    k = _select_critical(lam, zero_mode_tol)
    lam_eta = lam[k]
    phi = vr[:, k]

    lam_t, vl = sla.eig(a.T)
    j = int(np.argmin(np.abs(lam_t - lam_eta)))
    if abs(lam_t[j] - lam_eta) > 1e-8 * max(1.0, abs(lam_eta)):
        raise DefectiveModeError(
            f"cannot pair left eigenvector: nearest eigenvalue of A^T is "
            f"{lam_t[j]:.6g} vs {lam_eta:.6g}")
    psi = vl[:, j]
    c = psi @ phi
    if abs(c) < 1e-10:
        raise DefectiveModeError(
            f"critical eigenvalue is near-defective (|psi.phi| = {abs(c):.2e})")
    psi = psi / c

    others = np.delete(lam, k)
    margin = float(np.abs(others - lam_eta).min()) if others.size else np.inf
    zero_filtered = lam[np.abs(lam) <= zero_mode_tol]
    return ModalResult(eigenvalues=lam, eta=float(lam_eta.real),
                       lambda_eta=complex(lam_eta), psi_eta=psi, phi_eta=phi,
                       zero_filtered=zero_filtered, margin=margin,
                       near_defective=margin < degeneracy_tol)


def spectral_abscissa(a: np.ndarray, *, zero_mode_tol: float = 1e-6) -> float:
    """Largest real part over the retained spectrum (value only)."""
    lam = sla.eigvals(a)
    keep = np.abs(lam) > zero_mode_tol
    if not keep.any():
        raise DefectiveModeError("all eigenvalues fell inside the zero-mode filter")
    return float(lam[keep].real.max())


# ---------------------------------------------------------------------------
# derivative blocks and the closed-form gradient
# ---------------------------------------------------------------------------

class _Entries:
    """Sparse (row, col, value) accumulator for one derivative matrix."""

    __slots__ = ("rows", "cols", "vals")

    def __init__(self):
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []

    def add(self, r: int, c: int, v: float):
        self.rows.append(r)
        self.cols.append(c)
        self.vals.append(v)

    def add_dense(self, mat: np.ndarray, row_map: np.ndarray, col_map: np.ndarray):
        rr, cc = np.nonzero(mat)
        self.rows.extend(row_map[rr].tolist())
        self.cols.extend(col_map[cc].tolist())
        self.vals.extend(mat[rr, cc].tolist())

    def quad(self, left: np.ndarray, right: np.ndarray) -> complex:
        if not self.vals:
            return 0.0 + 0.0j
        r = np.asarray(self.rows)
        c = np.asarray(self.cols)
        v = np.asarray(self.vals)
        return np.sum(v * left[r] * right[c])


class _DerivBlocks:
    """d(Atil)/dx_i etc. for a single variable, in global coordinates."""

    __slots__ = ("atil", "btil", "ctil", "dtil")

    def __init__(self):
        self.atil = _Entries()
        self.btil = _Entries()
        self.ctil = _Entries()
        self.dtil = _Entries()


def _machine_context(case, idx, x, y, m):
    gen = case.generators[m]
    b = idx.gen_bus[m]
    delta = x[idx.state(m, DELTA)]
    theta = y[idx.col_theta[b]]
    v = y[idx.col_v[b]]
    i_d = y[idx.col_id(m)]
    i_q = y[idx.col_iq(m)]
    ang = delta - theta
    return dict(gen=gen, mac=gen.machine, exc=gen.exciter, b=b, v=v,
                i_d=i_d, i_q=i_q, sn=math.sin(ang), cs=math.cos(ang),
                s_del=idx.state(m, DELTA), s_om=idx.state(m, OMEGA),
                s_eqp=idx.state(m, EQP), s_edp=idx.state(m, EDP),
                s_efd=idx.state(m, EFD),
                cid=idx.col_id(m), ciq=idx.col_iq(m),
                cth=idx.col_theta[b], cv=idx.col_v[b],
                rd=idx.row_stator_d(m), rq=idx.row_stator_q(m),
                rp=idx.row_net_p(b), rq2=idx.row_net_q(b))


def _deriv_wrt_delta(ctx) -> _DerivBlocks:
    d = _DerivBlocks()
    v, sn, cs = ctx["v"], ctx["sn"], ctx["cs"]
    i_d, i_q = ctx["i_d"], ctx["i_q"]
    pt = v * (i_d * sn + i_q * cs)
    qt = v * (i_d * cs - i_q * sn)
    d.ctil.add(ctx["rd"], ctx["s_del"], v * sn)
    d.ctil.add(ctx["rq"], ctx["s_del"], v * cs)
    d.ctil.add(ctx["rp"], ctx["s_del"], -pt)
    d.ctil.add(ctx["rq2"], ctx["s_del"], -qt)
    d.dtil.add(ctx["rd"], ctx["cth"], -v * sn)
    d.dtil.add(ctx["rd"], ctx["cv"], -cs)
    d.dtil.add(ctx["rq"], ctx["cth"], -v * cs)
    d.dtil.add(ctx["rq"], ctx["cv"], sn)
    d.dtil.add(ctx["rp"], ctx["cid"], v * cs)
    d.dtil.add(ctx["rp"], ctx["ciq"], -v * sn)
    d.dtil.add(ctx["rq2"], ctx["cid"], -v * sn)
    d.dtil.add(ctx["rq2"], ctx["ciq"], -v * cs)
    d.dtil.add(ctx["rp"], ctx["cth"], pt)
    d.dtil.add(ctx["rp"], ctx["cv"], qt / v)
    d.dtil.add(ctx["rq2"], ctx["cth"], qt)
    d.dtil.add(ctx["rq2"], ctx["cv"], -pt / v)
    return d


def _deriv_wrt_id(ctx) -> _DerivBlocks:
    d = _DerivBlocks()
    mac = ctx["mac"]
    v, sn, cs = ctx["v"], ctx["sn"], ctx["cs"]
    d.atil.add(ctx["s_om"], ctx["s_edp"], -1.0 / mac.m)
    d.btil.add(ctx["s_om"], ctx["ciq"], -(mac.xqp - mac.xdp) / mac.m)
    d.ctil.add(ctx["rp"], ctx["s_del"], v * cs)
    d.ctil.add(ctx["rq2"], ctx["s_del"], -v * sn)
    d.dtil.add(ctx["rp"], ctx["cth"], -v * cs)
    d.dtil.add(ctx["rp"], ctx["cv"], sn)
    d.dtil.add(ctx["rq2"], ctx["cth"], v * sn)
    d.dtil.add(ctx["rq2"], ctx["cv"], cs)
    return d


def _deriv_wrt_iq(ctx) -> _DerivBlocks:
    d = _DerivBlocks()
    mac = ctx["mac"]
    v, sn, cs = ctx["v"], ctx["sn"], ctx["cs"]
    d.atil.add(ctx["s_om"], ctx["s_eqp"], -1.0 / mac.m)
    d.btil.add(ctx["s_om"], ctx["cid"], -(mac.xqp - mac.xdp) / mac.m)
    d.ctil.add(ctx["rp"], ctx["s_del"], -v * sn)
    d.ctil.add(ctx["rq2"], ctx["s_del"], -v * cs)
    d.dtil.add(ctx["rp"], ctx["cth"], v * sn)
    d.dtil.add(ctx["rp"], ctx["cv"], cs)
    d.dtil.add(ctx["rq2"], ctx["cth"], v * cs)
    d.dtil.add(ctx["rq2"], ctx["cv"], -sn)
    return d


def _deriv_wrt_edp(ctx) -> _DerivBlocks:
    d = _DerivBlocks()
    d.btil.add(ctx["s_om"], ctx["cid"], -1.0 / ctx["mac"].m)
    return d


def _deriv_wrt_eqp(ctx) -> _DerivBlocks:
    d = _DerivBlocks()
    d.btil.add(ctx["s_om"], ctx["ciq"], -1.0 / ctx["mac"].m)
    return d


def _deriv_wrt_efd(ctx, efd: float) -> _DerivBlocks:
    d = _DerivBlocks()
    exc = ctx["exc"]
    se = exc.saturation(efd)
    d.atil.add(ctx["s_efd"], ctx["s_efd"],
               -exc.be * se * (2.0 + exc.be * efd) / exc.te)
    return d


def _deriv_wrt_bus(case, idx, x, y, ybus, kind: str, bus: int,
                   machine_of_bus: dict) -> _DerivBlocks:
    """Derivative of the blocks along theta or V of one bus: the network
    Jacobian second derivatives plus, at a machine bus, the machine terms."""
    d = _DerivBlocks()
    theta = y[idx.col_theta]
    vm = y[idx.col_v]
    djpt, djpv, djqt, djqv = injection_jacobian_derivatives(
        ybus, vm, theta, kind, bus)
    rows_p = np.array([idx.row_net_p(b) for b in range(idx.nb)])
    d.dtil.add_dense(-djpt, rows_p, idx.col_theta)
    d.dtil.add_dense(-djpv, rows_p, idx.col_v)
    d.dtil.add_dense(-djqt, rows_p + 1, idx.col_theta)
    d.dtil.add_dense(-djqv, rows_p + 1, idx.col_v)

    m = machine_of_bus.get(bus)
    if m is None:
        return d
    ctx = _machine_context(case, idx, x, y, m)
    v, sn, cs = ctx["v"], ctx["sn"], ctx["cs"]
    i_d, i_q = ctx["i_d"], ctx["i_q"]
    pt = v * (i_d * sn + i_q * cs)
    qt = v * (i_d * cs - i_q * sn)
    if kind == "theta":
        d.ctil.add(ctx["rd"], ctx["s_del"], -v * sn)
        d.ctil.add(ctx["rq"], ctx["s_del"], -v * cs)
        d.ctil.add(ctx["rp"], ctx["s_del"], pt)
        d.ctil.add(ctx["rq2"], ctx["s_del"], qt)
        d.dtil.add(ctx["rd"], ctx["cth"], v * sn)
        d.dtil.add(ctx["rd"], ctx["cv"], cs)
        d.dtil.add(ctx["rq"], ctx["cth"], v * cs)
        d.dtil.add(ctx["rq"], ctx["cv"], -sn)
        d.dtil.add(ctx["rp"], ctx["cid"], -v * cs)
        d.dtil.add(ctx["rp"], ctx["ciq"], v * sn)
        d.dtil.add(ctx["rq2"], ctx["cid"], v * sn)
        d.dtil.add(ctx["rq2"], ctx["ciq"], v * cs)
        d.dtil.add(ctx["rp"], ctx["cth"], -pt)
        d.dtil.add(ctx["rp"], ctx["cv"], -qt / v)
        d.dtil.add(ctx["rq2"], ctx["cth"], -qt)
        d.dtil.add(ctx["rq2"], ctx["cv"], pt / v)
    else:  # kind == "v"
        d.ctil.add(ctx["rd"], ctx["s_del"], -cs)
        d.ctil.add(ctx["rq"], ctx["s_del"], sn)
        d.ctil.add(ctx["rp"], ctx["s_del"], qt / v)
        d.ctil.add(ctx["rq2"], ctx["s_del"], -pt / v)
        d.dtil.add(ctx["rd"], ctx["cth"], cs)
        d.dtil.add(ctx["rq"], ctx["cth"], -sn)
        d.dtil.add(ctx["rp"], ctx["cid"], sn)
        d.dtil.add(ctx["rp"], ctx["ciq"], cs)
        d.dtil.add(ctx["rq2"], ctx["cid"], cs)
        d.dtil.add(ctx["rq2"], ctx["ciq"], -sn)
        d.dtil.add(ctx["rp"], ctx["cth"], -qt / v)
        d.dtil.add(ctx["rq2"], ctx["cth"], pt / v)
    return d


def iter_block_derivatives(case: NetworkCase, x: np.ndarray, y: np.ndarray,
                           ybus: np.ndarray | None = None):
    """Yield (group, index, derivative blocks) for every variable of the
    dispatch/stability vector with a nonzero block derivative.

    P_G and Q_G never enter the blocks, so they are not yielded; their
    gradient components are exactly zero.
    """
    idx = DynamicIndex(case)
    if ybus is None:
        ybus = build_admittance(case)
    machine_of_bus = {int(b): m for m, b in enumerate(idx.gen_bus)}

    for m in range(idx.g):
        ctx = _machine_context(case, idx, x, y, m)
        yield "delta", m, _deriv_wrt_delta(ctx)
        yield "edp", m, _deriv_wrt_edp(ctx)
        yield "eqp", m, _deriv_wrt_eqp(ctx)
        yield "id", m, _deriv_wrt_id(ctx)
        yield "iq", m, _deriv_wrt_iq(ctx)
        yield "efd", m, _deriv_wrt_efd(ctx, x[idx.state(m, EFD)])
    for b in range(idx.nb):
        yield "theta", b, _deriv_wrt_bus(case, idx, x, y, ybus, "theta", b,
                                         machine_of_bus)
        yield "v", b, _deriv_wrt_bus(case, idx, x, y, ybus, "v", b,
                                     machine_of_bus)


@dataclass
class SpectralGradient:
    """Real gradient of the spectral abscissa over the variable groups."""

    d_pg: np.ndarray
    d_qg: np.ndarray
    d_v: np.ndarray
    d_theta: np.ndarray
    d_delta: np.ndarray
    d_edp: np.ndarray
    d_eqp: np.ndarray
    d_id: np.ndarray
    d_iq: np.ndarray
    d_efd: np.ndarray
    margin: float
    near_defective: bool

    def group(self, name: str) -> np.ndarray:
        return getattr(self, {"pg": "d_pg", "qg": "d_qg", "v": "d_v",
                              "theta": "d_theta", "delta": "d_delta",
                              "edp": "d_edp", "eqp": "d_eqp", "id": "d_id",
                              "iq": "d_iq", "efd": "d_efd"}[name])


def spectral_abscissa_gradient(case: NetworkCase, op: OperatingPoint, *,
                               state: StateMatrix | None = None,
                               modal: ModalResult | None = None,
                               zero_mode_tol: float = 1e-6,
                               degeneracy_tol: float = 1e-8) -> SpectralGradient:
    """Closed-form gradient of the spectral abscissa.

    Uses the critical eigentriple and the chain rule through the Schur
    complement: for each variable the four derivative blocks are contracted
    against the left/right eigenvectors, with Dtil handled through its LU
    factors.  A ``near_defective`` flag is carried in the result when the
    critical eigenvalue has margin below ``degeneracy_tol``; the gradient
    is still returned (nearby-point sampling is the caller's mitigation).
    """
    x, y, _ = operating_vectors(case, op)
    ybus = build_admittance(case)
    if state is None:
        blocks = assemble_blocks(case, x, y, ybus)
        state = reduce_state_matrix(blocks)
    if modal is None:
        modal = modal_analysis(state.a, zero_mode_tol=zero_mode_tol,
                               degeneracy_tol=degeneracy_tol)
    psi, phi = modal.psi_eta, modal.phi_eta
    blocks = state.blocks
    lu = state.dtil_lu

    def solve(bvec, trans=0):
        if np.iscomplexobj(bvec):
            return (sla.lu_solve(lu, bvec.real, trans=trans)
                    + 1j * sla.lu_solve(lu, bvec.imag, trans=trans))
        return sla.lu_solve(lu, bvec, trans=trans)

    w = solve(blocks.ctil @ phi)           # Dtil^-1 Ctil phi
    vrow = solve(blocks.btil.T @ psi, trans=1)  # (psi Btil Dtil^-1)^T

    idx = DynamicIndex(case)
    out = SpectralGradient(
        d_pg=np.zeros(idx.g), d_qg=np.zeros(idx.g),
        d_v=np.zeros(idx.nb), d_theta=np.zeros(idx.nb),
        d_delta=np.zeros(idx.g), d_edp=np.zeros(idx.g),
        d_eqp=np.zeros(idx.g), d_id=np.zeros(idx.g), d_iq=np.zeros(idx.g),
        d_efd=np.zeros(idx.g), margin=modal.margin,
        near_defective=modal.near_defective)

    for group, i, d in iter_block_derivatives(case, x, y, ybus):
        dlam = (d.atil.quad(psi, phi) - d.btil.quad(psi, w)
                + d.dtil.quad(vrow, w) - d.ctil.quad(vrow, phi))
        out.group(group)[i] = dlam.real
    return out


def finite_difference_gradient(case: NetworkCase, op: OperatingPoint,
                               group: str, index: int, step: float = 1e-6,
                               *, zero_mode_tol: float = 1e-6) -> float:
    """Central-difference estimate of d(eta)/dx for one variable.

    The variable is perturbed in place and the state matrix rebuilt from
    the perturbed vector as-is, matching the partial derivative computed by
    the closed form.  Variables absent from the blocks (P_G, Q_G) therefore
    give exactly zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    vals = []
    for sgn in (+1.0, -1.0):
        pop = op.perturbed(group, index, sgn * step)
        x, y, _ = operating_vectors(case, pop)
        blocks = assemble_blocks(case, x, y)
        state = reduce_state_matrix(blocks)
        vals.append(spectral_abscissa(state.a, zero_mode_tol=zero_mode_tol))
    return (vals[0] - vals[1]) / (2.0 * step)
