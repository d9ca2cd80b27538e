"""Nonlinear time-domain simulation of the machine/exciter/network DAE.

Implicit trapezoidal integration of the differential states with a
simultaneous Newton solve of the algebraic network equations; the Newton
Jacobian reuses the analytic linearization blocks.  Used to validate
dispatch solutions: equilibrium hold, response to a step change in a
constant-power load, and empirical decay-rate extraction from the rotor
frequency envelope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cases import NetworkCase, build_admittance
from . import smallsignal as ss

__all__ = ["SimConfig", "Disturbance", "Trajectory", "SimulationError",
           "dae_step", "simulate", "decay_rate_estimate"]


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class Disturbance:
    """Step change of a constant-power load."""

    bus: int                 # bus id
    dp: float = 0.0          # active load step, per-unit
    dq: float = 0.0
    time: float = 1.0        # application instant [s]


@dataclass
class SimConfig:
    horizon: float = 10.0
    dt: float = 0.01
    disturbance: Disturbance | None = None
    newton_tol: float = 1e-9
    newton_max_iter: int = 20

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < self.dt:
            raise ValueError("need dt > 0 and horizon >= dt")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")


@dataclass
class Trajectory:
    time: np.ndarray                 # (n_step + 1,)
    states: np.ndarray               # (n_step + 1, 7g)
    algebraic: np.ndarray            # (n_step + 1, 2g + 2nb)
    omega: np.ndarray                # (n_step + 1, g) rotor speeds [rad/s]
    omega_s: float
    complete: bool = True

    def to_csv(self, path) -> None:
        g = self.omega.shape[1]
        header = "t," + ",".join(f"omega_{i + 1}" for i in range(g))
        data = np.column_stack([self.time, self.omega])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def dae_step(case: NetworkCase, x: np.ndarray, y: np.ndarray, u: np.ndarray,
             dt: float, *, tol: float = 1e-9, max_iter: int = 20,
             ybus: np.ndarray | None = None):
    """One implicit-trapezoidal step of the DAE.

    Solves  x+ - x - dt/2 * (f(x+, y+) + f(x, y)) = 0,  0 = g(x+, y+)
    by full Newton with the analytic block Jacobian.  Returns (x+, y+).
    """
    if ybus is None:
        ybus = build_admittance(case)
    f0, _ = ss.dynamic_residuals(case, x, y, u, ybus)
    ns = len(x)
    xn, yn = x.copy(), y.copy()
    for _ in range(max_iter):
        fn, gn = ss.dynamic_residuals(case, xn, yn, u, ybus)
        res_x = xn - x - 0.5 * dt * (fn + f0)
        res = np.concatenate([res_x, gn])
        worst = np.abs(res).max()
        if worst <= tol:
            return xn, yn
        blocks = ss.assemble_blocks(case, xn, yn, ybus)
        jac = np.block([
            [np.eye(ns) - 0.5 * dt * blocks.atil, -0.5 * dt * blocks.btil],
            [blocks.ctil, blocks.dtil],
        ])
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as err:
            raise SimulationError(f"singular Newton matrix: {err}") from err
        xn -= step[:ns]
        yn -= step[ns:]
    raise SimulationError(
        f"Newton did not reach {tol:g} in {max_iter} iterations "
        f"(residual {worst:.3e})")


def _resolve_algebraic(case, x, y, *, tol, max_iter, ybus):
    """Re-solve the network equations at frozen states (post-event jump)."""
    yn = y.copy()
    u_dummy = np.zeros(2 * case.n_gen)
    for _ in range(max_iter):
        _, gn = ss.dynamic_residuals(case, x, yn, u_dummy, ybus)
        if np.abs(gn).max() <= tol:
            return yn
        blocks = ss.assemble_blocks(case, x, yn, ybus)
        try:
            yn -= np.linalg.solve(blocks.dtil, gn)
        except np.linalg.LinAlgError as err:
            raise SimulationError(f"singular network Jacobian: {err}") from err
    raise SimulationError("algebraic re-solve did not converge after the event")


def simulate(case: NetworkCase, op: ss.OperatingPoint,
             config: SimConfig) -> Trajectory:
    """Integrate from an equilibrium, optionally applying a load step.

    The initial point must satisfy the model equations to 1e-6.  On a step
    failure the partial trajectory is attached to the raised error.
    """
    x, y, u = ss.operating_vectors(case, op)
    ybus = build_admittance(case)
    f0, g0 = ss.dynamic_residuals(case, x, y, u, ybus)
    worst = max(np.abs(f0).max(), np.abs(g0).max())
    if worst > 1e-6:
        raise SimulationError(
            f"initial point is not an equilibrium (residual {worst:.3e})")

    n_step = int(round(config.horizon / config.dt))
    times = np.arange(n_step + 1) * config.dt
    states = np.empty((n_step + 1, len(x)))
    alg = np.empty((n_step + 1, len(y)))
    states[0], alg[0] = x, y

    active_case, active_ybus = case, ybus
    applied = config.disturbance is None
    for step in range(1, n_step + 1):
        t_next = times[step]
        if not applied and t_next >= config.disturbance.time:
            active_case = case.with_load(config.disturbance.bus,
                                         config.disturbance.dp,
                                         config.disturbance.dq)
            active_ybus = build_admittance(active_case)
            y = _resolve_algebraic(active_case, x, y, tol=config.newton_tol,
                                   max_iter=config.newton_max_iter,
                                   ybus=active_ybus)
            applied = True
        try:
            x, y = dae_step(active_case, x, y, u, config.dt,
                            tol=config.newton_tol,
                            max_iter=config.newton_max_iter, ybus=active_ybus)
        except SimulationError as err:
            traj = _build_trajectory(case, times[:step], states[:step],
                                     alg[:step], complete=False)
            err.trajectory = traj
            raise
        states[step], alg[step] = x, y
    return _build_trajectory(case, times, states, alg, complete=True)


def _build_trajectory(case, times, states, alg, complete):
    omega = states[:, ss.OMEGA::ss.N_STATES].copy()
    omega_s = case.generators[0].machine.omega_s
    return Trajectory(time=times.copy(), states=states.copy(),
                      algebraic=alg.copy(), omega=omega, omega_s=omega_s,
                      complete=complete)


def decay_rate_estimate(trajectory: Trajectory, window: tuple[float, float],
                        *, min_signal: float = 1e-12) -> float:
    """Least-squares slope of the log peak envelope of the worst rotor
    frequency deviation over the window [1/s]; negative means decay."""
    t0, t1 = window
    mask = (trajectory.time >= t0) & (trajectory.time <= t1)
    t = trajectory.time[mask]
    sig = np.abs(trajectory.omega[mask] - trajectory.omega_s).max(axis=1)
    if len(sig) < 10:
        raise ValueError("window holds fewer than 10 samples")
    if sig.max() < min_signal:
        raise ValueError("signal amplitude below the fit floor")
    interior = (sig[1:-1] >= sig[:-2]) & (sig[1:-1] >= sig[2:])
    peaks = np.where(interior)[0] + 1
    peaks = peaks[sig[peaks] > min_signal]
    if len(peaks) < 3:
        raise ValueError("fewer than 3 envelope peaks in the window")
    coeffs = np.polyfit(t[peaks], np.log(sig[peaks]), 1)
    return float(coeffs[0])
