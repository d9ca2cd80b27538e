"""Newton power flow used to manufacture dispatch points that satisfy the
network equations (test fixtures, sensitivity spot checks, CLI utilities).

The angle-reference bus doubles as the slack: its generator absorbs the
active-power mismatch.  All other generator buses hold P and |V|; load
buses hold P and Q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cases import NetworkCase, build_admittance
from .netfuncs import injections, injection_jacobians

__all__ = ["PowerFlowError", "PowerFlowResult", "solve_power_flow"]


class PowerFlowError(Exception):
    pass


@dataclass
class PowerFlowResult:
    v: np.ndarray          # per-bus voltage magnitude
    theta: np.ndarray      # per-bus angle, reference at 0
    p_gen: np.ndarray      # per-generator active output (slack solved)
    q_gen: np.ndarray      # per-generator reactive output (solved)
    iterations: int
    max_mismatch: float


def solve_power_flow(case: NetworkCase, p_set: np.ndarray, v_set: np.ndarray,
                     *, tol: float = 1e-10, max_iter: int = 40) -> PowerFlowResult:
    """Solve the network equations for the given generator setpoints.

    ``p_set`` holds per-generator active power (the entry of the slack
    machine is used only as an initial guess); ``v_set`` holds terminal
    voltage magnitudes for every generator bus.
    """
    ybus = build_admittance(case)
    nb = case.n_bus
    gen_bus = case.gen_bus_numbers()
    ref = case.reference_bus
    if ref not in set(gen_bus.tolist()):
        raise PowerFlowError("angle-reference bus must host a generator")

    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])
    p_inj_spec = -p_load.copy()
    for g, b in enumerate(gen_bus):
        p_inj_spec[b] += p_set[g]

    is_gen_bus = np.zeros(nb, dtype=bool)
    is_gen_bus[gen_bus] = True
    pq_buses = np.where(~is_gen_bus)[0]
    p_rows = np.array([i for i in range(nb) if i != ref], dtype=int)

    v = np.ones(nb)
    v[gen_bus] = v_set
    theta = np.zeros(nb)

    for it in range(1, max_iter + 1):
        p_net, q_net = injections(ybus, v, theta)
        mis_p = p_inj_spec[p_rows] - p_net[p_rows]
        mis_q = (-q_load - q_net)[pq_buses]
        mismatch = np.concatenate([mis_p, mis_q])
        worst = np.abs(mismatch).max() if mismatch.size else 0.0
        if worst < tol:
            p_gen = np.array([p_set[g] for g in range(case.n_gen)])
            q_gen = np.empty(case.n_gen)
            for g, b in enumerate(gen_bus):
                q_gen[g] = q_net[b] + q_load[b]
                if b == ref:
                    p_gen[g] = p_net[b] + p_load[b]
            return PowerFlowResult(v, theta, p_gen, q_gen, it - 1, worst)

        jpt, jpv, jqt, jqv = injection_jacobians(ybus, v, theta)
        jac = np.block([
            [jpt[np.ix_(p_rows, p_rows)], jpv[np.ix_(p_rows, pq_buses)]],
            [jqt[np.ix_(pq_buses, p_rows)], jqv[np.ix_(pq_buses, pq_buses)]],
        ])
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as err:
            raise PowerFlowError(f"singular power-flow Jacobian: {err}") from err
        theta[p_rows] += step[: len(p_rows)]
        v[pq_buses] += step[len(p_rows):]
        if np.any(v <= 0):
            raise PowerFlowError("voltage magnitude collapsed below zero")

    raise PowerFlowError(
        f"power flow did not converge in {max_iter} iterations "
        f"(worst mismatch {worst:.3e})"
    )
