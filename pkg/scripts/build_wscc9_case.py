"""Regenerate the bundled WSCC 3-machine 9-bus case file.

Network, load and machine/exciter data follow the classic WSCC test system
as printed in Sauer & Pai, "Power System Dynamics and Stability" (two-axis
machines with IEEE DC-1 exciters, 100 MVA base, 60 Hz).  Cost coefficients
and operating limits follow the published SSSC-OPF study setup for this
system; limits not printed anywhere are chosen so the unconstrained optimum
reproduces the published base-case dispatch (see README).
"""

import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ssscopf.cases import (BusRecord, ExciterParams, GeneratorRecord,
                           LineRecord, MachineDynamics, NetworkCase,
                           save_case, validate_case)

OMEGA_S = 2.0 * math.pi * 60.0

# fbus, tbus, r, x, total line charging b
LINES = [
    (1, 4, 0.0, 0.0576, 0.0),
    (4, 5, 0.01, 0.085, 0.176),
    (5, 7, 0.032, 0.161, 0.306),
    (2, 7, 0.0, 0.0625, 0.0),
    (7, 8, 0.0085, 0.072, 0.149),
    (8, 9, 0.0119, 0.1008, 0.209),
    (3, 9, 0.0, 0.0586, 0.0),
    (6, 9, 0.039, 0.17, 0.358),
    (4, 6, 0.017, 0.092, 0.158),
]

# bus id -> (p_load, q_load) pu on 100 MVA
LOADS = {5: (1.25, 0.50), 6: (0.90, 0.30), 8: (1.00, 0.35)}

V_MIN, V_MAX = 0.95, 1.045
I_MAX = 3.0

# H [s], D, xd, xq, xdp, xqp, td0p [s], tq0p [s]   (Sauer & Pai)
MACHINES = [
    (23.64, 0.0, 0.1460, 0.0969, 0.0608, 0.0969, 8.96, 0.310),
    (6.40, 0.0, 0.8958, 0.8645, 0.1198, 0.1969, 6.00, 0.535),
    (3.01, 0.0, 1.3125, 1.2578, 0.1813, 0.2500, 5.89, 0.600),
]

EXCITER = ExciterParams(ka=20.0, ta=0.2, ke=1.0, te=0.314,
                        kf=0.063, tf=0.35, ae=0.0039, be=1.555)

# a2 [$/MW^2], a1 [$/MW], a0 [$]
COSTS = [(9.76e-4, 14.712, 0.0), (7.20e-4, 11.290, 0.0), (5.46e-4, 8.001, 0.0)]

# pmin, pmax, qmin, qmax  (pu); the G3 reactive cap binds at the reference
# operating points and pins the base-case voltage profile
LIMITS = [
    (0.25, 3.0, -1.0, 1.0),
    (0.25, 3.0, -1.0, 1.0),
    (0.25, 3.0, -1.0, 0.20),
]


def build() -> NetworkCase:
    buses = []
    for bid in range(1, 10):
        p, q = LOADS.get(bid, (0.0, 0.0))
        buses.append(BusRecord(
            id=bid,
            kind="generator" if bid <= 3 else "load",
            p_load=p, q_load=q,
            v_min=V_MIN, v_max=V_MAX,
            is_angle_reference=(bid == 1),
        ))
    lines = []
    for f, t, r, x, b in LINES:
        lines.append(LineRecord(
            from_bus=f, to_bus=t,
            series_admittance=1.0 / complex(r, x),
            shunt_admittance_half=complex(0.0, b / 2.0),
            i_max=I_MAX,
        ))
    gens = []
    for i in range(3):
        h, d, xd, xq, xdp, xqp, td0p, tq0p = MACHINES[i]
        a2, a1, a0 = COSTS[i]
        pmin, pmax, qmin, qmax = LIMITS[i]
        gens.append(GeneratorRecord(
            bus=i + 1, p_min=pmin, p_max=pmax, q_min=qmin, q_max=qmax,
            a2=a2, a1=a1, a0=a0,
            machine=MachineDynamics(m=2.0 * h / OMEGA_S, d=d, xd=xd, xq=xq,
                                    xdp=xdp, xqp=xqp, td0p=td0p, tq0p=tq0p,
                                    rs=0.0, omega_s=OMEGA_S),
            exciter=EXCITER,
        ))
    case = NetworkCase(base_mva=100.0, buses=tuple(buses), lines=tuple(lines),
                       generators=tuple(gens), name="wscc9")
    problems = validate_case(case)
    if problems:
        raise SystemExit("\n".join(str(p) for p in problems))
    return case


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "ssscopf" / "data" / "wscc9.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_case(build(), out)
    print(f"wrote {out}")
