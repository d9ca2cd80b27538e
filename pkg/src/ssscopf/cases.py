"""Network case data: static grid records, machine/exciter dynamics, admittance.

All electrical quantities are stored in per-unit on the system MVA base
(``base_mva``).  Cost coefficients are the exception: they are $/MW based,
so cost evaluation converts dispatch back to MW.  Angles are radians.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BusRecord",
    "LineRecord",
    "GeneratorRecord",
    "MachineDynamics",
    "ExciterParams",
    "NetworkCase",
    "CaseError",
    "Diagnostic",
    "load_case",
    "save_case",
    "validate_case",
    "build_admittance",
]


class CaseError(Exception):
    """Raised when a case file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class BusRecord:
    """A single bus: load, voltage band and (optionally) the angle reference."""

    id: int
    kind: str  # "generator" or "load"
    p_load: float = 0.0
    q_load: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    is_angle_reference: bool = False


@dataclass(frozen=True)
class LineRecord:
    """Pi-model branch between two buses.

    ``series_admittance`` is 1/(r + jx); ``shunt_admittance_half`` is the
    charging admittance at each terminal (jB/2 for a plain line).
    ``i_max`` bounds the from-side current magnitude.
    """

    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_admittance_half: complex = 0j
    i_max: float = 10.0


@dataclass(frozen=True)
class MachineDynamics:
    """Two-axis synchronous machine constants (per-unit, machine on system base)."""

    m: float          # inertia, 2H/omega_s  [s^2/rad]
    d: float          # damping coefficient
    xd: float         # d-axis synchronous reactance
    xq: float         # q-axis synchronous reactance
    xdp: float        # d-axis transient reactance
    xqp: float        # q-axis transient reactance
    td0p: float       # d-axis open-circuit time constant [s]
    tq0p: float       # q-axis open-circuit time constant [s]
    rs: float = 0.0   # armature resistance
    omega_s: float = 2.0 * math.pi * 60.0  # rated speed [rad/s]


@dataclass(frozen=True)
class ExciterParams:
    """IEEE DC-1 exciter constants with saturation Se(Efd) = ae*exp(be*Efd)."""

    ka: float
    ta: float
    ke: float
    te: float
    kf: float
    tf: float
    ae: float = 0.0
    be: float = 0.0

    def saturation(self, efd: float) -> float:
        return self.ae * math.exp(self.be * efd)


@dataclass(frozen=True)
class GeneratorRecord:
    """Dispatchable unit with quadratic cost and its dynamic models."""

    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    a2: float
    a1: float
    a0: float
    machine: MachineDynamics = None
    exciter: ExciterParams = None


@dataclass(frozen=True)
class Diagnostic:
    """A validation finding: where it is and what is wrong."""

    locator: str
    message: str

    def __str__(self) -> str:
        return f"{self.locator}: {self.message}"


@dataclass(frozen=True)
class NetworkCase:
    """Immutable container for one grid: buses, lines and generators."""

    base_mva: float
    buses: tuple[BusRecord, ...]
    lines: tuple[LineRecord, ...]
    generators: tuple[GeneratorRecord, ...]
    name: str = ""
    _bus_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_bus_index", {b.id: i for i, b in enumerate(self.buses)}
        )

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    def bus_number(self, bus_id: int) -> int:
        """Internal 0-based index of a bus id."""
        return self._bus_index[bus_id]

    def gen_bus_numbers(self) -> np.ndarray:
        return np.array([self.bus_number(g.bus) for g in self.generators], dtype=int)

    def load_bus_numbers(self) -> np.ndarray:
        gen_set = {self.bus_number(g.bus) for g in self.generators}
        return np.array([i for i in range(self.n_bus) if i not in gen_set], dtype=int)

    @property
    def reference_bus(self) -> int:
        for i, b in enumerate(self.buses):
            if b.is_angle_reference:
                return i
        raise CaseError("no angle reference bus")

    def with_load(self, bus_id: int, dp: float, dq: float) -> "NetworkCase":
        """Copy of this case with the load at ``bus_id`` shifted by (dp, dq) pu."""
        buses = []
        for b in self.buses:
            if b.id == bus_id:
                buses.append(
                    BusRecord(b.id, b.kind, b.p_load + dp, b.q_load + dq,
                              b.v_min, b.v_max, b.is_angle_reference)
                )
            else:
                buses.append(b)
        return NetworkCase(self.base_mva, tuple(buses), self.lines,
                           self.generators, self.name)


def validate_case(case: NetworkCase) -> list[Diagnostic]:
    """Check every record invariant; returns an empty list iff the case is sound."""
    out: list[Diagnostic] = []
    seen_ids = set()
    n_ref = 0
    for b in case.buses:
        loc = f"bus {b.id}"
        if b.id in seen_ids:
            out.append(Diagnostic(loc, "duplicate bus id"))
        seen_ids.add(b.id)
        if b.kind not in ("generator", "load"):
            out.append(Diagnostic(loc, f"unknown kind {b.kind!r}"))
        if not (0.0 < b.v_min < b.v_max):
            out.append(Diagnostic(loc, f"voltage band violates 0 < {b.v_min} < {b.v_max}"))
        if b.is_angle_reference:
            n_ref += 1
    if n_ref != 1:
        out.append(Diagnostic("case", f"expected exactly one angle reference bus, found {n_ref}"))

    for k, ln in enumerate(case.lines):
        loc = f"line {k} ({ln.from_bus}-{ln.to_bus})"
        if ln.from_bus == ln.to_bus:
            out.append(Diagnostic(loc, "from_bus equals to_bus"))
        for end in (ln.from_bus, ln.to_bus):
            if end not in seen_ids:
                out.append(Diagnostic(loc, f"references unknown bus {end}"))
        if not ln.i_max > 0:
            out.append(Diagnostic(loc, f"i_max must be positive, got {ln.i_max}"))

    gen_buses = set()
    bus_kind = {b.id: b.kind for b in case.buses}
    for k, g in enumerate(case.generators):
        loc = f"generator {k} (bus {g.bus})"
        if g.bus not in seen_ids:
            out.append(Diagnostic(loc, f"references unknown bus {g.bus}"))
        elif bus_kind[g.bus] != "generator":
            out.append(Diagnostic(loc, f"bus {g.bus} is not of kind generator"))
        if g.bus in gen_buses:
            out.append(Diagnostic(loc, f"second generator at bus {g.bus}"))
        gen_buses.add(g.bus)
        if g.p_min > g.p_max:
            out.append(Diagnostic(loc, f"p_min {g.p_min} > p_max {g.p_max}"))
        if g.q_min > g.q_max:
            out.append(Diagnostic(loc, f"q_min {g.q_min} > q_max {g.q_max}"))
        if g.a2 < 0:
            out.append(Diagnostic(loc, f"quadratic cost coefficient a2 = {g.a2} < 0"))
        mac, exc = g.machine, g.exciter
        if mac is None or exc is None:
            out.append(Diagnostic(loc, "missing machine or exciter data"))
            continue
        if not mac.m > 0:
            out.append(Diagnostic(loc, f"inertia m = {mac.m} must be positive"))
        if not (mac.td0p > 0 and mac.tq0p > 0):
            out.append(Diagnostic(loc, "open-circuit time constants must be positive"))
        if not (mac.xd >= mac.xdp > 0):
            out.append(Diagnostic(loc, f"transient-reactance ordering xd >= xdp > 0 violated "
                                       f"(xd={mac.xd}, xdp={mac.xdp})"))
        if not (mac.xq >= mac.xqp > 0):
            out.append(Diagnostic(loc, f"transient-reactance ordering xq >= xqp > 0 violated "
                                       f"(xq={mac.xq}, xqp={mac.xqp})"))
        if not (exc.te > 0 and exc.ta > 0 and exc.tf > 0):
            out.append(Diagnostic(loc, "exciter time constants must be positive"))
        if not exc.ka > 0:
            out.append(Diagnostic(loc, f"regulator gain ka = {exc.ka} must be positive"))
        if exc.ae < 0 or exc.be < 0:
            out.append(Diagnostic(loc, "saturation coefficients must be nonnegative"))

    # generator buses must actually host a generator
    for b in case.buses:
        if b.kind == "generator" and b.id not in gen_buses:
            out.append(Diagnostic(f"bus {b.id}", "kind generator but no generator attached"))

    if not out and not _connected(case):
        out.append(Diagnostic("case", "line graph is not connected"))
    return out


def _connected(case: NetworkCase) -> bool:
    if case.n_bus == 0:
        return False
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for ln in case.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    stack = [case.buses[0].id]
    seen = set()
    while stack:
        u = stack.pop()
        if u in seen:
            continue
        seen.add(u)
        stack.extend(adj[u] - seen)
    return len(seen) == case.n_bus


def build_admittance(case: NetworkCase) -> np.ndarray:
    """Dense complex bus admittance matrix.

    Diagonal entries collect series plus half-shunt admittance of every
    incident line; off-diagonals are minus the series admittance of each
    connecting line (entries accumulate for parallel lines).
    """
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for ln in case.lines:
        i = case.bus_number(ln.from_bus)
        j = case.bus_number(ln.to_bus)
        ys = ln.series_admittance
        ysh = ln.shunt_admittance_half
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
        y[i, j] -= ys
        y[j, i] -= ys
    return y


# ---------------------------------------------------------------------------
# JSON case files
# ---------------------------------------------------------------------------

def _complex_from(obj) -> complex:
    if isinstance(obj, (int, float)):
        return complex(obj, 0.0)
    if isinstance(obj, (list, tuple)) and len(obj) == 2:
        return complex(obj[0], obj[1])
    if isinstance(obj, dict):
        return complex(obj.get("re", 0.0), obj.get("im", 0.0))
    raise CaseError(f"cannot parse complex value {obj!r}")


def _complex_to(z: complex):
    return [z.real, z.imag]


def load_case(path: str | Path) -> NetworkCase:
    """Read a case file, validate it and return the immutable case.

    The file is UTF-8 JSON with top-level keys ``base_mva``, ``buses``,
    ``lines`` and ``generators``; see the bundled ``data/wscc9.json`` for
    the exact field layout.  Raises :class:`CaseError` on parse or
    validation failure with a message naming the offending record.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise CaseError(f"cannot parse case file {path}: {err}") from err

    try:
        buses = tuple(
            BusRecord(
                id=int(b["id"]),
                kind=str(b["kind"]),
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                v_min=float(b.get("v_min", 0.9)),
                v_max=float(b.get("v_max", 1.1)),
                is_angle_reference=bool(b.get("angle_reference", False)),
            )
            for b in raw["buses"]
        )
        lines = tuple(
            LineRecord(
                from_bus=int(ln["from_bus"]),
                to_bus=int(ln["to_bus"]),
                series_admittance=_complex_from(ln["series_admittance"]),
                shunt_admittance_half=_complex_from(ln.get("shunt_admittance_half", 0.0)),
                i_max=float(ln.get("i_max", 10.0)),
            )
            for ln in raw["lines"]
        )
        gens = []
        for g in raw["generators"]:
            cost = g["cost"]
            lim = g["limits"]
            mac = g["machine"]
            exc = g["exciter"]
            gens.append(
                GeneratorRecord(
                    bus=int(g["bus"]),
                    p_min=float(lim["pmin"]),
                    p_max=float(lim["pmax"]),
                    q_min=float(lim["qmin"]),
                    q_max=float(lim["qmax"]),
                    a2=float(cost["a2"]),
                    a1=float(cost["a1"]),
                    a0=float(cost["a0"]),
                    machine=MachineDynamics(
                        m=float(mac["M"]),
                        d=float(mac["D"]),
                        xd=float(mac["xd"]),
                        xq=float(mac["xq"]),
                        xdp=float(mac["xdp"]),
                        xqp=float(mac["xqp"]),
                        td0p=float(mac["td0p"]),
                        tq0p=float(mac["tq0p"]),
                        rs=float(mac.get("rs", 0.0)),
                        omega_s=float(mac.get("omega_s", 2.0 * math.pi * 60.0)),
                    ),
                    exciter=ExciterParams(
                        ka=float(exc["ka"]),
                        ta=float(exc["ta"]),
                        ke=float(exc["ke"]),
                        te=float(exc["te"]),
                        kf=float(exc["kf"]),
                        tf=float(exc["tf"]),
                        ae=float(exc.get("ae", 0.0)),
                        be=float(exc.get("be", 0.0)),
                    ),
                )
            )
        case = NetworkCase(
            base_mva=float(raw["base_mva"]),
            buses=buses,
            lines=lines,
            generators=tuple(gens),
            name=str(raw.get("name", path.stem)),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise CaseError(f"malformed case file {path}: {err!r}") from err

    problems = validate_case(case)
    if problems:
        listing = "; ".join(str(p) for p in problems)
        raise CaseError(f"case file {path} failed validation: {listing}")
    return case


def save_case(case: NetworkCase, path: str | Path) -> None:
    """Write a case back to the JSON schema read by :func:`load_case`."""
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "angle_reference": b.is_angle_reference,
            }
            for b in case.buses
        ],
        "lines": [
            {
                "from_bus": ln.from_bus,
                "to_bus": ln.to_bus,
                "series_admittance": _complex_to(ln.series_admittance),
                "shunt_admittance_half": _complex_to(ln.shunt_admittance_half),
                "i_max": ln.i_max,
            }
            for ln in case.lines
        ],
        "generators": [
            {
                "bus": g.bus,
                "cost": {"a2": g.a2, "a1": g.a1, "a0": g.a0},
                "limits": {"pmin": g.p_min, "pmax": g.p_max,
                           "qmin": g.q_min, "qmax": g.q_max},
                "machine": {
                    "M": g.machine.m, "D": g.machine.d,
                    "xd": g.machine.xd, "xq": g.machine.xq,
                    "xdp": g.machine.xdp, "xqp": g.machine.xqp,
                    "td0p": g.machine.td0p, "tq0p": g.machine.tq0p,
                    "rs": g.machine.rs, "omega_s": g.machine.omega_s,
                },
                "exciter": {
                    "ka": g.exciter.ka, "ta": g.exciter.ta,
                    "ke": g.exciter.ke, "te": g.exciter.te,
                    "kf": g.exciter.kf, "tf": g.exciter.tf,
                    "ae": g.exciter.ae, "be": g.exciter.be,
                },
            }
            for g in case.generators
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def bundled_case_path(name: str) -> Path:
    """Path of a case shipped with the package (e.g. ``wscc9``)."""
    p = Path(__file__).parent / "data" / f"{name}.json"
    if not p.exists():
        raise CaseError(f"no bundled case named {name!r}")
    return p


def load_bundled(name: str) -> NetworkCase:
    return load_case(bundled_case_path(name))
