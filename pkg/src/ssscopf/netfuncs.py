"""Bus-injection functions of the admittance network in complex form.

Conventions: ``v``/``theta`` are magnitude and angle arrays over all buses,
``ybus`` the dense complex admittance matrix.  ``p + jq`` returned by
:func:`injections` is the complex power flowing from each bus *into* the
network, so a load bus satisfies ``-p_load - p_net = 0``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "complex_voltages",
    "injections",
    "injection_jacobians",
    "injection_jacobian_derivatives",
]


def complex_voltages(v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return v * np.exp(1j * theta)


def injections(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray):
    """Active/reactive power injected into the network at every bus."""
    vc = complex_voltages(v, theta)
    s = vc * np.conj(ybus @ vc)
    return s.real, s.imag


def injection_jacobians(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray):
    """First partial derivatives of the injections.

    Returns ``(jpt, jpv, jqt, jqv)`` where ``jpt[i, k] = dP_i/dtheta_k`` and
    ``jpv[i, k] = dP_i/dV_k`` (likewise ``jq*`` for reactive power).
    """
    vc = complex_voltages(v, theta)
    vn = np.exp(1j * theta)
    ic = ybus @ vc
    # dS/dtheta and dS/d|V| in complex matrix form
    a = 1j * (np.diag(vc * np.conj(ic)) - np.outer(vc, np.conj(vc)) * np.conj(ybus))
    b = np.outer(vc, np.conj(vn)) * np.conj(ybus) + np.diag(np.conj(ic) * vn)
    return a.real, b.real, a.imag, b.imag


def injection_jacobian_derivatives(ybus: np.ndarray, v: np.ndarray,
                                   theta: np.ndarray, kind: str, a: int):
    """Derivative of the four injection Jacobians along one bus coordinate.

    ``kind`` is ``"theta"`` or ``"v"`` and ``a`` the bus index; the result
    ``(djpt, djpv, djqt, djqv)`` contains the second partial derivatives
    d(dP_i/dtheta_k)/dx_a and so on.  Only rows/columns touching bus ``a``
    are nonzero.
    """
    nb = len(v)
    vc = complex_voltages(v, theta)
    vn = np.exp(1j * theta)
    ic = ybus @ vc

    u = np.zeros(nb, dtype=complex)
    un = np.zeros(nb, dtype=complex)
    if kind == "theta":
        u[a] = 1j * vc[a]
        un[a] = 1j * vn[a]
    elif kind == "v":
        u[a] = vn[a]
    else:
        raise ValueError(f"kind must be 'theta' or 'v', got {kind!r}")
    di = ybus @ u

    yc = np.conj(ybus)
    da = 1j * (
        np.diag(u * np.conj(ic) + vc * np.conj(di))
        - np.outer(u, np.conj(vc)) * yc
        - np.outer(vc, np.conj(u)) * yc
    )
    db = (
        np.outer(u, np.conj(vn)) * yc
        + np.outer(vc, np.conj(un)) * yc
        + np.diag(np.conj(di) * vn + np.conj(ic) * un)
    )
    return da.real, db.real, da.imag, db.imag
