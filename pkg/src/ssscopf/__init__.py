"""Small-signal-stability constrained optimal power flow.

A gradient-sampling SQP solver for dispatch problems whose stability
constraint (a bound on the spectral abscissa of the linearized system)
is nonsmooth, together with the dynamic-model linearization, closed-form
eigenvalue sensitivities and a nonlinear time-domain simulator used to
validate solutions.
"""

from .cases import (
    NetworkCase,
    BusRecord,
    LineRecord,
    GeneratorRecord,
    MachineDynamics,
    ExciterParams,
    load_case,
    save_case,
    validate_case,
    build_admittance,
    load_bundled,
)
from .smallsignal import (
    OperatingPoint,
    steady_state_init,
    linearize_blocks,
    reduce_state_matrix,
    modal_analysis,
    spectral_abscissa_gradient,
    finite_difference_gradient,
)

__version__ = "0.1.0"
