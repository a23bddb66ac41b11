"""Exact non-Markovian dynamics of quadratic open quantum systems.

The package computes the nonequilibrium Green functions ``u(t)`` and
``v(t, t)`` of a system linearly coupled to Gaussian reservoirs, the
time-local coefficients of the exact master equation built from them, and
the environment-modified spectrum (localized modes plus continuum).  Two
independent routes to ``u`` are provided: time-domain Volterra stepping
and the spectral pole / branch-cut representation.
"""
from types import ModuleType as _ModuleType

from .errors import (
    ConfigError,
    DivergentOccupation,
    NMGError,
    NumericalError,
    OnBandError,
    QuadratureNotConverged,
    RootSearchInconclusive,
    SingularU,
    StepTooLarge,
    TaskError,
    TruncationOverflow,
)
from .spectral_models import (
    Environment,
    LorentzianCutoff,
    OhmicFamily,
    PhotonicBandEdge,
    Reservoir,
    SpectralModel,
    Statistics,
    Tabulated,
    band_support,
    evaluate_J,
    occupation,
)
from .self_energy import SelfEnergyEvaluator, kernel_g, kernel_g_tilde, sigma_prime, sigma_real
from .volterra_engine import (
    GreenFunctionGrid,
    SystemSpec,
    TimeGrid,
    discrete_bath_oracle,
    solve,
    solve_u,
    solve_v_diag,
    solve_v_volterra,
)
from .spectral_solver import (
    LocalizedMode,
    SpectralDecomposition,
    SpectralSolver,
    decompose,
    dos,
    find_localized_modes,
    u_spectral,
)
from .master_eq import (
    CoefficientTrajectory,
    RhoTrajectory,
    coefficients,
    initial_state,
    propagate_rho,
    reconstruct_u,
)

__version__ = "0.1.0"

__all__ = [name for name, obj in list(globals().items())
           if not name.startswith("_") and not isinstance(obj, _ModuleType)]
