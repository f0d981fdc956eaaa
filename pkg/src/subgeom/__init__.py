"""Numerical verification of subgeometric ergodicity for Markov processes.

The subpackages follow the workflow: :mod:`~subgeom.rates` builds the rate
function machinery, :mod:`~subgeom.models` supplies chains and diffusions,
:mod:`~subgeom.drift` certifies drift conditions and space-time Lyapunov
functions, :mod:`~subgeom.hitting` estimates randomized hitting-time moments
and :mod:`~subgeom.convergence` computes exact total-variation curves.
"""

from .convergence import TvCurve, check_vanishing, fit_polynomial_rate, tv_curve, tv_distance
from .drift import (
    DriftCertificate,
    LyapunovCandidate,
    PsiFunction,
    build_psi_from_v,
    check_condition2,
    check_geometric_drift,
    check_subgeometric_drift,
)
from .errors import ConfigError, DomainError
from .hitting import (
    HittingSampler,
    MomentEstimate,
    calibrate_r,
    check_step1_bound,
    check_tau_delta_bound,
    estimate_A_functional,
    estimate_hitting_moment,
    occupation_identity_check,
    psi_via_hitting,
    sample_randomized_hitting,
    sample_tau1,
)
from .models import (
    Ctmc,
    Diffusion1d,
    TargetSet,
    generator_apply,
    generator_apply_diffusion,
    make_model,
    sample_path,
    stationary_distribution,
    transient_distribution,
)
from .rates import (
    RateFunction,
    RateProfile,
    check_scaling,
    check_submultiplicative,
    h_phi,
    h_phi_inv,
    make_profile,
    phi_eval,
    rate_curve,
    validate_assumptions,
)
from .reports import CheckReport

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
