"""Response-aware GRAPE: pulse design through differentiable distortion cascades.

The package splits into:

* :mod:`rawgrape.spinops`   -- spin-1/2 Liouville-space operators, propagators,
  and exact propagator derivatives;
* :mod:`rawgrape.filters`   -- differentiable instrument-distortion filters and
  cascade composition with vector-Jacobian products;
* :mod:`rawgrape.engine`    -- ensemble-averaged fidelity and its gradient,
  chained through the distortion cascades;
* :mod:`rawgrape.optimizer` -- L-BFGS minimization with a strong-Wolfe line
  search and a smooth amplitude clamp;
* :mod:`rawgrape.pulses`    -- reference waveform generators;
* :mod:`rawgrape.config`, :mod:`rawgrape.wavefile`, :mod:`rawgrape.report`,
  :mod:`rawgrape.cli` -- the config-driven command-line front end.
"""

from .engine import (
    ControlProblem,
    FidelityReport,
    TransferSet,
    ensemble_objective,
    pair_fidelity,
    pair_gradient,
    transfer_preset,
)
from .errors import (
    ConfigError,
    DomainError,
    EngineError,
    NumericError,
    RawGrapeError,
    StabilityError,
    StructuralError,
)
from .filters import (
    Cascade,
    ControlSequence,
    FilterCoefficient,
    FirFilter,
    RLCSpec,
    SaturationFilter,
    SaturationSpec,
    SinglePoleFilter,
    SingleZeroFilter,
    UserFilter,
    cascade_apply,
    cascade_vjp,
    fd_jacobian_fallback,
    rlc_filter_pair,
    rlc_poles,
)
from .optimizer import OptimizationResult, OptimizerConfig, initial_guess, minimize
from .spinops import (
    DriftSpec,
    build_liouvillian,
    build_spin_half_ops,
    commutation_superop,
    prop_deriv_action,
    propagator,
    unvec,
    vec,
)

__version__ = "0.1.0"
