"""Structured state-space models as deep Wiener models, for system identification."""

from deepwiener._threads import apply_thread_env

apply_thread_env()

import jax  # noqa: E402

# Engine agreement and gradient audits are stated at float64 tolerances.
jax.config.update("jax_enable_x64", True)

from deepwiener.core import (  # noqa: E402
    Activation,
    ActivationKind,
    DimensionError,
    DiscreteLti,
    NumericError,
    SsLayer,
    SsModel,
    Structure,
    UnsupportedStructureError,
    assemble_conjugate,
    ssl_step,
)
from deepwiener.discretization import DiscretizationMethod, discretize  # noqa: E402
from deepwiener.engines import (  # noqa: E402
    ConvFilter,
    TransferHandle,
    build_filter,
    dplr_frequency_response,
    simulate_convolutional,
    simulate_fft,
    simulate_scan,
    simulate_sequential,
    ssm_forward,
)
from deepwiener.parametrizations import (  # noqa: E402
    CtDiagParams,
    DplrParams,
    LruParams,
    ct_diag_realize,
    dplr_realize,
    lru_realize,
    spectrum_report,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ActivationKind",
    "ConvFilter",
    "CtDiagParams",
    "DimensionError",
    "DiscreteLti",
    "DiscretizationMethod",
    "DplrParams",
    "LruParams",
    "NumericError",
    "SsLayer",
    "SsModel",
    "Structure",
    "TransferHandle",
    "UnsupportedStructureError",
    "assemble_conjugate",
    "build_filter",
    "ct_diag_realize",
    "discretize",
    "dplr_frequency_response",
    "dplr_realize",
    "lru_realize",
    "simulate_convolutional",
    "simulate_fft",
    "simulate_scan",
    "simulate_sequential",
    "spectrum_report",
    "ssl_step",
    "ssm_forward",
]
