"""Continuous-time diffusion models on embedded Riemannian manifolds."""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ConfigError,
    ConstraintError,
    DomainError,
    IntegrationError,
    NumericFailureError,
    RankDeficiencyError,
    StepSizeUnderflowError,
    UnsupportedDensityError,
)
from .manifolds import Hyperboloid, Sphere, SpecialOrthogonal, Torus, manifold_from_dict  # noqa: E402
from .numeric import RngStream  # noqa: E402

__all__ = [
    "ConfigError",
    "ConstraintError",
    "DomainError",
    "Hyperboloid",
    "IntegrationError",
    "NumericFailureError",
    "RankDeficiencyError",
    "RngStream",
    "Sphere",
    "SpecialOrthogonal",
    "StepSizeUnderflowError",
    "Torus",
    "UnsupportedDensityError",
    "manifold_from_dict",
]

__version__ = "0.1.0"
