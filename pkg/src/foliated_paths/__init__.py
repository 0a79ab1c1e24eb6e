"""Stochastic calculus on model foliated Lie groups."""

from .model_geometry import (
    ConnectionData,
    GroupModel,
    ModelValidationError,
    adjoint_connection,
    adjoint_curvature,
    adjoint_ricci,
    bott_connection,
    build_model,
    epsilon_connection,
    j_map,
    load_custom_model,
    weitzenbock_residual,
)

__version__ = "0.1.0"
