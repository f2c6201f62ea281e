"""Coordinated day-ahead dispatch of a multi-grid distribution system."""
from .errors import (
    AgentFailure, DegeneratePlanError, DimensionMismatch, DispatchError, MaxIterExceeded,
    NonConvergence, OutOfLinearRange, SchemaError, SingularSensitivity, SolverError,
    SolverFailure, ValidationError,
)

__version__ = "0.1.0"
