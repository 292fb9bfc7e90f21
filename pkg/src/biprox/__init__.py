"""Bi-level globalized consensus ADMM / ALADIN for nonconvex distributed problems."""

from .core import (AgentProblem, HessianMode, LocalUpdate, LowerState, Method, SolverConfig,
                   UpperState)
from .errors import (Diverged, DimensionMismatch, DuplicateUpload, LowerStalled,
                     MalformedFrame, MissingUpload, NonFiniteError, NonSPDError, NoExactOracle,
                     OracleFailure, OracleMismatch, SolverError)
from .globalize import (CriticalPointVerdict, OuterResult, Status, Verdict,
                        classify_critical_point, solve)
from .merit import merit

__version__ = "0.1.0"

__all__ = [
    "AgentProblem", "CriticalPointVerdict", "DimensionMismatch", "Diverged", "DuplicateUpload",
    "HessianMode", "LocalUpdate", "LowerStalled", "LowerState", "MalformedFrame", "Method",
    "MissingUpload", "NoExactOracle", "NonFiniteError", "NonSPDError", "OracleFailure",
    "OracleMismatch", "OuterResult", "SolverConfig", "SolverError", "Status", "UpperState",
    "Verdict", "classify_critical_point", "merit", "solve",
]
