"""Exception types raised by the solver toolkit."""


class SolverError(Exception):
    """Base class for every error raised by :mod:`biprox`."""


class DimensionMismatch(SolverError, ValueError):
    pass


class NonSPDError(SolverError):
    """Matrix is not positive definite even after the eigenvalue floor."""


class OracleFailure(SolverError):
    """An objective or subgradient oracle returned a non-finite value."""


class NonFiniteError(SolverError):
    pass


class Diverged(SolverError):
    pass


class NoExactOracle(SolverError):
    pass


class LowerStalled(SolverError):
    """The lower level hit its sweep budget without a strict merit decrease.

    The partial outer result, if any, is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class OracleMismatch(SolverError):
    """Finite differences disagree with the subgradient oracle."""

    def __init__(self, failures):
        self.failures = list(failures)
        pts = ", ".join(str(list(p)) for p, *_ in self.failures)
        super().__init__(f"ORACLE_MISMATCH at {len(self.failures)} point(s): {pts}")


class MissingUpload(SolverError):
    pass


class DuplicateUpload(SolverError):
    pass


class MalformedFrame(SolverError, ValueError):
    pass
