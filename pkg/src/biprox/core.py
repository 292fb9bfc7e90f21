"""Domain types and the small dense linear algebra shared by every module.

Vectors are 1-D ``float64`` arrays of length ``n``.  Per-agent quantities in a
:class:`LowerState` are stacked into ``(N, n)`` arrays and the curvature
matrices into an ``(N, n, n)`` array, always indexed by agent id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonSPDError, OracleFailure

__all__ = [
    "AgentProblem",
    "HessianMode",
    "LocalUpdate",
    "LowerState",
    "Method",
    "SolverConfig",
    "SpdFactor",
    "UpperState",
    "as_vector",
    "fixed_order_sum",
    "spd_project",
    "spd_solve",
]

SYMMETRY_RTOL = 1e-12


def as_vector(v, n: Optional[int] = None) -> np.ndarray:
    """Return ``v`` as a finite 1-D float64 array, checking its length."""
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"expected a non-empty vector, got shape {arr.shape}")
    if n is not None and arr.size != n:
        raise DimensionMismatch(f"expected dim {n}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _symmetrize(A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonSPDError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise NonSPDError("matrix is not symmetric")
    return 0.5 * (A + A.T)


class SpdFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    If the plain factorization fails, ``mu_floor * I`` is added once with
    ``mu_floor = 1e-8 * (1 + trace / n)``; a second failure raises
    :class:`NonSPDError`.
    """

    def __init__(self, A):
        S = _symmetrize(A)
        n = S.shape[0]
        self.shift = 0.0
        try:
            self._cho = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            self.shift = 1e-8 * (1.0 + np.trace(S) / n)
            try:
                self._cho = scipy.linalg.cho_factor(
                    S + self.shift * np.eye(n), lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                raise NonSPDError("matrix is not positive definite") from None
        if np.any(np.diag(self._cho[0]) <= 0):
            raise NonSPDError("matrix is not positive definite")
        self.matrix = S + self.shift * np.eye(n) if self.shift else S
        self.n = n

    def solve(self, b) -> np.ndarray:
        b = as_vector(b, self.n)
        u = scipy.linalg.cho_solve(self._cho, b, check_finite=False)
        # one step of iterative refinement keeps the residual at roundoff level
        r = b - self.matrix @ u
        return u + scipy.linalg.cho_solve(self._cho, r, check_finite=False)


def spd_solve(A, b) -> np.ndarray:
    """Solve ``A u = b`` for symmetric positive definite ``A``."""
    return SpdFactor(A).solve(b)


def spd_project(A, floor: float) -> np.ndarray:
    """Symmetrize ``A`` and lift every eigenvalue below ``floor`` up to it."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.maximum(w, floor)) @ V.T


def fixed_order_sum(terms: Sequence) -> np.ndarray:
    """Sum vectors strictly in list (agent index) order.

    The result depends only on the values and their order, never on the
    order in which they were produced.
    """
    if len(terms) == 0:
        raise DimensionMismatch("cannot sum an empty list")
    total = np.array(terms[0], dtype=np.float64, copy=True)
    for t in terms[1:]:
        t = np.asarray(t, dtype=np.float64)
        if t.shape != total.shape:
            raise DimensionMismatch(f"shape {t.shape} != {total.shape}")
        total = total + t
    return total


# ---------------------------------------------------------------------------
# problem and configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentProblem:
    """Oracle bundle for one agent's objective ``f_i``.

    ``exact_local_solve(lam, y, z, B, gamma)`` must return the minimizer of
    ``f(x) + gamma/2 |x - z|^2 + lam.x + 1/2 (x - y)' B (x - y)``.
    ``curvature_hint(x)`` returns an (n, n) curvature estimate of ``f`` at x.
    """

    dim: int
    value: Callable[[np.ndarray], float]
    subgradient: Callable[[np.ndarray], np.ndarray]
    exact_local_solve: Optional[Callable[..., np.ndarray]] = None
    curvature_hint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower_bound: float = -np.inf
    name: str = ""

    def f(self, x) -> float:
        try:
            v = float(self.value(x))
        except (OverflowError, FloatingPointError) as exc:
            raise OracleFailure(f"value oracle of {self.name or 'agent'} failed: {exc}") from exc
        if not np.isfinite(v):
            raise OracleFailure(f"value oracle of {self.name or 'agent'} returned {v}")
        return v

    def grad(self, x) -> np.ndarray:
        g = np.asarray(self.subgradient(x), dtype=np.float64).reshape(-1)
        if g.size != self.dim:
            raise DimensionMismatch(f"subgradient has dim {g.size}, expected {self.dim}")
        if not np.all(np.isfinite(g)):
            raise OracleFailure(f"subgradient oracle of {self.name or 'agent'} is non-finite")
        return g


class Method(enum.Enum):
    CADMM_PROX = "cadmm-prox"
    CALADIN_PROX = "caladin-prox"
    PLAIN_CADMM = "plain-cadmm"
    PLAIN_CALADIN = "plain-caladin"

    @property
    def is_admm(self) -> bool:
        return self in (Method.CADMM_PROX, Method.PLAIN_CADMM)

    @property
    def is_prox(self) -> bool:
        return self in (Method.CADMM_PROX, Method.CALADIN_PROX)


class LocalUpdate(enum.Enum):
    LINEARIZED_UPPER = "lin-upper"
    LINEARIZED_LOWER = "lin-lower"
    FIXED_POINT = "fixed-point"
    EXACT = "exact"


class HessianMode(enum.Enum):
    SCALED_IDENTITY = "scaled-identity"
    USER_FIXED = "user-fixed"
    CURVATURE_REFRESH = "curvature-refresh"


@dataclass(frozen=True)
class SolverConfig:
    """All solver tunables.

    ``local_update_strategy=None`` picks the method's own local step:
    the linearized upper objective for the globalized methods and the exact
    augmented solve for the plain baselines.
    """

    gamma: float = 1.0
    rho: float = 10.0
    beta: float = 0.0
    sigma_margin: float = 1e-8
    eps_z: float = 1e-16
    max_outer: int = 500
    max_lower_sweeps: int = 200
    local_update_strategy: Optional[LocalUpdate] = None
    fixed_point_inner_iters: int = 10
    method: Method = Method.CALADIN_PROX
    hessian_mode: HessianMode = HessianMode.SCALED_IDENTITY
    user_B: Optional[tuple] = None
    stop_window: int = 1
    kkt_tol: float = 1e-6
    gamma_probe: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.sigma_margin >= 0:
            raise ValueError("sigma_margin must be >= 0")
        if not self.eps_z > 0:
            raise ValueError("eps_z must be > 0")
        if self.max_outer < 0 or self.max_lower_sweeps < 1:
            raise ValueError("iteration budgets must be positive")
        if self.fixed_point_inner_iters < 1:
            raise ValueError("fixed_point_inner_iters must be >= 1")
        if self.stop_window < 1:
            raise ValueError("stop_window must be >= 1")
        for name, enum_type in (("method", Method), ("hessian_mode", HessianMode)):
            val = getattr(self, name)
            if not isinstance(val, enum_type):
                object.__setattr__(self, name, enum_type(val))
        if self.local_update_strategy is not None and not isinstance(
                self.local_update_strategy, LocalUpdate):
            object.__setattr__(self, "local_update_strategy",
                               LocalUpdate(self.local_update_strategy))
        if self.hessian_mode is HessianMode.USER_FIXED and self.user_B is None:
            raise ValueError("hessian_mode USER_FIXED needs user_B")

    @property
    def strategy(self) -> LocalUpdate:
        if self.local_update_strategy is not None:
            return self.local_update_strategy
        return LocalUpdate.LINEARIZED_UPPER if self.method.is_prox else LocalUpdate.EXACT

    @property
    def effective_gamma(self) -> float:
        """Proximal weight actually used; the plain baselines run with 0."""
        return self.gamma if self.method.is_prox else 0.0

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class LowerState:
    """Lower-level iterate: local copies, global copy, duals, gradients, curvature."""

    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    g: np.ndarray
    B: np.ndarray
    sweep_index: int = 0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        N, n = x.shape
        y = as_vector(self.y, n)
        lam = np.asarray(self.lam, dtype=np.float64).reshape(N, n)
        g = np.asarray(self.g, dtype=np.float64).reshape(N, n)
        B = np.asarray(self.B, dtype=np.float64).reshape(N, n, n)
        if N < 1:
            raise DimensionMismatch("need at least one agent")
        for name, arr in (("x", x), ("lam", lam), ("g", g), ("B", B)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"LowerState.{name} has non-finite entries")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "g", _frozen(g))
        object.__setattr__(self, "B", _frozen(B))

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @classmethod
    def initial(cls, z, B, lam=None) -> "LowerState":
        """``x_i = y = z``, ``lam_i = 0`` (unless given) and ``g_i = -lam_i``."""
        B = np.asarray(B, dtype=np.float64)
        N, n = B.shape[0], B.shape[1]
        z = as_vector(z, n)
        lam = np.zeros((N, n)) if lam is None else np.asarray(lam, dtype=np.float64)
        return cls(x=np.tile(z, (N, 1)), y=z, lam=lam, g=-lam, B=B)

    def replace(self, **changes) -> "LowerState":
        return replace(self, **changes)


@dataclass(frozen=True)
class UpperState:
    z: np.ndarray
    sigma: np.ndarray
    outer_index: int = 0
    merit_at_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(as_vector(self.z)))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be finite and non-negative")
        if not np.isfinite(self.merit_at_z):
            raise ValueError("merit_at_z must be finite")
        object.__setattr__(self, "sigma", _frozen(sigma))

    def replace(self, **changes) -> "UpperState":
        return replace(self, **changes)


def stack_B(B_list: Sequence, n: int) -> np.ndarray:
    """Stack per-agent curvature matrices (scalars mean a multiple of I)."""
    out = []
    for B in B_list:
        B = np.asarray(B, dtype=np.float64)
        if B.ndim == 0:
            B = float(B) * np.eye(n)
        if B.shape != (n, n):
            raise DimensionMismatch(f"B has shape {B.shape}, expected {(n, n)}")
        out.append(_symmetrize(B))
    return np.stack(out)


def identity_B(N: int, n: int, rho: float) -> np.ndarray:
    return np.broadcast_to(rho * np.eye(n), (N, n, n)).copy()

