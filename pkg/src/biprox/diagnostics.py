"""Monitors for the convergence guarantees and checks on user oracles."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import (AgentProblem, LocalUpdate, LowerState, Method, SolverConfig, UpperState,
                   as_vector, identity_B)
from .errors import DimensionMismatch, NonSPDError, OracleMismatch

LYAPUNOV_RTOL = 1e-10
SUM_ZERO_TOL = 1e-9
LONG_RUN_SWEEPS = 10_000


class ReferenceSource(enum.Enum):
    ANALYTIC = "ANALYTIC"
    LONG_RUN = "LONG_RUN"


@dataclass(frozen=True)
class ReferenceSolution:
    """A primal-dual point ``(y*, lambda*)`` of the lower consensus problem."""

    y_star: np.ndarray
    lambda_star: np.ndarray
    source: ReferenceSource

    def __post_init__(self):
        y = as_vector(self.y_star)
        lam = np.atleast_2d(np.asarray(self.lambda_star, dtype=np.float64))
        if lam.shape[1] != y.size:
            raise DimensionMismatch("lambda_star rows must match y_star")
        resid = np.max(np.abs(lam.sum(axis=0)))
        if resid > SUM_ZERO_TOL * (1.0 + np.max(np.abs(lam))):
            raise ValueError(f"reference multipliers do not sum to zero (residual {resid:.3e})")
        object.__setattr__(self, "y_star", y)
        object.__setattr__(self, "lambda_star", lam)

    @property
    def N(self) -> int:
        return self.lambda_star.shape[0]


def analytic_reference(suite, z, gamma: float) -> ReferenceSolution:
    """Closed-form lower-level KKT point with ``lambda_i* = -grad F_i^z(y*)``."""
    if suite.lower_reference is None:
        raise ValueError(f"suite {suite.name} has no analytic lower-level reference")
    y, lam = suite.lower_reference(as_vector(z, suite.dim), float(gamma))
    return ReferenceSolution(y, lam, ReferenceSource.ANALYTIC)


def long_run_reference(problems: Sequence[AgentProblem], z, gamma: float, B=None,
                       sweeps: int = LONG_RUN_SWEEPS, rho: float = 10.0) -> ReferenceSolution:
    """Lower-level reference from many exact sweeps with ``z`` fixed and ``beta = 0``.

    The multipliers are re-centred to sum to exactly zero, which the exact
    iteration satisfies up to rounding.
    """
    from .lower import sweep

    problems = list(problems)
    z = as_vector(z, problems[0].dim)
    N, n = len(problems), z.size
    if B is None:
        B = identity_B(N, n, rho)
    cfg = SolverConfig(gamma=gamma, rho=rho, beta=0.0, method=Method.CALADIN_PROX,
                       local_update_strategy=LocalUpdate.EXACT)
    state = LowerState.initial(z, B)
    upper = UpperState(z=z, sigma=np.zeros(N), outer_index=0, merit_at_z=0.0)
    for _ in range(sweeps):
        state = sweep(state, problems, cfg, upper).state_after
    lam = state.lam - state.lam.mean(axis=0)
    return ReferenceSolution(state.y.copy(), lam, ReferenceSource.LONG_RUN)


def _chol(B: np.ndarray) -> np.ndarray:
    if not np.allclose(B, B.T, rtol=1e-12, atol=1e-12 * (1.0 + np.max(np.abs(B)))):
        raise NonSPDError("weight matrix is not symmetric")
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise NonSPDError("weight matrix is not positive definite") from None


def lyapunov(state: LowerState, ref: ReferenceSolution) -> float:
    """``sum_i |y - y*|_{B_i}^2 + sum_i |lam_i - lam_i*|_{B_i^-1}^2``."""
    if state.n != ref.y_star.size or state.N != ref.N:
        raise DimensionMismatch("state and reference disagree on (N, n)")
    dy = state.y - ref.y_star
    total = 0.0
    for i in range(state.N):
        L = _chol(state.B[i])
        dl = state.lam[i] - ref.lambda_star[i]
        w = np.linalg.solve(L, dl)
        total += float(dy @ state.B[i] @ dy) + float(w @ w)
    return total


@dataclass
class LyapunovCheck:
    values: list
    differences: list
    violations: list = field(default_factory=list)
    hypothesis_violation: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations and not self.hypothesis_violation


def lyapunov_decrease_check(states: Sequence[LowerState], ref: ReferenceSolution,
                            convex: bool = True, rtol: float = LYAPUNOV_RTOL) -> LyapunovCheck:
    """Successive Lyapunov differences along a lower-level trace.

    A difference counts as a violation when it exceeds ``rtol (1 + L_prev)``.
    A non-convex suite sets ``hypothesis_violation`` and the differences are
    still reported.
    """
    values = [lyapunov(s, ref) for s in states]
    diffs = [b - a for a, b in zip(values, values[1:])]
    bad = [k for k, (d, a) in enumerate(zip(diffs, values)) if d > rtol * (1.0 + a)]
    return LyapunovCheck(values, diffs, bad, hypothesis_violation=not convex)


class Telescoping(NamedTuple):
    running_sum: list
    bound: list
    ok: bool


def telescoping_monitor(outer, gamma: float, N: int) -> Telescoping:
    """Check ``sum_{j<K} |z^j - z^{j+1}|^2 < 2/(gamma N) (Phi_0 - Phi_K)`` for every K >= 1."""
    if gamma <= 0 or N < 1:
        raise ValueError("gamma > 0 and N >= 1 required")
    merits = list(outer.merit_trajectory)
    steps = list(outer.z_step_squares)
    if len(merits) != len(steps) + 1:
        raise ValueError("merit trajectory must have one entry more than the step list")
    sums, bounds = [0.0], [0.0]
    ok = True
    acc = 0.0
    for k, s in enumerate(steps, start=1):
        acc += s
        b = 2.0 / (gamma * N) * (merits[0] - merits[k])
        sums.append(acc)
        bounds.append(b)
        ok = ok and acc < b
    return Telescoping(sums, bounds, ok)


def kkt_residual(problems: Sequence[AgentProblem], y, lam, gamma: float, z) -> float:
    """``max(max_i |df_i(y) + gamma (y - z) + lam_i|_inf, |sum_i lam_i|_inf)``."""
    y = as_vector(y, problems[0].dim)
    z = as_vector(z, y.size)
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    if lam.shape != (len(problems), y.size):
        raise DimensionMismatch(f"lambda has shape {lam.shape}")
    worst = 0.0
    total = np.zeros(y.size)
    for i, p in enumerate(problems):
        r = p.grad(y) + gamma * (y - z) + lam[i]
        worst = max(worst, float(np.max(np.abs(r))))
        total = total + lam[i]
    return max(worst, float(np.max(np.abs(total))))


def critical_point_residual(problems: Sequence[AgentProblem], z) -> float:
    """:func:`kkt_residual` at ``y = z`` with ``gamma = 0`` and least-squares multipliers.

    ``lam_i = mean_j df_j(z) - df_i(z)`` sums to zero and leaves
    ``|sum_i df_i(z)|_inf / N`` as the residual of every agent.
    """
    z = as_vector(z, problems[0].dim)
    grads = np.stack([p.grad(z) for p in problems])
    lam = grads.mean(axis=0) - grads
    return kkt_residual(problems, z, lam, 0.0, z)


@dataclass
class OracleReport:
    points: list
    errors: list
    tolerances: list
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def validate_oracles(problem: AgentProblem, sample_points, h: float = 1e-6,
                     rtol: float = 1e-4, raise_on_failure: bool = True) -> OracleReport:
    """Compare the subgradient oracle with central differences of the value oracle.

    Raises :class:`OracleMismatch` naming the failing points unless
    ``raise_on_failure`` is False.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    pts, errs, tols, fails = [], [], [], []
    for raw in sample_points:
        x = as_vector(raw, problem.dim)
        g = problem.grad(x)
        fd = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            fd[j] = (problem.f(x + e) - problem.f(x - e)) / (2.0 * h)
        err = float(np.max(np.abs(fd - g)))
        tol = rtol * (1.0 + float(np.linalg.norm(g)))
        pts.append(x)
        errs.append(err)
        tols.append(tol)
        if not err <= tol:
            fails.append((x.tolist(), err))
    report = OracleReport(pts, errs, tols, fails)
    if fails and raise_on_failure:
        raise OracleMismatch(fails)
    return report


def sample_points(dim: int, count: int, seed: int, scale: float = 2.0) -> np.ndarray:
    """Seeded points in ``[-scale, scale]^dim`` for oracle validation."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(count, dim))


def contraction_ratios(z_trajectory, z_star) -> np.ndarray:
    """``|z^{k+1} - z*| / |z^k - z*|`` over the recorded trajectory (zero distances skipped)."""
    z_star = np.asarray(z_star, dtype=np.float64)
    d = np.array([np.linalg.norm(np.asarray(z) - z_star) for z in z_trajectory])
    keep = d[:-1] > 0
    return d[1:][keep] / d[:-1][keep]
