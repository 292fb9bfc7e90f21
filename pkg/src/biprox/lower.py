"""Lower level: one sweep of local updates, consensus step and dual update.

The globalized methods and the plain baselines share the same kernels.  A
sweep is split into a per-agent half (:func:`agent_local_step`) and a master
half (:func:`master_consensus`) so the protocol simulator can run exactly the
same arithmetic on either side of the wire.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (AgentProblem, HessianMode, LocalUpdate, LowerState, Method, SolverConfig,
                   SpdFactor, UpperState, fixed_order_sum, identity_B, spd_project,
                   stack_B)
from .errors import Diverged, NoExactOracle
from .merit import (MeritBreakdown, consensus_descent_condition,
                    consensus_directional_derivative, local_descent_condition, merit,
                    update_sigma)

DIVERGENCE_NORM = 1e12


@lru_cache(maxsize=256)
def _cached_factor(key: bytes, n: int) -> SpdFactor:
    return SpdFactor(np.frombuffer(key, dtype=np.float64).reshape(n, n))


def _factor(A: np.ndarray) -> SpdFactor:
    A = np.ascontiguousarray(A, dtype=np.float64)
    return _cached_factor(A.tobytes(), A.shape[0])


def _apply_inverse(B, r: np.ndarray) -> np.ndarray:
    if np.ndim(B) == 0:
        return r / float(B)
    return _factor(B).solve(r)


def _shifted(B, gamma: float):
    if np.ndim(B) == 0:
        return float(B) + gamma
    return np.asarray(B) + gamma * np.eye(np.shape(B)[0])


def _times(B, v: np.ndarray) -> np.ndarray:
    if np.ndim(B) == 0:
        return float(B) * v
    return np.asarray(B) @ v


def _as_matrix(B, n: int) -> np.ndarray:
    return float(B) * np.eye(n) if np.ndim(B) == 0 else np.asarray(B, dtype=np.float64)


# ---------------------------------------------------------------------------
# local update strategies
# ---------------------------------------------------------------------------

def local_update_linearized_upper(problem: AgentProblem, y, z, lam, B, gamma: float):
    """Minimize the model linearized at ``y``: ``y + B^-1 (gamma (z - y) - lam - df(y))``.

    A scalar ``B`` is read as ``rho * I``.
    """
    y = np.asarray(y, dtype=np.float64)
    r = gamma * (np.asarray(z) - y) - np.asarray(lam) - problem.grad(y)
    return y + _apply_inverse(B, r)


def _lower_linearized_step(problem, x_eval, y, z, lam, B, gamma):
    x_eval = np.asarray(x_eval, dtype=np.float64)
    rhs = gamma * np.asarray(z, dtype=np.float64) + _times(B, np.asarray(y, dtype=np.float64)) \
        - np.asarray(lam) - problem.grad(x_eval)
    return _apply_inverse(_shifted(B, gamma), rhs)


def local_update_linearized_lower(problem: AgentProblem, y, z, lam, B, gamma: float):
    """Linearize only ``f``: ``(B + gamma I)^-1 (gamma z + B y - lam - df(y))``."""
    return _lower_linearized_step(problem, y, y, z, lam, B, gamma)


def local_update_fixed_point(problem: AgentProblem, y, z, lam, B, gamma: float, iters: int):
    """Iterate the linearized-lower map ``iters`` times, starting from ``y``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.asarray(y, dtype=np.float64)
    for _ in range(iters):
        x = _lower_linearized_step(problem, x, y, z, lam, B, gamma)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            raise Diverged("fixed-point local update diverged")
    return x


def local_update_exact(problem: AgentProblem, y, z, lam, B, gamma: float):
    """Exact minimizer of ``F^z(x) + lam.x + 1/2 |x - y|_B^2`` via the agent's oracle."""
    if problem.exact_local_solve is None:
        raise NoExactOracle(f"agent {problem.name or '?'} has no exact local solver")
    x = np.asarray(problem.exact_local_solve(
        np.asarray(lam, dtype=np.float64), np.asarray(y, dtype=np.float64),
        np.asarray(z, dtype=np.float64), _as_matrix(B, problem.dim), float(gamma)),
        dtype=np.float64).reshape(problem.dim)
    return x


# ---------------------------------------------------------------------------
# consensus and dual kernels
# ---------------------------------------------------------------------------

def subgradient_surrogate(B, y, x_plus, lam) -> np.ndarray:
    """``g = B (y - x+) - lam``: gradient of the local model at ``x+``."""
    return _times(B, np.asarray(y) - np.asarray(x_plus)) - np.asarray(lam)


def consensus_update_aladin(x_plus, g, B, beta: float, y_prev) -> np.ndarray:
    """Closed-form solution of the coupled consensus QP.

    ``y+ = (sum B_i + beta I)^-1 (beta y_prev + sum (B_i x_i+ - g_i))``.
    """
    x_plus = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    N, n = x_plus.shape
    B = np.asarray(B, dtype=np.float64).reshape(N, n, n)
    H = fixed_order_sum([B[i] for i in range(N)]) + beta * np.eye(n)
    rhs = fixed_order_sum([B[i] @ x_plus[i] - g[i] for i in range(N)])
    rhs = beta * np.asarray(y_prev, dtype=np.float64) + rhs
    return _factor(H).solve(rhs)


def consensus_update_admm(x_plus, lam, rho: float, beta: float, y_prev) -> np.ndarray:
    """``y+ = (beta y_prev + sum (rho x_i+ + lam_i)) / (N rho + beta)``."""
    x_plus = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    N = x_plus.shape[0]
    s = fixed_order_sum([rho * x_plus[i] + lam[i] for i in range(N)])
    return (beta * np.asarray(y_prev, dtype=np.float64) + s) / (N * rho + beta)


def dual_update_aladin(B_i, x_i, y_plus, g_i) -> np.ndarray:
    """QP multiplier of agent i: ``B_i (x_i+ - y+) - g_i``."""
    return _times(B_i, np.asarray(x_i) - np.asarray(y_plus)) - np.asarray(g_i)


def dual_update_admm(lam_i, rho: float, x_i, y) -> np.ndarray:
    """``lam + rho (x - y)`` for whichever (x, y) pair the caller supplies."""
    return np.asarray(lam_i) + rho * (np.asarray(x_i) - np.asarray(y))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def initial_B(problems: Sequence[AgentProblem], config: SolverConfig, z) -> np.ndarray:
    N, n = len(problems), problems[0].dim
    if config.method.is_admm or config.hessian_mode is HessianMode.SCALED_IDENTITY:
        return identity_B(N, n, config.rho)
    if config.hessian_mode is HessianMode.USER_FIXED:
        if len(config.user_B) != N:
            raise ValueError("user_B needs one matrix per agent")
        return stack_B(config.user_B, n)
    return refreshed_B(problems, config, z)


def refreshed_B_i(problem: AgentProblem, config: SolverConfig, z) -> np.ndarray:
    """Curvature of one proximal objective at ``z``, eigenvalues lifted to >= gamma."""
    gamma = config.effective_gamma
    if problem.curvature_hint is None:
        raise ValueError(f"agent {problem.name or '?'} has no curvature hint")
    H = np.asarray(problem.curvature_hint(z), dtype=np.float64).reshape(problem.dim, problem.dim)
    H = H + gamma * np.eye(problem.dim)
    floor = max(gamma, 1e-8 * (1.0 + abs(np.trace(H)) / problem.dim))
    return spd_project(H, floor)


def refreshed_B(problems: Sequence[AgentProblem], config: SolverConfig, z) -> np.ndarray:
    return np.stack([refreshed_B_i(p, config, z) for p in problems])


def _local_weight(B_i, config: SolverConfig):
    return config.rho if config.method.is_admm else B_i


def agent_local_step(problem: AgentProblem, x_prev, y, z, lam, B_i, config: SolverConfig):
    """Agent side of one sweep.

    Returns ``(x_plus, lam_used, g)``: the new local copy, the multiplier the
    local step used and the gradient surrogate uploaded to the master
    (``-lam_used`` for the ADMM methods, which keeps their consensus step an
    instance of the coupled QP).
    """
    method = config.method
    gamma = config.effective_gamma
    if method is Method.CADMM_PROX:
        lam_used = dual_update_admm(lam, config.rho, x_prev, y)
    else:
        lam_used = np.asarray(lam, dtype=np.float64)
    W = _local_weight(B_i, config)
    strategy = config.strategy
    if strategy is LocalUpdate.LINEARIZED_UPPER:
        x_plus = local_update_linearized_upper(problem, y, z, lam_used, W, gamma)
    elif strategy is LocalUpdate.LINEARIZED_LOWER:
        x_plus = local_update_linearized_lower(problem, y, z, lam_used, W, gamma)
    elif strategy is LocalUpdate.FIXED_POINT:
        x_plus = local_update_fixed_point(problem, y, z, lam_used, W, gamma,
                                          config.fixed_point_inner_iters)
    else:
        x_plus = local_update_exact(problem, y, z, lam_used, W, gamma)
    if not np.all(np.isfinite(x_plus)) or np.linalg.norm(x_plus) > DIVERGENCE_NORM:
        raise Diverged(f"local update of agent {problem.name or '?'} diverged")
    if method.is_admm:
        g = -lam_used
    else:
        g = subgradient_surrogate(B_i, y, x_plus, lam_used)
    return x_plus, lam_used, g


def master_consensus(x_plus, lam_used, g, B, y, config: SolverConfig):
    """Master side: the consensus step and the resulting multipliers ``lambda+``."""
    N = x_plus.shape[0]
    if config.method.is_admm:
        y_plus = consensus_update_admm(x_plus, lam_used, config.rho, config.beta, y)
        lam_plus = np.stack([dual_update_admm(lam_used[i], config.rho, x_plus[i], y_plus)
                             for i in range(N)])
    else:
        y_plus = consensus_update_aladin(x_plus, g, B, config.beta, y)
        lam_plus = np.stack([dual_update_aladin(B[i], x_plus[i], y_plus, g[i])
                             for i in range(N)])
    return y_plus, lam_plus


def carried_dual(lam_used, lam_plus, config: SolverConfig):
    """Multiplier kept in the state between sweeps.

    The globalized ADMM applies its dual ascent at the start of the next
    sweep, so it carries the multiplier it used; the others carry ``lambda+``.
    """
    return lam_used if config.method is Method.CADMM_PROX else lam_plus


@dataclass(frozen=True)
class SweepReport:
    """Everything one sweep produced, plus the merit bookkeeping around it.

    ``merit_before`` is the merit at the incoming consensus point ``y``,
    ``merit_local`` after the local step (penalty measured against ``y``) and
    ``merit_after`` at the new consensus point ``y+``.
    """

    state_after: LowerState
    y_before: np.ndarray
    lam_local: np.ndarray
    lambda_plus: np.ndarray
    merit_before: MeritBreakdown
    merit_local: MeritBreakdown
    merit_local_at_y_plus: MeritBreakdown
    merit_after: MeritBreakdown
    local_descent_ok: bool
    local_margin: float
    consensus_descent_ok: np.ndarray
    consensus_slope: float
    delta_x: np.ndarray
    delta_x_tilde: np.ndarray

    @property
    def all_consensus_ok(self) -> bool:
        return bool(np.all(self.consensus_descent_ok))


def build_report(problems, state_before: LowerState, x_plus, lam_used, g, y_plus, lam_plus,
                 upper: UpperState, config: SolverConfig) -> SweepReport:
    gamma = config.effective_gamma
    z, sigma = upper.z, upper.sigma
    y = state_before.y
    N = state_before.N
    after = LowerState(x=x_plus, y=y_plus, lam=carried_dual(lam_used, lam_plus, config),
                       g=g, B=state_before.B, sweep_index=state_before.sweep_index + 1)
    B_local = (identity_B(N, state_before.n, config.rho) if config.method.is_admm
               else state_before.B)
    ok_local, margin = local_descent_condition(x_plus, y, lam_used, B_local, sigma)
    return SweepReport(
        state_after=after,
        y_before=y,
        lam_local=np.asarray(lam_used),
        lambda_plus=lam_plus,
        merit_before=merit(problems, np.tile(y, (N, 1)), y, z, sigma, gamma),
        merit_local=merit(problems, x_plus, y, z, sigma, gamma),
        merit_local_at_y_plus=merit(problems, x_plus, y_plus, z, sigma, gamma),
        merit_after=merit(problems, np.tile(y_plus, (N, 1)), y_plus, z, sigma, gamma),
        local_descent_ok=bool(ok_local),
        local_margin=float(margin),
        consensus_descent_ok=consensus_descent_condition(sigma, lam_plus),
        consensus_slope=consensus_directional_derivative(after, sigma, y_plus),
        delta_x=np.linalg.norm(x_plus - y, axis=1),
        delta_x_tilde=np.linalg.norm(y_plus - x_plus, axis=1),
    )


def sweep(state: LowerState, problems: Sequence[AgentProblem], config: SolverConfig,
          upper: UpperState) -> SweepReport:
    """One synchronous sweep: all local updates, then the consensus barrier."""
    if len(problems) != state.N:
        raise ValueError("one problem per agent required")
    steps = [agent_local_step(problems[i], state.x[i], state.y, upper.z, state.lam[i],
                              state.B[i], config) for i in range(state.N)]
    x_plus = np.stack([s[0] for s in steps])
    lam_used = np.stack([s[1] for s in steps])
    g = np.stack([s[2] for s in steps])
    y_plus, lam_plus = master_consensus(x_plus, lam_used, g, state.B, state.y, config)
    return build_report(problems, state, x_plus, lam_used, g, y_plus, lam_plus, upper, config)


Sweeper = Callable[[LowerState, Sequence[AgentProblem], SolverConfig, UpperState], SweepReport]


@dataclass(frozen=True)
class LowerResult:
    state: LowerState
    reports: list
    accepted: bool
    upper: UpperState

    @property
    def stalled(self) -> bool:
        return not self.accepted


def run_lower(state: LowerState, problems: Sequence[AgentProblem], config: SolverConfig,
              upper: UpperState, sweeper: Optional[Sweeper] = None,
              on_sweep: Optional[Callable] = None) -> LowerResult:
    """Sweep with ``z`` fixed until ``Phi(z, y+)(y+) < Phi(z, z)(z)``.

    The phase must start at ``y = z``.  Penalty weights are raised after
    every sweep.  ``accepted`` is False when ``max_lower_sweeps`` ran out
    without a strict decrease.
    """
    if not np.array_equal(state.y, upper.z):
        raise ValueError("a lower phase must start at y = z")
    sweeper = sweeper or sweep
    reports = []
    for _ in range(config.max_lower_sweeps):
        report = sweeper(state, problems, config, upper)
        upper = update_sigma(upper, report.lambda_plus, config.sigma_margin)
        state = report.state_after
        reports.append(report)
        if on_sweep is not None:
            on_sweep(report, upper)
        if report.merit_after.total < upper.merit_at_z:
            return LowerResult(state, reports, True, upper)
    return LowerResult(state, reports, False, upper)
