"""Proximal objectives, the L1 merit function and its descent certificates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import AgentProblem, fixed_order_sum
from .errors import DimensionMismatch, NonFiniteError

DEFAULT_T_SEQUENCE = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

@dataclass(frozen=True)
class MeritBreakdown:
    smooth_part: float
    penalty_part: float
    total: float


def proximal_objective(problem: AgentProblem, x, z, gamma: float) -> float:
    """``f(x) + gamma/2 * |x - z|^2``."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    if d.shape != (problem.dim,):
        raise DimensionMismatch(f"x - z has shape {d.shape}, expected ({problem.dim},)")
    return problem.f(x) + 0.5 * gamma * float(d @ d)


def merit(problems: Sequence[AgentProblem], x, y, z, sigma, gamma: float) -> MeritBreakdown:
    """Sum of proximal objectives plus sigma-weighted L1 consensus gaps.

    ``x`` holds one row per agent.  Both sums run in agent order.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    N = len(problems)
    if x.shape[0] != N or sigma.shape != (N,):
        raise DimensionMismatch(f"{N} problems, {x.shape[0]} local copies, {sigma.size} sigmas")
    y = np.asarray(y, dtype=np.float64)
    smooth = 0.0
    penalty = 0.0
    for i, p in enumerate(problems):
        smooth += proximal_objective(p, x[i], z, gamma)
        penalty += sigma[i] * float(np.sum(np.abs(x[i] - y)))
    return MeritBreakdown(smooth, penalty, smooth + penalty)


@dataclass(frozen=True)
class DirectionalDerivative:
    value: float
    slopes: tuple
    t_sequence: tuple


def directional_derivative_numeric(phi: Callable[[np.ndarray], float], point, direction,
                                   t_sequence=DEFAULT_T_SEQUENCE) -> DirectionalDerivative:
    """One-sided estimate of ``lim_{t->0+} (phi(p + t d) - phi(p)) / t``.

    The forward slopes are returned for inspection; ``value`` is the
    first-order Richardson extrapolation of the two smallest steps, which
    removes the O(t) term of a locally smooth ``phi``.
    """
    t_seq = tuple(float(t) for t in t_sequence)
    if len(t_seq) < 2 or any(t <= 0 for t in t_seq) or any(
            b >= a for a, b in zip(t_seq, t_seq[1:])):
        raise ValueError("t_sequence must hold >= 2 strictly decreasing positive steps")
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    base = float(phi(point))
    if not np.isfinite(base):
        raise NonFiniteError("phi is non-finite at the base point")
    slopes = []
    for t in t_seq:
        v = float(phi(point + t * direction))
        if not np.isfinite(v):
            raise NonFiniteError(f"phi is non-finite at step t={t}")
        slopes.append((v - base) / t)
    r = t_seq[-2] / t_seq[-1]
    value = (r * slopes[-1] - slopes[-2]) / (r - 1.0)
    return DirectionalDerivative(value, tuple(slopes), t_seq)


def consensus_directional_derivative(state, sigma, y_plus) -> float:
    """Closed-form slope of the merit at ``x+`` along ``y+ - x+``.

    ``state.x`` are the post-local-step copies and ``state.g`` the gradient
    surrogates the consensus step used.
    """
    x, g = state.x, state.g
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape != (x.shape[0],) or np.shape(y_plus) != (x.shape[1],):
        raise DimensionMismatch("sigma / y_plus do not match the state")
    dxt = np.asarray(y_plus, dtype=np.float64) - x
    lin = fixed_order_sum([np.array(float(g[i] @ dxt[i])) for i in range(x.shape[0])])
    pen = fixed_order_sum([np.array(sigma[i] * float(np.sum(np.abs(dxt[i]))))
                           for i in range(x.shape[0])])
    return float(lin) - float(pen)


def local_descent_condition(x_plus, y, lam, B, sigma):
    """Sufficient condition for the local step to be a merit descent direction.

    With ``dx_i = x_i+ - y`` returns ``(holds, margin)`` where
    ``margin = sum lam_i.dx_i + |dx_i|_B^2 - sum sigma_i |dx_i|_1`` and the
    condition holds iff ``margin > 0``.
    """
    x_plus = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    lam = np.asarray(lam, dtype=np.float64).reshape(x_plus.shape)
    B = np.asarray(B, dtype=np.float64)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape != (x_plus.shape[0],):
        raise DimensionMismatch("one sigma per agent required")
    dx = x_plus - np.asarray(y, dtype=np.float64)
    lhs = 0.0
    rhs = 0.0
    for i in range(x_plus.shape[0]):
        lhs += float(lam[i] @ dx[i]) + float(dx[i] @ B[i] @ dx[i])
        rhs += sigma[i] * float(np.sum(np.abs(dx[i])))
    margin = lhs - rhs
    return margin > 0, margin


def consensus_descent_condition(sigma, lambda_plus) -> np.ndarray:
    """Per agent: ``sigma_i > |lambda_i+|_inf`` (strict)."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    lp = np.atleast_2d(np.asarray(lambda_plus, dtype=np.float64))
    if lp.shape[0] != sigma.shape[0]:
        raise DimensionMismatch("one sigma per agent required")
    return sigma > np.max(np.abs(lp), axis=1)


def update_sigma(upper, lambda_plus, margin: float = 0.0):
    """Raise each penalty weight that does not strictly dominate ``|lambda_i+|_inf``.

    Triggered agents get ``|lambda_i+|_inf * (1 + margin) + margin``; the
    others keep their weight, so sigma never decreases.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    lp = np.atleast_2d(np.asarray(lambda_plus, dtype=np.float64))
    need = np.max(np.abs(lp), axis=1)
    sigma = np.array(upper.sigma, copy=True)
    if sigma.shape != need.shape:
        raise DimensionMismatch("one sigma per agent required")
    # equality is bumped too when margin > 0 so the dominance becomes strict
    hit = sigma < need if margin == 0 else sigma <= need
    sigma[hit] = need[hit] * (1.0 + margin) + margin
    return upper.replace(sigma=sigma)
