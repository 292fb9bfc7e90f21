"""Upper level: z acceptance, stopping, the bi-level solve loop and restarts."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (AgentProblem, HessianMode, LowerState, SolverConfig, UpperState,
                   as_vector, fixed_order_sum)
from .errors import LowerStalled
from .lower import LowerResult, Sweeper, initial_B, refreshed_B, run_lower, sweep
from .merit import merit, update_sigma

__all__ = [
    "CriticalPointVerdict",
    "OuterResult",
    "Status",
    "Verdict",
    "accept_z",
    "classify_critical_point",
    "probe_gamma",
    "solve",
    "stall_residual",
    "stopping_test",
    "update_sigma",
]


class Status(enum.Enum):
    CONVERGED = "CONVERGED"
    MAX_OUTER = "MAX_OUTER"
    LOWER_STALLED_AT_OPTIMUM = "LOWER_STALLED_AT_OPTIMUM"

    @property
    def converged(self) -> bool:
        return self is not Status.MAX_OUTER


@dataclass
class OuterResult:
    z_star: np.ndarray
    outer_iterations: int
    merit_trajectory: list
    z_step_squares: list
    status: Status
    z_trajectory: list = field(default_factory=list)
    sweeps: int = 0
    upper: Optional[UpperState] = None
    state: Optional[LowerState] = None

    def to_dict(self) -> dict:
        return {
            "z_star": [float(v) for v in self.z_star],
            "outer_iterations": self.outer_iterations,
            "merit_trajectory": [float(v) for v in self.merit_trajectory],
            "z_step_squares": [float(v) for v in self.z_step_squares],
            "status": self.status.value,
            "sweeps": self.sweeps,
        }


def _merit_at_point(problems, point, sigma, gamma) -> float:
    N = len(problems)
    return merit(problems, np.tile(point, (N, 1)), point, point, sigma, gamma).total


def accept_z(upper: UpperState, y_plus, merit_at_y_plus: float, merit_at_z: float,
             problems: Optional[Sequence[AgentProblem]] = None, gamma: float = 0.0):
    """Move ``z`` to ``y+`` iff the merit strictly dropped.

    On acceptance the cached merit becomes ``Phi(y+, y+)(y+)``, evaluated
    from ``problems`` when given and otherwise obtained by removing the
    proximal term ``gamma N / 2 |y+ - z|^2`` from ``merit_at_y_plus``.
    Returns the new upper state and the 0/1 flag broadcast to the agents.
    """
    if not merit_at_y_plus < merit_at_z:
        return upper, False
    y_plus = as_vector(y_plus, upper.z.size)
    if problems is not None:
        cached = _merit_at_point(problems, y_plus, upper.sigma, gamma)
    else:
        d = y_plus - upper.z
        cached = float(merit_at_y_plus) - 0.5 * gamma * upper.sigma.size * float(d @ d)
    return upper.replace(z=y_plus, outer_index=upper.outer_index + 1, merit_at_z=cached), True


def stopping_test(z_step_squares: Sequence[float], eps_z: float, window: int = 1) -> bool:
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(z_step_squares) < window:
        return False
    return all(s <= eps_z for s in z_step_squares[-window:])


def stall_residual(problems: Sequence[AgentProblem], state: LowerState, z) -> float:
    """Criticality residual of ``z`` read off a stalled lower phase.

    ``max(|sum_i df_i(y)|_inf, |y - z|_inf)`` at the consensus point ``y``.
    The local copies are not used: with linearized updates the multipliers
    can cycle around their limit, keeping ``x_i != y`` at a critical ``z``.
    """
    y = state.y
    total = fixed_order_sum([p.grad(y) for p in problems])
    return float(max(np.max(np.abs(total)), np.max(np.abs(y - np.asarray(z)))))


def probe_gamma(problems: Sequence[AgentProblem], z0, rng: np.random.Generator,
                num_dirs: int = 8, h: float = 1e-4) -> float:
    """``2 * max(0, -c)`` for the most negative sampled directional curvature ``c``."""
    z0 = as_vector(z0)
    worst = 0.0
    for p in problems:
        f0 = p.f(z0)
        for _ in range(num_dirs):
            d = rng.standard_normal(z0.size)
            d /= np.linalg.norm(d)
            curv = (p.f(z0 + h * d) - 2.0 * f0 + p.f(z0 - h * d)) / (h * h)
            worst = min(worst, curv)
    return 2.0 * max(0.0, -worst)


SweepHook = Callable[[int, object, UpperState], None]


def solve(problems: Sequence[AgentProblem], config: SolverConfig, z0, *,
          sweeper: Optional[Sweeper] = None, on_sweep: Optional[SweepHook] = None,
          on_accept: Optional[Callable] = None) -> OuterResult:
    """Run the bi-level method (or a plain baseline) from ``z0``.

    ``on_sweep(outer_index, report, upper)`` sees every lower sweep and
    ``on_accept(upper)`` every accepted upper step.  Raises
    :class:`LowerStalled` when a lower phase runs out of sweeps away from a
    critical point.
    """
    problems = list(problems)
    z = as_vector(z0, problems[0].dim)
    if config.gamma_probe and config.method.is_prox:
        probed = probe_gamma(problems, z, np.random.default_rng(config.seed))
        if probed > 0:
            config = config.with_(gamma=probed)
    gamma = config.effective_gamma
    sweeper = sweeper or sweep
    N = len(problems)
    state = LowerState.initial(z, initial_B(problems, config, z))
    sigma0 = np.max(np.abs(state.lam), axis=1)
    upper = UpperState(z=z, sigma=sigma0, outer_index=0,
                       merit_at_z=_merit_at_point(problems, z, sigma0, gamma))
    merits = [upper.merit_at_z]
    steps: list = []
    zs = [upper.z.copy()]
    n_sweeps = 0

    def result(status):
        return OuterResult(z_star=upper.z.copy(), outer_iterations=upper.outer_index,
                           merit_trajectory=merits, z_step_squares=steps, status=status,
                           z_trajectory=zs, sweeps=n_sweeps, upper=upper, state=state)

    if not config.method.is_prox:
        # baselines: every sweep moves z to y+ unconditionally
        while upper.outer_index < config.max_outer:
            report = sweeper(state, problems, config, upper)
            n_sweeps += 1
            upper = update_sigma(upper, report.lambda_plus, config.sigma_margin)
            state = report.state_after
            if on_sweep is not None:
                on_sweep(upper.outer_index, report, upper)
            y_plus = state.y
            steps.append(float(np.sum((y_plus - upper.z) ** 2)))
            upper = upper.replace(z=y_plus, outer_index=upper.outer_index + 1,
                                  merit_at_z=_merit_at_point(problems, y_plus, upper.sigma, gamma))
            merits.append(upper.merit_at_z)
            zs.append(upper.z.copy())
            if on_accept is not None:
                on_accept(upper)
            if stopping_test(steps, config.eps_z, config.stop_window) and \
                    stall_residual(problems, state, upper.z) <= config.kkt_tol:
                return result(Status.CONVERGED)
        return result(Status.MAX_OUTER)

    while upper.outer_index < config.max_outer:
        outer = upper.outer_index

        def hook(report, up, _outer=outer):
            if on_sweep is not None:
                on_sweep(_outer, report, up)

        lr: LowerResult = run_lower(state, problems, config, upper, sweeper, hook)
        n_sweeps += len(lr.reports)
        upper, state = lr.upper, lr.state
        if lr.accepted:
            y_plus = state.y
            step = float(np.sum((y_plus - upper.z) ** 2))
            upper, accepted = accept_z(upper, y_plus, lr.reports[-1].merit_after.total,
                                       upper.merit_at_z, problems, gamma)
            assert accepted
            steps.append(step)
            merits.append(upper.merit_at_z)
            zs.append(upper.z.copy())
            if config.hessian_mode is HessianMode.CURVATURE_REFRESH and not config.method.is_admm:
                state = state.replace(B=refreshed_B(problems, config, upper.z))
            if on_accept is not None:
                on_accept(upper)
            # a tiny step only certifies convergence at a critical point: a
            # cycling lower level can land on z again a few ulps lower
            if stopping_test(steps, config.eps_z, config.stop_window) and \
                    stall_residual(problems, state, upper.z) <= config.kkt_tol:
                return result(Status.CONVERGED)
            continue
        # no strict decrease within the sweep budget; y may sit on z by
        # oscillation alone, so only the criticality residual decides
        if stall_residual(problems, state, upper.z) <= config.kkt_tol:
            return result(Status.LOWER_STALLED_AT_OPTIMUM)
        raise LowerStalled(
            f"lower level found no merit decrease in {config.max_lower_sweeps} sweeps "
            f"(outer iteration {upper.outer_index})", result=result(Status.MAX_OUTER))
    return result(Status.MAX_OUTER)


# ---------------------------------------------------------------------------
# critical point classification
# ---------------------------------------------------------------------------

class Verdict(enum.Enum):
    LOCAL_MINIMIZER = "LOCAL_MINIMIZER"
    SADDLE_OR_OTHER = "SADDLE_OR_OTHER"


@dataclass(frozen=True)
class CriticalPointVerdict:
    """Heuristic label from perturbed restarts; ``escaped_to`` is set only for saddles."""

    label: Verdict
    trials: int
    escaped_to: Optional[np.ndarray] = None
    restarts: int = 0
    max_return_distance: float = 0.0

    def __post_init__(self):
        if (self.escaped_to is not None) != (self.label is Verdict.SADDLE_OR_OTHER):
            raise ValueError("escaped_to must be present exactly for SADDLE_OR_OTHER")

    @property
    def vacuous(self) -> bool:
        return self.trials == 0

    def to_dict(self) -> dict:
        return {
            "label": self.label.value,
            "trials": self.trials,
            "restarts": self.restarts,
            "escaped_to": None if self.escaped_to is None else [float(v) for v in self.escaped_to],
            "max_return_distance": self.max_return_distance,
            "vacuous": self.vacuous,
            "heuristic": True,
        }


def classify_critical_point(problems: Sequence[AgentProblem], config: SolverConfig, z_star,
                            num_trials: int = 8, perturb_scales=(1e-2, 1e-3, 1e-4),
                            tol_return: Optional[float] = None,
                            rng: Optional[np.random.Generator] = None) -> CriticalPointVerdict:
    """Restart the solver from ``z_star + s d`` for random unit directions ``d``.

    Every restart landing within ``tol_return`` (default ``10 sqrt(eps_z)``)
    of ``z_star`` gives LOCAL_MINIMIZER; the first one that does not marks a
    saddle (or other non-minimizing critical point) and records where it went.
    """
    z_star = as_vector(z_star, problems[0].dim)
    if tol_return is None:
        tol_return = 10.0 * np.sqrt(config.eps_z)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    worst = 0.0
    restarts = 0
    for _ in range(num_trials):
        d = rng.standard_normal(z_star.size)
        d /= np.linalg.norm(d)
        for s in perturb_scales:
            restarts += 1
            try:
                res = solve(problems, config, z_star + s * d)
                z_end = res.z_star
            except LowerStalled as exc:
                z_end = exc.result.z_star
            dist = float(np.linalg.norm(z_end - z_star))
            worst = max(worst, dist)
            if dist > tol_return:
                return CriticalPointVerdict(Verdict.SADDLE_OR_OTHER, num_trials, z_end,
                                            restarts, worst)
    return CriticalPointVerdict(Verdict.LOCAL_MINIMIZER, num_trials, None, restarts, worst)
