import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biprox.core import SolverConfig, UpperState
from biprox.errors import LowerStalled
from biprox.globalize import (CriticalPointVerdict, Status, Verdict, accept_z,
                              classify_critical_point, probe_gamma, solve, stall_residual,
                              stopping_test)
from biprox.diagnostics import contraction_ratios, kkt_residual, telescoping_monitor
from biprox.problems import (double_well_suite, lasso_consensus_suite, quadratic_suite,
                             random_lasso_suite)

QUAD = quadratic_suite([1.0, 3.0], [[0.0], [4.0]])
DWELL = double_well_suite([0.0, 0.0, 0.0])


def _upper(z=0.0, merit_at_z=5.0):
    return UpperState(z=[z], sigma=[1.0], merit_at_z=merit_at_z)


def test_accept_z_examples():
    up, ok = accept_z(_upper(), [2.0], 3.0, 5.0)
    assert ok and up.z.tolist() == [2.0] and up.outer_index == 1
    up0 = _upper()
    up, ok = accept_z(up0, [2.0], 5.0, 5.0)
    assert not ok and up is up0


def test_accept_z_caches_merit_at_new_point():
    up = UpperState(z=[0.0], sigma=[0.0, 0.0], merit_at_z=QUAD.total(np.zeros(1)))
    y = np.array([2.0])
    m_y = sum(p.f(y) for p in QUAD.agents) + 0.5 * 2 * 4.0
    new, ok = accept_z(up, y, m_y, up.merit_at_z, QUAD.agents, 1.0)
    assert ok and new.merit_at_z == QUAD.total(y)
    via_formula, _ = accept_z(up, y, m_y, up.merit_at_z, None, 1.0)
    assert via_formula.merit_at_z == pytest.approx(QUAD.total(y), abs=1e-12)


def test_stopping_test_examples():
    assert stopping_test([1e-3, 1e-12], 1e-8, 1)
    assert not stopping_test([1e-3], 1e-8)
    assert not stopping_test([1e-12, 1e-3, 1e-12], 1e-8, 2)
    assert not stopping_test([], 1e-8)
    with pytest.raises(ValueError):
        stopping_test([1.0], 1e-8, 0)


@pytest.mark.parametrize("method", ["caladin-prox", "cadmm-prox", "plain-caladin",
                                    "plain-cadmm"])
def test_solve_quadratic_reaches_weighted_mean(method):
    res = solve(QUAD.agents, SolverConfig(method=method), [0.0])
    assert res.status.converged
    assert abs(res.z_star[0] - 3.0) <= 1e-6
    assert res.outer_iterations <= 500


def test_solve_double_well_from_0_9():
    res = solve(DWELL.agents, SolverConfig(), [0.9])
    assert res.status.converged
    assert abs(res.z_star[0] - 1.0) <= 1e-4


def test_solve_at_optimum_is_immediate():
    res = solve(QUAD.agents, SolverConfig(), [3.0])
    assert res.status.converged and res.outer_iterations <= 1
    assert abs(res.z_star[0] - 3.0) <= 1e-7


@pytest.mark.parametrize("spec", [
    (QUAD, [0.0]), (DWELL, [0.9]), (double_well_suite([0.1, -0.05, 0.0]), [-0.5]),
    (random_lasso_suite(3, 2, 0.1, 0), [0.3, 0.3, 0.3])])
@pytest.mark.parametrize("method", ["caladin-prox", "cadmm-prox"])
def test_outer_invariants(spec, method):
    suite, z0 = spec
    cfg = SolverConfig(method=method)
    sigmas = []
    res = solve(suite.agents, cfg, z0, on_sweep=lambda k, rep, up: sigmas.append(up.sigma))
    m = res.merit_trajectory
    assert all(b < a for a, b in zip(m, m[1:]))
    assert all(s >= 0 for s in res.z_step_squares)
    gaps = [a - b - 0.5 * cfg.gamma * suite.N * s
            for a, b, s in zip(m, m[1:], res.z_step_squares)]
    assert all(g > -1e-12 for g in gaps)
    assert telescoping_monitor(res, cfg.gamma, suite.N).ok
    assert all(np.all(b >= a) for a, b in zip(sigmas, sigmas[1:]))


def test_rejected_sweeps_leave_z_alone():
    zs = []
    res = solve(DWELL.agents, SolverConfig(), [0.9],
                on_sweep=lambda k, rep, up: zs.append((k, up.z.copy(), up.merit_at_z)))
    by_outer = {}
    for k, z, m in zs:
        by_outer.setdefault(k, set()).add((float(z[0]), m))
    assert all(len(v) == 1 for v in by_outer.values())
    assert res.outer_iterations == len(res.z_step_squares)


def test_contraction_on_strongly_convex_suite():
    res = solve(QUAD.agents, SolverConfig(), [0.0])
    ratios = contraction_ratios(res.z_trajectory, [3.0])
    assert ratios.size > 0 and np.max(ratios) < 1.0


def test_kkt_residual_small_at_converged_point():
    res = solve(QUAD.agents, SolverConfig(), [0.0])
    z = res.z_star
    lam = -np.stack([p.grad(z) for p in QUAD.agents])
    lam -= lam.mean(axis=0)
    assert kkt_residual(QUAD.agents, z, lam, 0.0, z) <= 1e-5


def test_lower_stalled_raised_away_from_optimum():
    # gamma = 8 makes the linearized lower level (a gradient step of length
    # 2/(N rho)) unstable near the well, where F'' = 16
    cfg = SolverConfig(gamma=8.0)
    with pytest.raises(LowerStalled) as info:
        solve(DWELL.agents, cfg, [0.05])
    assert info.value.result is not None
    assert stall_residual(DWELL.agents, info.value.result.state, info.value.result.z_star) > 1e-6


def test_cycling_lower_level_is_not_reported_as_converged():
    # one agent, beta = 0: the consensus step reflects y through x+ and the
    # lower level cycles at the kink of |x|; z must not be declared critical
    single = lasso_consensus_suite([[[1.0]]], [[0.3]], 1.0)
    try:
        res = solve(single.agents, SolverConfig(local_update_strategy="exact"), [0.8])
    except LowerStalled as exc:
        res = exc.result
    assert res.status is Status.MAX_OUTER
    assert abs(res.z_star[0]) > 1e-3


def test_max_outer_budget():
    res = solve(QUAD.agents, SolverConfig(max_outer=2), [0.0])
    assert res.status is Status.MAX_OUTER and res.outer_iterations == 2


def test_probe_gamma():
    rng = np.random.default_rng(0)
    assert probe_gamma(QUAD.agents, [0.0], rng) == 0.0
    # f'' = 12 x^2 - 4 = -4 at the origin
    assert probe_gamma(DWELL.agents, [0.0], rng) == pytest.approx(8.0, rel=1e-5)
    res = solve(DWELL.agents, SolverConfig(gamma_probe=True, local_update_strategy="exact"),
                [0.05])
    assert res.status.converged and abs(abs(res.z_star[0]) - 1.0) <= 1e-4


def test_classify_quadratic_optimum():
    v = classify_critical_point(QUAD.agents, SolverConfig(), [3.0], num_trials=3)
    assert v.label is Verdict.LOCAL_MINIMIZER and v.escaped_to is None
    assert v.restarts == 9 and v.to_dict()["heuristic"]


def test_classify_double_well_saddle():
    v = classify_critical_point(DWELL.agents, SolverConfig(), [0.0], num_trials=8)
    assert v.label is Verdict.SADDLE_OR_OTHER
    assert abs(abs(v.escaped_to[0]) - 1.0) <= 1e-3


def test_classify_vacuous():
    v = classify_critical_point(DWELL.agents, SolverConfig(), [0.0], num_trials=0)
    assert v.label is Verdict.LOCAL_MINIMIZER and v.trials == 0 and v.vacuous


def test_verdict_invariant():
    with pytest.raises(ValueError):
        CriticalPointVerdict(Verdict.LOCAL_MINIMIZER, 1, np.zeros(1))
    with pytest.raises(ValueError):
        CriticalPointVerdict(Verdict.SADDLE_OR_OTHER, 1, None)


@settings(max_examples=15, deadline=None)
@given(st.floats(-10.0, 10.0))
def test_quadratic_convergence_from_any_start(z0):
    res = solve(QUAD.agents, SolverConfig(), [z0])
    assert res.status.converged and abs(res.z_star[0] - 3.0) <= 1e-6
