"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``criterion N: PASS|FAIL ...`` line; the lines are
also collected into a summary section at the end of the pytest run.
"""

import functools
import json

import numpy as np

from biprox.core import LowerState, Method, SolverConfig, UpperState, identity_B
from biprox.diagnostics import (analytic_reference, contraction_ratios, lyapunov_decrease_check,
                                telescoping_monitor)
from biprox.errors import LowerStalled, MissingUpload
from biprox.globalize import Verdict, classify_critical_point, solve
from biprox.harness import main
from biprox.lower import (consensus_update_admm, consensus_update_aladin,
                          local_update_fixed_point, local_update_linearized_lower, sweep)
from biprox.merit import (consensus_directional_derivative, directional_derivative_numeric,
                          merit, update_sigma)
from biprox.problems import (double_well_suite, grid_minimizers, lasso_consensus_suite,
                             quadratic_suite, random_lasso_suite)
from biprox.simnet import ProtocolSweeper
from conftest import ACCEPTANCE_LINES

PROX = ("caladin-prox", "cadmm-prox")
ALL_METHODS = ("caladin-prox", "cadmm-prox", "plain-caladin", "plain-cadmm")
STRATEGIES = ("lin-upper", "lin-lower", "fixed-point", "exact")


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def run_set():
    """The suite runs shared by the descent, gap and telescoping criteria."""
    return [
        (quadratic_suite([1.0, 3.0], [[0.0], [4.0]]), np.array([0.0])),
        (double_well_suite([0.0, 0.0, 0.0]), np.array([0.9])),
        (double_well_suite([0.1, -0.05, 0.0]), np.array([-0.5])),
        (random_lasso_suite(3, 2, 0.1, 0), np.full(3, 0.3)),
    ]


@functools.lru_cache(maxsize=None)
def all_runs():
    """Every prox method x local update x suite, with its per-sweep reports."""
    out = []
    for suite, z0 in run_set():
        for method in PROX:
            for strategy in STRATEGIES:
                if strategy == "exact" and any(p.exact_local_solve is None for p in suite.agents):
                    continue
                cfg = SolverConfig(method=method, local_update_strategy=strategy)
                reports = []
                try:
                    res = solve(suite.agents, cfg, z0,
                                on_sweep=lambda k, rep, up: reports.append(rep))
                except LowerStalled as exc:
                    res = exc.result
                out.append((f"{suite.spec}|{method}|{strategy}", suite, cfg, res, reports))
    return tuple(out)


def _smooth_suites():
    return [quadratic_suite([1.0, 3.0], [[0.0], [4.0]]),
            quadratic_suite([1.0, 2.0, 4.0], [[0.0, 1.0], [2.0, 2.0], [1.0, -1.0]]),
            double_well_suite([0.0, 0.0, 0.0]), double_well_suite([0.1, -0.05, 0.0]),
            random_lasso_suite(3, 2, 0.0, 1)]


def test_criterion_01_merit_identity():
    suites = _smooth_suites() + [random_lasso_suite(3, 2, 0.1, 0)]
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(100):
        suite = suites[k % len(suites)]
        z = rng.uniform(-3, 3, suite.dim)
        sigma = rng.uniform(0, 5, suite.N)
        gamma = float(rng.uniform(0, 5))
        m = merit(suite.agents, np.tile(z, (suite.N, 1)), z, z, sigma, gamma).total
        worst = max(worst, abs(m - sum(p.f(z) for p in suite.agents)))
    ok = worst == 0.0
    report(1, ok, f"max |merit(z,z,z) - sum f(z)| = {worst!r} over 100 pairs")
    assert ok


def test_criterion_02_lemma1_directional_derivative():
    # exact local solves make g_i the true gradient of F_i^z at x_i+
    suites = _smooth_suites()
    rng = np.random.default_rng(2)
    t_min = 1e-6
    t_seq = (1e-2, 1e-3, 1e-4, 1e-5, t_min)
    worst_ratio = 0.0
    for k in range(50):
        suite = suites[k % len(suites)]
        cfg = SolverConfig(local_update_strategy="exact")
        z = rng.uniform(-2, 2, suite.dim)
        state = LowerState.initial(z, identity_B(suite.N, suite.dim, cfg.rho))
        upper = UpperState(z=z, sigma=rng.uniform(0, 3, suite.N))
        for _ in range(int(rng.integers(1, 4))):
            rep = sweep(state, suite.agents, cfg, upper)
            upper = update_sigma(upper, rep.lambda_plus, cfg.sigma_margin)
            state = rep.state_after
        x, y_plus = state.x, state.y
        N, n = x.shape

        def phi(flat, sigma=upper.sigma):
            return merit(suite.agents, flat.reshape(N, n), y_plus, z, sigma, cfg.gamma).total

        formula = consensus_directional_derivative(state, upper.sigma, y_plus)
        num = directional_derivative_numeric(phi, x.ravel(), (y_plus - x).ravel(), t_seq)
        tol = 10 * t_min * (1 + abs(num.value))
        worst_ratio = max(worst_ratio, abs(num.value - formula) / tol)
    ok = worst_ratio <= 1.0
    report(2, ok, f"worst |numeric - formula| / tolerance = {worst_ratio:.3e} over 50 instances")
    assert ok


def test_criterion_03_descent_implications():
    local_checked = local_bad = cons_checked = cons_bad = slope_bad = 0
    where = {}
    for name, suite, cfg, res, reports in all_runs():
        for rep in reports:
            if rep.local_descent_ok:
                local_checked += 1
                if not rep.merit_local.total < rep.merit_before.total:
                    local_bad += 1
                    where[name] = where.get(name, 0) + 1
            if rep.all_consensus_ok and np.max(rep.delta_x_tilde) > 0:
                cons_checked += 1
                if not rep.merit_after.total < rep.merit_local.total:
                    cons_bad += 1
                    where[name] = where.get(name, 0) + 1
                if not rep.consensus_slope < 0:
                    slope_bad += 1
    ok = local_bad == 0 and cons_bad == 0
    worst = sorted(where.items(), key=lambda kv: -kv[1])[:3]
    report(3, ok, f"local step {local_bad}/{local_checked} violations, consensus step "
                  f"{cons_bad}/{cons_checked} violations (directional slope >= 0 in {slope_bad}); "
                  f"worst runs {worst}")
    assert ok


def test_criterion_04_lyapunov_decrease():
    suite = quadratic_suite([1.0, 3.0, 2.0], [[0.0], [4.0], [-1.0]])
    rng = np.random.default_rng(4)
    z = np.array([-1.5])
    ref = analytic_reference(suite, z, 1.0)
    cfg = SolverConfig(method="caladin-prox", local_update_strategy="exact", beta=0.0)
    Bs = {"rho I": identity_B(3, 1, 10.0),
          "random SPD": np.stack([np.array([[v]]) for v in rng.uniform(0.5, 20.0, 3)])}
    summary, ok = [], True
    for label, B in Bs.items():
        state = LowerState.initial(z, B)
        upper = UpperState(z=z, sigma=np.zeros(3))
        states = [state]
        for _ in range(200):
            state = sweep(state, suite.agents, cfg, upper).state_after
            states.append(state)
        chk = lyapunov_decrease_check(states, ref, convex=True, rtol=1e-10)
        ok = ok and chk.ok and len(chk.differences) == 200
        summary.append(f"{label}: max diff {max(chk.differences):.3e}")
    # matrix-valued random SPD weights in two dimensions as well
    suite2 = quadratic_suite([1.0, 2.0, 4.0], [[0.0, 1.0], [2.0, 2.0], [1.0, -1.0]])
    z2 = np.array([0.5, -0.5])
    M = rng.normal(size=(3, 2, 2))
    B2 = np.einsum("kij,klj->kil", M, M) + 0.5 * np.eye(2)
    state = LowerState.initial(z2, B2)
    states = [state]
    for _ in range(200):
        state = sweep(state, suite2.agents, cfg, UpperState(z=z2, sigma=np.zeros(3))).state_after
        states.append(state)
    chk = lyapunov_decrease_check(states, analytic_reference(suite2, z2, 1.0), rtol=1e-10)
    ok = ok and chk.ok
    summary.append(f"random SPD 2x2: max diff {max(chk.differences):.3e}")
    report(4, ok, "; ".join(summary))
    assert ok


def test_criterion_05_outer_merit_gap():
    worst = np.inf
    count = 0
    for name, suite, cfg, res, _ in all_runs():
        m, s = res.merit_trajectory, res.z_step_squares
        for k in range(len(s)):
            count += 1
            worst = min(worst, (m[k] - m[k + 1]) - (0.5 * cfg.gamma * suite.N * s[k] - 1e-12))
    ok = count > 0 and worst > 0
    report(5, ok, f"{count} accepted steps, smallest slack {worst:.3e}")
    assert ok


def test_criterion_06_telescoping():
    bad = [name for name, suite, cfg, res, _ in all_runs()
           if not telescoping_monitor(res, cfg.gamma, suite.N).ok]
    ok = not bad
    report(6, ok, f"{len(all_runs())} runs, violations in {bad}")
    assert ok


def test_criterion_07_reduction_equivalence():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        N, n = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        rho, beta = float(rng.uniform(0.1, 50)), float(rng.uniform(0, 5))
        x, g, y = rng.normal(size=(N, n)), rng.normal(size=(N, n)), rng.normal(size=n)
        a = consensus_update_aladin(x, g, identity_B(N, n, rho), beta, y)
        b = consensus_update_admm(x, -g, rho, beta, y)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-12
    report(7, ok, f"max |y_aladin - y_admm| = {worst:.3e} over 100 states")
    assert ok


def test_criterion_08_known_optimum_and_contraction():
    suite = quadratic_suite([1.0, 3.0], [[0.0], [4.0]])
    lines, ok = [], True
    for method in ALL_METHODS:
        res = solve(suite.agents, SolverConfig(method=method), [0.0])
        err = abs(res.z_star[0] - 3.0)
        good = res.status.converged and err <= 1e-6 and res.outer_iterations <= 500
        ok = ok and good
        lines.append(f"{method} |z-3|={err:.1e} outer={res.outer_iterations}")
    worst = 0.0
    for s in (suite, quadratic_suite([1.0, 3.0, 2.0], [[0.0], [4.0], [-1.0]]),
              quadratic_suite([1.0, 2.0, 4.0], [[0.0, 1.0], [2.0, 2.0], [1.0, -1.0]])):
        for method in PROX:
            res = solve(s.agents, SolverConfig(method=method), np.zeros(s.dim))
            worst = max(worst, float(np.max(contraction_ratios(res.z_trajectory,
                                                               s.analytic_optimum))))
    ok = ok and worst < 1.0
    report(8, ok, "; ".join(lines) + f"; max contraction ratio {worst:.4f}")
    assert ok


def test_criterion_09_nonconvex_local_optimality():
    suite = double_well_suite([0.0, 0.0, 0.0])
    cfg = SolverConfig()
    res = solve(suite.agents, cfg, [0.9])
    grid = min((x for x, _ in grid_minimizers(suite)), key=lambda x: abs(x - 0.9))
    err = abs(res.z_star[0] - grid)
    at_opt = classify_critical_point(suite.agents, cfg, res.z_star, num_trials=8)
    at_zero = classify_critical_point(suite.agents, cfg, [0.0], num_trials=8)
    ok = (res.status.converged and err <= 1e-4 and at_opt.label is Verdict.LOCAL_MINIMIZER
          and at_zero.label is Verdict.SADDLE_OR_OTHER)
    report(9, ok, f"|z*-{grid:.6f}|={err:.1e}; optimum {at_opt.label.value}; "
                  f"0 -> {at_zero.label.value} (escaped to {at_zero.escaped_to})")
    assert ok


def test_criterion_10_local_update_variants():
    suite = quadratic_suite([1.0, 3.0], [[0.0], [4.0]])
    errs = {}
    for method in PROX:
        for strategy in STRATEGIES:
            res = solve(suite.agents, SolverConfig(method=method, local_update_strategy=strategy),
                        [0.0])
            errs[f"{method}/{strategy}"] = abs(res.z_star[0] - 3.0) if res.status.converged \
                else np.inf
    rng = np.random.default_rng(10)
    bitwise = True
    lasso = random_lasso_suite(3, 2, 0.0, 3).agents[0]
    for p in (suite.agents[0], double_well_suite([0.3]).agents[0], lasso):
        for _ in range(20):
            n = p.dim
            y, z, lam = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
            M = rng.normal(size=(n, n))
            B = M @ M.T + np.eye(n)
            gamma = float(rng.uniform(0, 3))
            a = local_update_fixed_point(p, y, z, lam, B, gamma, 1)
            b = local_update_linearized_lower(p, y, z, lam, B, gamma)
            bitwise = bitwise and a.tobytes() == b.tobytes()
    worst = max(errs.values())
    ok = worst <= 1e-6 and bitwise
    report(10, ok, f"max |z*-3| over 8 method/update pairs = {worst:.1e}; "
                   f"iters=1 fixed point bitwise equal: {bitwise}")
    assert ok


def test_criterion_11_protocol_equivalence():
    suites = [quadratic_suite([1.0, 3.0, 2.0], [[0.0], [4.0], [-1.0]]),
              double_well_suite([0.0, 0.0, 0.0]), double_well_suite([0.1, -0.05, 0.0]),
              random_lasso_suite(3, 2, 0.1, 0)]
    rng = np.random.default_rng(11)
    mismatches = []
    for k in range(20):
        suite = suites[k % len(suites)]
        method = ALL_METHODS[(k // len(suites)) % 4]
        cfg = SolverConfig(method=method, max_outer=25)
        z0 = rng.uniform(-1.5, 1.5, suite.dim)
        direct = solve(suite.agents, cfg, z0)
        via = solve(suite.agents, cfg, z0, sweeper=ProtocolSweeper(suite.agents, cfg, z0))
        same = (np.array(direct.z_trajectory).tobytes() == np.array(via.z_trajectory).tobytes()
                and np.array(direct.merit_trajectory).tobytes()
                == np.array(via.merit_trajectory).tobytes()
                and direct.state.x.tobytes() == via.state.x.tobytes()
                and direct.state.lam.tobytes() == via.state.lam.tobytes())
        if not same:
            mismatches.append(k)
    suite = suites[0]
    cfg = SolverConfig()
    ps = ProtocolSweeper(suite.agents, cfg, [0.5], silent=(1,), tick_budget=5)
    try:
        solve(suite.agents, cfg, [0.5], sweeper=ps)
        fault = "no error"
    except MissingUpload:
        m = ps.master
        untouched = (m.round == 0 and np.all(m.state.y == 0.5) and np.all(m.state.x == 0.5)
                     and not np.any(m.state.lam))
        fault = "MISSING_UPLOAD" if untouched else "partial state"
    ok = not mismatches and fault == "MISSING_UPLOAD"
    report(11, ok, f"20 seeded runs, bitwise mismatches {mismatches}; silent agent -> {fault}")
    assert ok


def test_criterion_12_reproducibility(tmp_path):
    cases = [
        ["--suite", "quadratic:a=1,3;c=0,4"],
        ["--suite", "doublewell:d=0,0,0", "--z0", "0.9", "--method", "cadmm-prox"],
        ["--suite", "doublewell:d=0.1,-0.05,0", "--z0", "-0.5", "--local-update", "exact"],
        ["--suite", "lasso:n=3;N=2;mu=0.1;seed=0", "--z0", "0.3,0.3,0.3", "--via-protocol"],
        ["--suite", "quadratic:a=1,3;c=0,4", "--method", "plain-cadmm", "--seed", "9"],
    ]
    differing = []
    for k, argv in enumerate(cases):
        first, second = tmp_path / f"a{k}", tmp_path / f"b{k}"
        main(["run", *argv, "--out", str(first)])
        main(["run", "--config", str(first / "config_snapshot.toml"), "--out", str(second)])
        if (first / "trace.csv").read_bytes() != (second / "trace.csv").read_bytes():
            differing.append(k)
        rid = json.loads((first / "result.json").read_text())["run_id"]
        if rid != json.loads((second / "result.json").read_text())["run_id"]:
            differing.append(k)
    ok = not differing
    report(12, ok, f"{len(cases)} snapshots re-run, byte-differing traces {differing}")
    assert ok
