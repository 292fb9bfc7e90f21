"""Command line driver: run, validate, classify and compare experiments.

Every run writes ``trace.csv`` (one row per lower sweep), ``result.json`` and
``config_snapshot.toml``.  Feeding the snapshot back through ``--config``
reproduces the trace byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli

from .core import HessianMode, LocalUpdate, Method, SolverConfig
from .diagnostics import (analytic_reference, critical_point_residual, kkt_residual, lyapunov,
                          sample_points, telescoping_monitor, validate_oracles)
from .errors import Diverged, LowerStalled, OracleFailure, OracleMismatch, SolverError
from .globalize import OuterResult, classify_critical_point, solve
from .problems import SuiteInstance, make_suite
from .simnet import ProtocolSweeper

SCHEMA = "v1"
TRACE_COLUMNS = ("outer_index", "sweep_index", "merit_total", "merit_smooth", "merit_penalty",
                 "z_step_sq", "lyapunov", "local_descent_ok", "consensus_descent_ok",
                 "max_kkt_residual", "sigma_max")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_MONITOR = 0, 1, 2, 3
MERIT_GAP_SLACK = 1e-12

_CONFIG_KEYS = {f.name for f in fields(SolverConfig)}
_RUN_KEYS = {"suite", "z0", "via_protocol"}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TraceRecord:
    outer_index: int
    sweep_index: int
    merit_total: float
    merit_smooth: float
    merit_penalty: float
    z_step_sq: float
    lyapunov: Optional[float]
    local_descent_ok: bool
    consensus_descent_ok: bool
    max_kkt_residual: float
    sigma_max: float

    def row(self) -> list:
        out = []
        for name in TRACE_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


@dataclass
class RunRecord:
    run_id: str
    config_snapshot: str
    trace: list
    result: Optional[OuterResult]
    verdicts: dict = field(default_factory=dict)
    error: Optional[str] = None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def parse_vector(text) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        return np.array([float(v) for v in text], dtype=np.float64)
    if isinstance(text, (int, float)):
        return np.array([float(text)])
    try:
        return np.array([float(v) for v in str(text).split(",") if v.strip()], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    unknown = set(data) - _CONFIG_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


_FLAG_TO_KEY = {
    "method": "method", "gamma": "gamma", "rho": "rho", "beta": "beta", "eps_z": "eps_z",
    "max_outer": "max_outer", "max_lower": "max_lower_sweeps",
    "local_update": "local_update_strategy", "seed": "seed", "sigma_margin": "sigma_margin",
    "hessian_mode": "hessian_mode", "fixed_point_iters": "fixed_point_inner_iters",
    "stop_window": "stop_window", "kkt_tol": "kkt_tol", "gamma_probe": "gamma_probe",
}


def resolve_settings(args) -> dict:
    """Merge the config file (if any) with command-line overrides."""
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, key in _FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if getattr(args, "suite", None):
        data["suite"] = args.suite
    if getattr(args, "z0", None) is not None:
        data["z0"] = args.z0
    if getattr(args, "via_protocol", False):
        data["via_protocol"] = True
    if "suite" not in data:
        raise ConfigError("no suite given (use --suite or a config file)")
    return data


def build_config(settings: dict) -> SolverConfig:
    kw = {k: v for k, v in settings.items() if k in _CONFIG_KEYS}
    if "user_B" in kw and kw["user_B"] is not None:
        kw["user_B"] = tuple(np.asarray(b, dtype=np.float64) for b in kw["user_B"])
    try:
        return SolverConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver config: {exc}") from None


def build_suite(spec: str) -> SuiteInstance:
    try:
        return make_suite(spec)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid suite {spec!r}: {exc}") from None


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (Method, LocalUpdate, HessianMode)):
        return json.dumps(v.value)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, np.ndarray):
        return _toml_value(v.tolist())
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(e) for e in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def snapshot_text(config: SolverConfig, suite_spec: str, z0: np.ndarray, via_protocol: bool) -> str:
    """Flat TOML echo of every setting that influences a run."""
    lines = [f"suite = {_toml_value(suite_spec)}", f"z0 = {_toml_value(z0)}",
             f"via_protocol = {_toml_value(via_protocol)}"]
    for f in fields(SolverConfig):
        v = getattr(config, f.name)
        if v is None:
            continue
        lines.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _lyapunov_hook(suite: SuiteInstance, config: SolverConfig):
    if suite.lower_reference is None or not suite.convexity.is_convex:
        return None
    gamma = config.effective_gamma

    def value(state, z):
        return lyapunov(state, analytic_reference(suite, z, gamma))
    return value


def execute(suite: SuiteInstance, config: SolverConfig, z0: np.ndarray,
            via_protocol: bool = False):
    """Run one experiment and collect the per-sweep trace.

    Returns ``(result, trace, error)``; ``result`` is the partial result when
    the lower level stalls or the iteration diverges.
    """
    trace = []
    gamma = config.effective_gamma
    lyap = _lyapunov_hook(suite, config)
    counter = [0]

    def on_sweep(outer, report, upper):
        counter[0] += 1
        st = report.state_after
        d = st.y - report.y_before if not config.method.is_prox else st.y - upper.z
        lval = lyap(st, upper.z) if lyap is not None else None
        trace.append(TraceRecord(
            outer_index=int(outer), sweep_index=counter[0],
            merit_total=float(report.merit_after.total),
            merit_smooth=float(report.merit_after.smooth_part),
            merit_penalty=float(report.merit_after.penalty_part),
            z_step_sq=float(d @ d), lyapunov=None if lval is None else float(lval),
            local_descent_ok=bool(report.local_descent_ok),
            consensus_descent_ok=bool(report.all_consensus_ok),
            max_kkt_residual=float(kkt_residual(suite.agents, st.y, report.lambda_plus, gamma,
                                                upper.z)),
            sigma_max=float(np.max(upper.sigma))))

    sweeper = ProtocolSweeper(suite.agents, config, z0) if via_protocol else None
    try:
        res = solve(suite.agents, config, z0, sweeper=sweeper, on_sweep=on_sweep)
        return res, trace, None
    except LowerStalled as exc:
        return exc.result, trace, f"LOWER_STALLED: {exc}"
    except (Diverged, OracleFailure) as exc:
        return None, trace, f"{type(exc).__name__}: {exc}"


def monitor_verdicts(result: Optional[OuterResult], config: SolverConfig, N: int) -> dict:
    """Monotone merit, per-step gap and telescoping checks (globalized methods only)."""
    if result is None or not config.method.is_prox:
        return {}
    m = result.merit_trajectory
    s = result.z_step_squares
    gamma = config.effective_gamma
    monotone = all(b < a for a, b in zip(m, m[1:]))
    gap = all(m[k] - m[k + 1] > 0.5 * gamma * N * s[k] - MERIT_GAP_SLACK for k in range(len(s)))
    tele = telescoping_monitor(result, gamma, N).ok
    return {"monotone_merit": bool(monotone), "merit_gap": bool(gap), "telescoping": bool(tele)}


def write_trace(path: Path, trace: Sequence[TraceRecord]) -> None:
    buf = io.StringIO()
    buf.write(f"#schema={SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for rec in trace:
        w.writerow(rec.row())
    path.write_bytes(buf.getvalue().encode("utf-8"))


def read_trace(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"#schema={SCHEMA}":
        raise ValueError("not a v1 trace")
    return list(csv.DictReader(lines[1:]))


def run_experiment(suite_spec: str, config: SolverConfig, z0, out_dir, via_protocol=False,
                   suite: Optional[SuiteInstance] = None) -> RunRecord:
    suite = suite or build_suite(suite_spec)
    z0 = np.zeros(suite.dim) if z0 is None else parse_vector(z0)
    if z0.size != suite.dim:
        raise ConfigError(f"z0 has dimension {z0.size}, suite has {suite.dim}")
    snap = snapshot_text(config, suite.spec or suite_spec, z0, via_protocol)
    run_id = hashlib.sha256(snap.encode()).hexdigest()[:16]
    result, trace, error = execute(suite, config, z0, via_protocol)
    verdicts = monitor_verdicts(result, config, suite.N)
    rec = RunRecord(run_id, snap, trace, result, verdicts, error)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_snapshot.toml").write_text(snap)
        write_trace(out / "trace.csv", trace)
        payload = {"run_id": run_id, "suite": suite.spec or suite_spec,
                   "method": config.method.value, "error": error, "verdicts": verdicts}
        if result is not None:
            payload.update(result.to_dict())
            payload["final_kkt_residual"] = critical_point_residual(suite.agents, result.z_star)
        (out / "result.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return rec


def exit_code(rec: RunRecord) -> int:
    if rec.verdicts and not all(rec.verdicts.values()):
        return EXIT_MONITOR
    if rec.error is not None or rec.result is None:
        return EXIT_NOT_CONVERGED
    return EXIT_OK if rec.result.status.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    settings = resolve_settings(args)
    config = build_config(settings)
    rec = run_experiment(settings["suite"], config, settings.get("z0"), args.out or "run_out",
                         bool(settings.get("via_protocol", False)))
    status = rec.result.status.value if rec.result is not None else "FAILED"
    z = [] if rec.result is None else [float(v) for v in rec.result.z_star]
    print(json.dumps({"run_id": rec.run_id, "status": status, "z_star": z,
                      "verdicts": rec.verdicts, "error": rec.error}))
    for name, ok in rec.verdicts.items():
        if not ok:
            print(f"monitor violation: {name}", file=sys.stderr)
    return exit_code(rec)


def cmd_validate(args) -> int:
    suite = build_suite(args.suite)
    seed = 0 if args.seed is None else args.seed
    pts = sample_points(suite.dim, args.points, seed)
    failed = False
    for i, p in enumerate(suite.agents):
        try:
            validate_oracles(p, pts, h=args.h)
            print(f"agent {i} ({p.name}): ok at {len(pts)} points")
        except OracleMismatch as exc:
            failed = True
            print(f"agent {i} ({p.name}): {exc}", file=sys.stderr)
    return EXIT_MONITOR if failed else EXIT_OK


def cmd_classify(args) -> int:
    if args.run_dir:
        run_dir = Path(args.run_dir)
        settings = load_config_file(run_dir / "config_snapshot.toml")
        z_star = parse_vector(json.loads((run_dir / "result.json").read_text())["z_star"])
    else:
        settings = resolve_settings(args)
        if args.z_star is None:
            raise ConfigError("classify needs --z-star or --run-dir")
        z_star = parse_vector(args.z_star)
    for flag, key in _FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is not None:
            settings[key] = v
    if args.suite:
        settings["suite"] = args.suite
    suite = build_suite(settings["suite"])
    config = build_config(settings)
    if z_star.size != suite.dim:
        raise ConfigError("z_star dimension does not match the suite")
    scales = tuple(float(s) for s in args.scales.split(","))
    if list(scales) != sorted(scales, reverse=True) or any(s <= 0 for s in scales):
        raise ConfigError("scales must be positive and decreasing")
    verdict = classify_critical_point(suite.agents, config, z_star, num_trials=args.trials,
                                      perturb_scales=scales)
    print(json.dumps(verdict.to_dict()))
    return EXIT_OK


def cmd_compare(args) -> int:
    methods = [m for m in (args.methods or "").split(",") if m.strip()]
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    settings = resolve_settings(args)
    out = Path(args.out or "compare_out")
    suite = build_suite(settings["suite"])
    rows, codes = [], []
    for name in methods:
        cfg = build_config({**settings, "method": name})
        rec = run_experiment(settings["suite"], cfg, settings.get("z0"), out / cfg.method.value,
                             bool(settings.get("via_protocol", False)), suite=suite)
        codes.append(exit_code(rec))
        res = rec.result
        rows.append({
            "method": cfg.method.value,
            "status": res.status.value if res is not None else "FAILED",
            "outer_iterations": res.outer_iterations if res is not None else "",
            "sweeps": res.sweeps if res is not None else "",
            "final_merit": repr(float(res.merit_trajectory[-1])) if res is not None else "",
            "final_kkt_residual": repr(critical_point_residual(suite.agents, res.z_star))
            if res is not None else "",
            "z_star": " ".join(repr(float(v)) for v in res.z_star) if res is not None else "",
            "monitors": ";".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in rec.verdicts.items()),
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    widths = {k: max(len(k), *(len(str(r[k])) for r in rows)) for k in rows[0]}
    print("  ".join(k.ljust(widths[k]) for k in rows[0]))
    for r in rows:
        print("  ".join(str(r[k]).ljust(widths[k]) for k in r))
    return max(codes)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    d = SolverConfig()
    p.add_argument("--config", help="flat TOML file with solver settings; flags override it")
    p.add_argument("--suite", help="suite spec, e.g. 'quadratic:a=1,3;c=0,4', 'doublewell:d=0,0,0', "
                                   "'lasso:n=5;N=3;mu=0.1;seed=0', 'broken:N=1'")
    p.add_argument("--method", choices=[m.value for m in Method],
                   help=f"algorithm (default: {d.method.value})")
    p.add_argument("--gamma", type=float, help=f"proximal weight (default: {d.gamma})")
    p.add_argument("--rho", type=float, help=f"penalty / scaled-identity weight (default: {d.rho})")
    p.add_argument("--beta", type=float, help=f"consensus damping (default: {d.beta})")
    p.add_argument("--eps-z", dest="eps_z", type=float,
                   help=f"stop when |z step|^2 <= eps_z (default: {d.eps_z})")
    p.add_argument("--max-outer", dest="max_outer", type=int,
                   help=f"outer iteration budget (default: {d.max_outer})")
    p.add_argument("--max-lower", dest="max_lower", type=int,
                   help=f"sweeps per lower phase (default: {d.max_lower_sweeps})")
    p.add_argument("--local-update", dest="local_update", choices=[u.value for u in LocalUpdate],
                   help="local step (default: lin-upper for globalized, exact for plain methods)")
    p.add_argument("--hessian-mode", dest="hessian_mode", choices=[h.value for h in HessianMode],
                   help=f"choice of B_i (default: {d.hessian_mode.value})")
    p.add_argument("--sigma-margin", dest="sigma_margin", type=float,
                   help=f"strictness margin of the penalty update (default: {d.sigma_margin})")
    p.add_argument("--fixed-point-iters", dest="fixed_point_iters", type=int,
                   help=f"inner iterations of the fixed-point update (default: {d.fixed_point_inner_iters})")
    p.add_argument("--stop-window", dest="stop_window", type=int,
                   help=f"consecutive small steps needed to stop (default: {d.stop_window})")
    p.add_argument("--kkt-tol", dest="kkt_tol", type=float,
                   help=f"residual accepted at a stalled lower phase (default: {d.kkt_tol})")
    p.add_argument("--gamma-probe", dest="gamma_probe", action="store_const", const=True,
                   help="estimate gamma from sampled curvature at z0 (default: off)")
    p.add_argument("--via-protocol", dest="via_protocol", action="store_true",
                   help="route every sweep through the message simulator (default: off)")
    p.add_argument("--seed", type=int, help=f"seed for every random generator (default: {d.seed})")
    p.add_argument("--z0", help="start point, comma separated (default: zeros)")
    p.add_argument("--out", help="output directory (default: run_out / compare_out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biprox", description="Bi-level globalized consensus ADMM / ALADIN experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="solve one suite and write trace.csv, result.json, config_snapshot.toml")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="check subgradient oracles against finite differences")
    p.add_argument("--suite", required=True)
    p.add_argument("--seed", type=int, help="sample seed (default: 0)")
    p.add_argument("--points", type=int, default=20, help="sample points (default: 20)")
    p.add_argument("--h", type=float, default=1e-6, help="difference step (default: 1e-6)")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("classify", help="perturbation test of a critical point; prints JSON")
    _add_solver_flags(p)
    p.add_argument("--z-star", dest="z_star", help="point to classify, comma separated")
    p.add_argument("--run-dir", dest="run_dir", help="directory of a previous run")
    p.add_argument("--trials", type=int, default=8, help="random directions (default: 8)")
    p.add_argument("--scales", default="1e-2,1e-3,1e-4",
                   help="decreasing perturbation sizes (default: 1e-2,1e-3,1e-4)")
    p.set_defaults(func=cmd_classify)
    p = sub.add_parser("compare", help="run several methods on one suite; writes summary.csv")
    _add_solver_flags(p)
    p.add_argument("--methods", help="comma separated methods (at least two)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SolverError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
