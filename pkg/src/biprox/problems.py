"""Built-in problem suites with oracles and ground-truth references."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import AgentProblem, as_vector, spd_solve

GRID_LO, GRID_HI, GRID_STEP = -3.0, 3.0, 1e-6


class Convexity(enum.Enum):
    STRONGLY_CONVEX = "strongly-convex"
    CONVEX = "convex"
    NONCONVEX_SMOOTH = "nonconvex-smooth"
    NONCONVEX_NONSMOOTH = "nonconvex-nonsmooth"

    @property
    def is_convex(self) -> bool:
        return self in (Convexity.STRONGLY_CONVEX, Convexity.CONVEX)


@dataclass(frozen=True)
class SuiteInstance:
    name: str
    agents: tuple
    convexity: Convexity
    analytic_optimum: Optional[np.ndarray]
    lower_bound: float
    spec: str = ""
    smooth: bool = True
    # (z, gamma) -> (y*, lam*) of the proximal consensus problem, when known
    lower_reference: Optional[Callable] = None
    # vectorized total objective and derivative on a scalar grid
    scalar_total: Optional[Callable] = None
    scalar_total_derivative: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.agents[0].dim

    def total(self, x) -> float:
        return sum(p.f(x) for p in self.agents)


# ---------------------------------------------------------------------------
# quadratic
# ---------------------------------------------------------------------------

def _quadratic_agent(a: float, c: np.ndarray, name: str) -> AgentProblem:
    n = c.size

    def value(x):
        d = np.asarray(x, dtype=np.float64) - c
        return 0.5 * a * float(d @ d)

    def subgradient(x):
        return a * (np.asarray(x, dtype=np.float64) - c)

    def exact(lam, y, z, B, gamma):
        H = (a + gamma) * np.eye(n) + B
        return spd_solve(H, a * c + gamma * z + B @ y - lam)

    return AgentProblem(dim=n, value=value, subgradient=subgradient, exact_local_solve=exact,
                        curvature_hint=lambda x: a * np.eye(n), lower_bound=0.0, name=name)


def quadratic_suite(a, c) -> SuiteInstance:
    """Agents ``f_i(x) = a_i/2 |x - c_i|^2``; the optimum is the a-weighted mean of c."""
    a = [float(v) for v in a]
    c = [as_vector(v) for v in c]
    if len(a) != len(c) or not a:
        raise ValueError("need one weight per center")
    if any(v <= 0 for v in a):
        raise ValueError("quadratic weights must be positive")
    n = c[0].size
    if any(ci.size != n for ci in c):
        raise ValueError("all centers must share one dimension")
    agents = tuple(_quadratic_agent(ai, ci, f"quadratic[{i}]") for i, (ai, ci) in enumerate(zip(a, c)))
    a_arr = np.array(a)
    C = np.stack(c)
    optimum = (a_arr @ C) / a_arr.sum()

    def lower_reference(z, gamma):
        z = as_vector(z, n)
        N = len(a)
        y = (a_arr @ C + N * gamma * z) / (a_arr.sum() + N * gamma)
        lam = np.stack([-(a[i] * (y - c[i]) + gamma * (y - z)) for i in range(N)])
        return y, lam

    scalar_total = scalar_deriv = None
    if n == 1:
        cs = C[:, 0]

        def scalar_total(xs):
            return sum(0.5 * a[i] * (xs - cs[i]) ** 2 for i in range(len(a)))

        def scalar_deriv(xs):
            return sum(a[i] * (xs - cs[i]) for i in range(len(a)))

    return SuiteInstance(
        name="quadratic", agents=agents, convexity=Convexity.STRONGLY_CONVEX,
        analytic_optimum=optimum, lower_bound=0.0,
        spec="quadratic:a=" + ",".join(repr(v) for v in a) + ";c="
        + ",".join("/".join(repr(float(e)) for e in ci) for ci in c),
        lower_reference=lower_reference, scalar_total=scalar_total,
        scalar_total_derivative=scalar_deriv, params={"a": a, "c": [ci.tolist() for ci in c]})


# ---------------------------------------------------------------------------
# double well
# ---------------------------------------------------------------------------

def _double_well_agent(d: float, name: str) -> AgentProblem:
    def value(x):
        x = float(np.asarray(x).reshape(-1)[0])
        return (x * x - 1.0) ** 2 + d * x

    def subgradient(x):
        x = float(np.asarray(x).reshape(-1)[0])
        return np.array([4.0 * x * (x * x - 1.0) + d])

    def exact(lam, y, z, B, gamma):
        b = float(np.asarray(B).reshape(-1)[0])
        lam, y, z = float(lam[0]), float(y[0]), float(z[0])

        def obj(x):
            return (x * x - 1) ** 2 + d * x + 0.5 * gamma * (x - z) ** 2 + lam * x \
                + 0.5 * b * (x - y) ** 2

        # stationarity: 4x^3 + (gamma + b - 4) x + (d - gamma z + lam - b y) = 0
        roots = np.roots([4.0, 0.0, gamma + b - 4.0, d - gamma * z + lam - b * y])
        real = [r.real for r in roots if abs(r.imag) <= 1e-7 * (1 + abs(r.real))]
        x = min(real, key=obj)
        for _ in range(3):
            fp = 4 * x ** 3 + (gamma + b - 4) * x + (d - gamma * z + lam - b * y)
            fpp = 12 * x * x + gamma + b - 4
            if fpp <= 0:
                break
            x -= fp / fpp
        return np.array([x])

    return AgentProblem(dim=1, value=value, subgradient=subgradient, exact_local_solve=exact,
                        curvature_hint=lambda x: np.array([[12.0 * float(np.ravel(x)[0]) ** 2 - 4.0]]),
                        lower_bound=-2.0 * abs(d), name=name)


def double_well_suite(d) -> SuiteInstance:
    """Scalar agents ``f_i(x) = (x^2 - 1)^2 + d_i x``.

    ``lower_bound = -2 sum |d_i|`` is a coarse bound, valid for ``|d_i| <= 50``.
    """
    d = [float(v) for v in d]
    if not d:
        raise ValueError("need at least one tilt")
    if any(abs(v) > 50 for v in d):
        raise ValueError("|d_i| <= 50 required for the stored lower bound")
    agents = tuple(_double_well_agent(di, f"doublewell[{i}]") for i, di in enumerate(d))
    N, dsum = len(d), sum(d)

    def scalar_total(xs):
        return N * (xs * xs - 1.0) ** 2 + dsum * xs

    def scalar_deriv(xs):
        return N * 4.0 * xs * (xs * xs - 1.0) + dsum

    return SuiteInstance(
        name="doublewell", agents=agents, convexity=Convexity.NONCONVEX_SMOOTH,
        analytic_optimum=None, lower_bound=-2.0 * sum(abs(v) for v in d),
        spec="doublewell:d=" + ",".join(repr(v) for v in d),
        scalar_total=scalar_total, scalar_total_derivative=scalar_deriv, params={"d": d})


# ---------------------------------------------------------------------------
# lasso
# ---------------------------------------------------------------------------

def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _lasso_agent(A: np.ndarray, b: np.ndarray, mu: float, name: str) -> AgentProblem:
    n = A.shape[1]
    AtA, Atb = A.T @ A, A.T @ b

    def value(x):
        r = A @ np.asarray(x, dtype=np.float64) - b
        return 0.5 * float(r @ r) + mu * float(np.sum(np.abs(x)))

    def subgradient(x):
        x = np.asarray(x, dtype=np.float64)
        r = AtA @ x - Atb
        # minimum-norm element of the subdifferential
        return np.where(x != 0, r + mu * np.sign(x), soft_threshold(r, mu))

    def exact(lam, y, z, B, gamma):
        Q = AtA + gamma * np.eye(n) + B
        q = Atb + gamma * z + B @ y - lam
        x = np.zeros(n)
        for _ in range(100_000):
            x_old = x.copy()
            for j in range(n):
                s = q[j] - Q[j] @ x + Q[j, j] * x[j]
                x[j] = soft_threshold(s, mu) / Q[j, j]
            if np.max(np.abs(x - x_old)) <= 1e-15 * (1.0 + np.max(np.abs(x))):
                break
        return x

    return AgentProblem(dim=n, value=value, subgradient=subgradient, exact_local_solve=exact,
                        curvature_hint=lambda x: AtA.copy(), lower_bound=0.0, name=name)


def lasso_consensus_suite(A_list, b_list, mu: float) -> SuiteInstance:
    """Agents ``f_i(x) = 1/2 |A_i x - b_i|^2 + mu |x|_1``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    A_list = [np.atleast_2d(np.asarray(A, dtype=np.float64)) for A in A_list]
    b_list = [np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in b_list]
    if len(A_list) != len(b_list) or not A_list:
        raise ValueError("need one b per A")
    n = A_list[0].shape[1]
    for A, b in zip(A_list, b_list):
        if A.shape[1] != n or A.shape[0] != b.size:
            raise ValueError("non-conformable lasso data")
    agents = tuple(_lasso_agent(A, b, mu, f"lasso[{i}]") for i, (A, b) in enumerate(zip(A_list, b_list)))
    optimum = None
    if mu == 0:
        AtA = sum(A.T @ A for A in A_list)
        Atb = sum(A.T @ b for A, b in zip(A_list, b_list))
        optimum = np.linalg.solve(AtA, Atb)
    scalar_total = scalar_deriv = None
    if n == 1:
        a2 = sum(float(A[:, 0] @ A[:, 0]) for A in A_list)
        ab = sum(float(A[:, 0] @ b) for A, b in zip(A_list, b_list))
        bb = sum(float(b @ b) for b in b_list)
        N = len(A_list)

        def scalar_total(xs):
            return 0.5 * a2 * xs * xs - ab * xs + 0.5 * bb + N * mu * np.abs(xs)

        def scalar_deriv(xs):
            return a2 * xs - ab + N * mu * np.sign(xs)

    return SuiteInstance(
        name="lasso", agents=agents, convexity=Convexity.CONVEX, analytic_optimum=optimum,
        lower_bound=0.0, smooth=(mu == 0), scalar_total=scalar_total,
        scalar_total_derivative=scalar_deriv,
        params={"A": [A.tolist() for A in A_list], "b": [b.tolist() for b in b_list], "mu": mu})


def random_lasso_suite(n: int, N: int, mu: float, seed: int, m: Optional[int] = None) -> SuiteInstance:
    rng = np.random.default_rng(seed)
    m = m or n + 2
    A_list = [rng.standard_normal((m, n)) for _ in range(N)]
    b_list = [rng.standard_normal(m) for _ in range(N)]
    suite = lasso_consensus_suite(A_list, b_list, mu)
    return _with_spec(suite, f"lasso:n={n};N={N};mu={mu!r};seed={seed};m={m}")


def lasso_reference(suite: SuiteInstance, iters: int = 100_000) -> np.ndarray:
    """Minimizer of the summed lasso objective by a long proximal-gradient run."""
    A_list = [np.asarray(A) for A in suite.params["A"]]
    b_list = [np.asarray(b) for b in suite.params["b"]]
    mu_total = suite.params["mu"] * len(A_list)
    AtA = sum(A.T @ A for A in A_list)
    Atb = sum(A.T @ b for A, b in zip(A_list, b_list))
    step = 1.0 / np.linalg.eigvalsh(AtA)[-1]
    x = np.zeros(AtA.shape[0])
    for _ in range(iters):
        x = soft_threshold(x - step * (AtA @ x - Atb), step * mu_total)
    return x


# ---------------------------------------------------------------------------
# negative control
# ---------------------------------------------------------------------------

def broken_suite(N: int = 1) -> SuiteInstance:
    """``f(x) = x^2`` with a subgradient oracle that always returns 0."""
    agents = tuple(AgentProblem(dim=1, value=lambda x: float(np.ravel(x)[0]) ** 2,
                                subgradient=lambda x: np.zeros(1), lower_bound=0.0,
                                name=f"broken[{i}]") for i in range(N))
    return SuiteInstance(name="broken", agents=agents, convexity=Convexity.STRONGLY_CONVEX,
                         analytic_optimum=np.zeros(1), lower_bound=0.0, spec=f"broken:N={N}")


def _with_spec(suite: SuiteInstance, spec: str) -> SuiteInstance:
    from dataclasses import replace
    return replace(suite, spec=spec)


# ---------------------------------------------------------------------------
# grid oracle (scalar suites)
# ---------------------------------------------------------------------------

def grid_local_minima(total: Callable, derivative: Callable, lo: float = GRID_LO,
                      hi: float = GRID_HI, step: float = GRID_STEP, bisections: int = 50):
    """Local minimizers of a scalar function on ``[lo, hi]``.

    Scans the grid, then polishes each discrete minimum by bisection on the
    derivative.  Returns ``[(x, value), ...]`` sorted by value.
    """
    xs = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    v = total(xs)
    interior = (v[1:-1] <= v[:-2]) & (v[1:-1] <= v[2:])
    found = []
    for k in np.flatnonzero(interior) + 1:
        a, b = xs[k - 1], xs[k + 1]
        da, db = derivative(a), derivative(b)
        if da < 0 < db:
            for _ in range(bisections):
                mid = 0.5 * (a + b)
                if derivative(mid) < 0:
                    a = mid
                else:
                    b = mid
            x = 0.5 * (a + b)
        else:
            x = xs[k]
        if not found or abs(x - found[-1][0]) > 10 * step:
            found.append((float(x), float(total(np.array(x)))))
    return sorted(found, key=lambda t: t[1])


def grid_minimizers(suite: SuiteInstance):
    if suite.scalar_total is None:
        raise ValueError("grid oracle needs a scalar suite")
    return grid_local_minima(suite.scalar_total, suite.scalar_total_derivative)


# ---------------------------------------------------------------------------
# name + parameter string
# ---------------------------------------------------------------------------

def _floats(s: str):
    return [float(t) for t in s.split(",") if t.strip()]


def make_suite(spec: str) -> SuiteInstance:
    """Build a suite from ``name:key=val;key=val``.

    ``quadratic:a=1,3;c=0,4`` (agents separated by ``,``, vector entries by ``/``),
    ``doublewell:d=0,0,0``, ``lasso:n=3;N=2;mu=0.1;seed=0`` and ``broken:N=1``.
    """
    name, _, rest = spec.strip().partition(":")
    kv = {}
    for part in filter(None, (p.strip() for p in rest.split(";"))):
        key, eq, val = part.partition("=")
        if not eq:
            raise ValueError(f"malformed suite parameter {part!r}")
        kv[key.strip()] = val.strip()
    try:
        if name == "quadratic":
            a = _floats(kv["a"])
            c = [[float(e) for e in agent.split("/")] for agent in kv["c"].split(",")]
            suite = quadratic_suite(a, c)
        elif name == "doublewell":
            suite = double_well_suite(_floats(kv["d"]))
        elif name == "lasso":
            return random_lasso_suite(int(kv.get("n", 3)), int(kv.get("N", 2)),
                                      float(kv.get("mu", 0.1)), int(kv.get("seed", 0)),
                                      int(kv["m"]) if "m" in kv else None)
        elif name == "broken":
            suite = broken_suite(int(kv.get("N", 1)))
        else:
            raise ValueError(f"unknown suite {name!r}")
    except KeyError as exc:
        raise ValueError(f"suite {name!r} is missing parameter {exc}") from None
    return _with_spec(suite, spec.strip())
