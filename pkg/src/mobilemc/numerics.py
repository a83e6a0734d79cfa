"""Numerical primitives shared by the channel, design and simulation modules.

The special functions delegate to :mod:`scipy.special`, which evaluates
``erfc`` directly rather than as ``1 - erf`` and is accurate to a few ulp
over the whole real line.  The half-integer Marcum Q-function has an
elementary closed form and is implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg, optimize, special

__all__ = [
    "DomainError",
    "BracketError",
    "NonConvergenceError",
    "InfeasibleError",
    "QuadratureSpec",
    "RootBracket",
    "LPSolution",
    "erf",
    "erfc",
    "erfcx",
    "marcum_q_3_2",
    "noncentral_chi3_cdf",
    "integrate_semi_infinite",
    "integrate_interval",
    "find_root",
    "bisect_vectorized",
    "minimize_scalar_convex",
    "solve_lp",
    "gauss_legendre_nodes",
]

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class BracketError(ValueError):
    """A root bracket does not enclose a sign change."""


class NonConvergenceError(RuntimeError):
    """An iterative method exhausted its budget without meeting tolerance."""


class InfeasibleError(RuntimeError):
    """An optimization problem has no feasible point."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Tolerances for adaptive quadrature.

    Attributes
    ----------
    absolute_tolerance, relative_tolerance : float
        Requested accuracy passed to the adaptive integrator.
    max_subdivisions : int
        Upper bound on the number of adaptive subintervals.
    truncation_sigma : float
        Semi-infinite integrals are truncated at
        ``weight_mean + truncation_sigma * weight_std``.
    """

    absolute_tolerance: float = 1e-13
    relative_tolerance: float = 1e-11
    max_subdivisions: int = 500
    truncation_sigma: float = 10.0

    def __post_init__(self) -> None:
        if not (self.absolute_tolerance > 0 and self.relative_tolerance > 0):
            raise ValueError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be at least 1")
        if self.truncation_sigma < 6:
            raise ValueError("truncation_sigma must be at least 6")


@dataclass(frozen=True)
class RootBracket:
    """Closed interval ``[lo, hi]`` used for root finding and 1-D search."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")


def _as_output(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def erf(x):
    """Error function."""
    return _as_output(special.erf(np.asarray(x, dtype=float)))


def erfc(x):
    """Complementary error function, evaluated without cancellation."""
    return _as_output(special.erfc(np.asarray(x, dtype=float)))


def erfcx(x):
    """Scaled complementary error function ``exp(x**2) * erfc(x)``."""
    return _as_output(special.erfcx(np.asarray(x, dtype=float)))


def _marcum_parts(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Q_{3/2}(a, b) = 1/2 [erfc((b-a)/sqrt2) + erfc((b+a)/sqrt2)] + g(a, b), where
    # g = [exp(-(b-a)^2/2) - exp(-(b+a)^2/2)] / (a sqrt(2 pi)).  The difference is
    # rewritten with expm1 so that small a and small b lose no digits; the a -> 0
    # limit of -expm1(-2ab)/a is 2b.
    safe_a = np.where(a > 0, a, 1.0)
    ratio = np.where(a > 0, -np.expm1(-2.0 * a * b) / safe_a, 2.0 * b)
    g = np.exp(-0.5 * (b - a) ** 2) * ratio / _SQRT2PI
    return g, ratio


def marcum_q_3_2(a, b):
    """Marcum Q-function of order 3/2.

    This is the survival function of a noncentral chi variable with three
    degrees of freedom and noncentrality ``a`` evaluated at ``b``.

    Parameters
    ----------
    a, b : float or array_like
        Non-negative noncentrality and evaluation point.

    Returns
    -------
    float or ndarray
        ``Q_{3/2}(a, b)`` in ``[0, 1]``.

    Raises
    ------
    DomainError
        If any ``a`` or ``b`` is negative or NaN.
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(~(a_arr >= 0)) or np.any(~(b_arr >= 0)):
        raise DomainError("marcum_q_3_2 requires a >= 0 and b >= 0")
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    g, _ = _marcum_parts(a_arr, b_arr)
    with np.errstate(invalid="ignore"):
        q = 0.5 * (special.erfc((b_arr - a_arr) / _SQRT2) + special.erfc((b_arr + a_arr) / _SQRT2)) + g
    q = np.where(np.isinf(b_arr), 0.0, q)
    return _as_output(np.clip(q, 0.0, 1.0))


def noncentral_chi3_cdf(a, b):
    """Lower tail ``1 - Q_{3/2}(a, b)`` computed without subtracting from one.

    The lower-tail form keeps full relative accuracy when the probability is
    small (``b`` well below ``a``); the upper tail is used otherwise.
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(~(a_arr >= 0)) or np.any(~(b_arr >= 0)):
        raise DomainError("noncentral_chi3_cdf requires a >= 0 and b >= 0")
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    g, _ = _marcum_parts(a_arr, b_arr)
    with np.errstate(invalid="ignore"):
        lower = 0.5 * (special.erfc((a_arr - b_arr) / _SQRT2) - special.erfc((a_arr + b_arr) / _SQRT2)) - g
        upper = 1.0 - (
            0.5 * (special.erfc((b_arr - a_arr) / _SQRT2) + special.erfc((b_arr + a_arr) / _SQRT2)) + g
        )
    cdf = np.where(b_arr < a_arr, lower, upper)
    cdf = np.where(np.isinf(b_arr), 1.0, cdf)
    return _as_output(np.clip(cdf, 0.0, 1.0))


def _quad(f, lo, hi, spec, points):
    inner = [p for p in points if lo < p < hi]
    value, abserr, info = integrate.quad(
        f,
        lo,
        hi,
        epsabs=spec.absolute_tolerance,
        epsrel=spec.relative_tolerance,
        limit=spec.max_subdivisions,
        points=sorted(inner) if inner else None,
        full_output=1,
    )[:3]
    return value, abserr, info


def integrate_interval(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    spec: QuadratureSpec = QuadratureSpec(),
    breakpoints: Sequence[float] = (),
) -> float:
    """Adaptive Gauss-Kronrod quadrature of ``f`` over ``[lo, hi]``.

    Raises
    ------
    NonConvergenceError
        If the subdivision budget is exhausted before the error estimate
        meets the requested tolerance.
    """
    if hi <= lo:
        return 0.0
    value, abserr, _ = _quad(f, lo, hi, spec, breakpoints)
    tol = max(spec.absolute_tolerance, spec.relative_tolerance * abs(value))
    # QUADPACK may flag round-off (ier=2) on integrands that are already
    # resolved to machine precision; judge convergence on the error estimate.
    if not np.isfinite(value) or abserr > 10.0 * tol:
        raise NonConvergenceError(
            f"quadrature on [{lo:g}, {hi:g}] did not converge: value={value:g}, error estimate={abserr:g}"
        )
    return float(value)


def integrate_semi_infinite(
    f: Callable[[float], float],
    weight_mean: float,
    weight_std: float,
    spec: QuadratureSpec = QuadratureSpec(),
    breakpoints: Sequence[float] = (),
) -> float:
    """Integrate ``f`` over ``[0, weight_mean + truncation_sigma * weight_std]``.

    ``f`` is expected to contain a weight density concentrated around
    ``weight_mean`` with spread ``weight_std``; mass beyond the truncation
    point is discarded.  The weight mean is always used as an internal
    breakpoint so that narrow peaks are not missed by the initial rule.

    Parameters
    ----------
    f : callable
        Scalar integrand.
    weight_mean, weight_std : float
        Location and spread of the implied weight density.
    spec : QuadratureSpec
        Tolerances and truncation multiplier.
    breakpoints : sequence of float, optional
        Additional points where ``f`` has kinks or sharp features.

    Returns
    -------
    float
    """
    if weight_std < 0:
        raise DomainError("weight_std must be non-negative")
    hi = weight_mean + spec.truncation_sigma * weight_std
    if hi <= 0:
        return 0.0
    points = [weight_mean, *breakpoints]
    if weight_std > 0:
        points += [weight_mean - 3 * weight_std, weight_mean + 3 * weight_std]
    return integrate_interval(f, 0.0, hi, spec, points)


def find_root(f: Callable[[float], float], bracket: RootBracket, tol: float = 1e-12) -> float:
    """Root of a scalar function inside a sign-changing bracket.

    Uses Brent's method, which falls back to bisection whenever the
    interpolation step misbehaves and therefore always converges.

    Raises
    ------
    BracketError
        If ``f(lo)`` and ``f(hi)`` have the same strict sign.
    """
    flo = f(bracket.lo)
    fhi = f(bracket.hi)
    if flo == 0:
        return float(bracket.lo)
    if fhi == 0:
        return float(bracket.hi)
    if np.sign(flo) == np.sign(fhi):
        raise BracketError(f"no sign change on [{bracket.lo}, {bracket.hi}]: f={flo:g}, {fhi:g}")
    return float(optimize.brentq(f, bracket.lo, bracket.hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))


def bisect_vectorized(
    g: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    increasing: bool = True,
    max_iter: int = 200,
    log_scale: bool = False,
) -> np.ndarray:
    """Solve ``g(x) = 0`` elementwise by bisection on arrays of brackets.

    ``g`` must be monotone on each ``[lo, hi]`` with a sign change; the
    direction is given by ``increasing``.  Iteration stops when every bracket
    has shrunk to adjacent floating-point numbers.  With ``log_scale`` the
    midpoint is the geometric mean, which suits brackets spanning decades.
    """
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    lo, hi = np.broadcast_arrays(lo, hi)
    lo, hi = lo.copy(), hi.copy()
    sign = 1.0 if increasing else -1.0
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi) if log_scale else 0.5 * (lo + hi)
        mid = np.clip(mid, lo, hi)
        above = sign * g(mid) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(np.abs(hi), np.abs(lo))):
            break
    return 0.5 * (lo + hi)


def minimize_scalar_convex(
    f: Callable[[float], float], bracket: RootBracket, tol: float = 1e-10
) -> tuple[float, float]:
    """Minimize a convex scalar function on a closed interval.

    Brent's bounded method (golden-section search accelerated by parabolic
    steps) is used; the interval endpoints are also evaluated so that a
    minimizer on the boundary is returned exactly.
    """
    res = optimize.minimize_scalar(
        f, bounds=(bracket.lo, bracket.hi), method="bounded", options={"xatol": tol, "maxiter": 1000}
    )
    candidates = [(float(res.fun), float(res.x)), (float(f(bracket.lo)), bracket.lo), (float(f(bracket.hi)), bracket.hi)]
    fx, x = min(candidates)
    return float(x), float(fx)


@dataclass(frozen=True)
class LPSolution:
    """Result of :func:`solve_lp`.

    Attributes
    ----------
    status : str
        ``"optimal"`` or ``"infeasible"``.
    x : ndarray or None
        Primal solution when optimal.
    objective : float
        ``cost @ x`` (``nan`` when infeasible).
    dual : ndarray or None
        Non-negative multipliers of the ``A x >= b`` rows.
    duality_gap : float
        ``|cost @ x - b @ dual|`` relative to ``max(1, |cost @ x|)``.
    """

    status: str
    x: np.ndarray | None
    objective: float
    dual: np.ndarray | None
    duality_gap: float

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _certify(c, A, b, x, y):
    """Relative duality gap, primal violation and dual violation of ``(x, y)``."""
    primal = float(c @ x)
    gap = abs(primal - float(b @ y)) / max(1.0, abs(primal))
    row_mag = np.abs(A) @ np.abs(x) + np.abs(b)
    primal_violation = float(np.max((b - A @ x) / np.maximum(row_mag, 1e-300), initial=0.0))
    # Reduced costs are compared with the magnitude of the terms that
    # produce them, so cancellation in A.T @ y is not mistaken for an error.
    dual_mag = np.abs(A).T @ y + np.abs(c)
    dual_violation = float(np.max((A.T @ y - c) / np.maximum(dual_mag, 1e-300), initial=0.0))
    return gap, primal_violation, dual_violation


def _polish_vertex(c, A, b, x, tol):
    """Recompute an approximate vertex and its duals exactly from the basis.

    Columns with clearly positive ``x`` are taken as basic and paired with
    the same number of rows of smallest relative slack.  Solving the square
    system for both the primal values and the multipliers removes the
    solver's tolerance-level errors.  Returns ``(x, y)`` or ``None`` when the
    guessed basis is singular or the result is not a certified optimum.
    """
    basic = np.flatnonzero(x > 1e-9 * max(float(np.max(x, initial=0.0)), 1e-300))
    if basic.size == 0:
        y = np.zeros(b.size)
        x0 = np.zeros(c.size)
        ok = np.all(b <= 0) and np.all(c >= 0)
        return (x0, y) if ok else None
    if basic.size > b.size:
        return None
    Ab = A[:, basic]
    rel_slack = (Ab @ x[basic] - b) / np.maximum(np.abs(Ab) @ x[basic] + np.abs(b), 1e-300)
    rows = np.argsort(rel_slack, kind="stable")[: basic.size]
    M = Ab[rows]
    try:
        lu = linalg.lu_factor(M, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        return None
    xb = linalg.lu_solve(lu, b[rows], check_finite=False)
    yr = linalg.lu_solve(lu, c[basic], trans=1, check_finite=False)
    if np.any(xb < -tol * np.max(np.abs(xb))) or np.any(yr < -tol * np.max(np.abs(yr))):
        return None
    xp = np.zeros(c.size)
    xp[basic] = np.maximum(xb, 0.0)
    yp = np.zeros(b.size)
    yp[rows] = np.maximum(yr, 0.0)
    if max(_certify(c, A, b, xp, yp)) > tol:
        return None
    return xp, yp


def solve_lp(cost, constraint_matrix, rhs, certify_tol: float = 1e-8) -> LPSolution:
    """Solve ``min cost @ x`` subject to ``A @ x >= b`` and ``x >= 0``.

    The HiGHS dual simplex solver is used.  Optimality is certified through
    the dual multipliers: the solution is accepted only when it is primal
    feasible, dual feasible and the duality gap is below ``certify_tol``,
    each measured relative to the magnitude of the terms involved.  When the
    solver's own multipliers miss that tolerance, the vertex it reports is
    re-solved exactly from its basis and certified instead.

    Raises
    ------
    NonConvergenceError
        If the solver stops without a certified answer, or reports the
        problem unbounded, which cannot happen for non-negative costs.
    """
    c = np.asarray(cost, dtype=float)
    A = np.atleast_2d(np.asarray(constraint_matrix, dtype=float))
    b = np.asarray(rhs, dtype=float)
    if A.shape != (b.size, c.size):
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}, cost {c.shape}")
    res = optimize.linprog(c, A_ub=-A, b_ub=-b, bounds=(0, None), method="highs-ds")
    if res.status == 2:
        return LPSolution("infeasible", None, math.nan, None, math.nan)
    if res.status == 3:
        raise NonConvergenceError("linear program is unbounded")
    if res.status != 0:
        raise NonConvergenceError(f"linear program solver failed: {res.message}")
    x = np.maximum(res.x, 0.0)
    y = np.maximum(-np.asarray(res.ineqlin.marginals, dtype=float), 0.0)
    checks = _certify(c, A, b, x, y)
    if max(checks) > certify_tol:
        polished = _polish_vertex(c, A, b, x, certify_tol)
        if polished is None:
            gap, pv, dv = checks
            raise NonConvergenceError(
                f"LP solution not certified: gap={gap:.3g}, primal={pv:.3g}, dual={dv:.3g}"
            )
        x, y = polished
    primal = float(c @ x)
    return LPSolution("optimal", x, primal, y, _certify(c, A, b, x, y)[0])


def gauss_legendre_nodes(lo, hi, order: int, panels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on ``[lo, hi]``.

    ``lo`` and ``hi`` may be arrays of equal shape ``S``; the returned nodes
    and weights then have shape ``S + (panels * order,)``.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    edges = np.linspace(0.0, 1.0, panels + 1)
    u = (edges[:-1, None] + 0.5 * (x[None, :] + 1.0) * np.diff(edges)[:, None]).ravel()
    wu = (0.5 * w[None, :] * np.diff(edges)[:, None]).ravel()
    nodes = lo + (hi - lo) * u
    weights = (hi - lo) * wu
    return nodes, weights
