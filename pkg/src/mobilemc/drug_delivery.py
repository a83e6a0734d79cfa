"""Minimum-dose release design for a diffusing drug carrier.

A carrier releases ``alpha_i`` drug molecules at ``t_i = (i - 1) T_b`` and
the absorption rate at the target is ``g(t) = sum_{t_i < t} alpha_i h(t_i, t - t_i)``.
The design minimizes ``A = sum alpha_i`` subject to

    E{g(t_n)} - beta * V_upper{g(t_n)} >= theta(t_n)

at sampled instants ``t_n``, where ``V_upper = sum alpha_i sigma(t_i, t - t_i)``
is the Minkowski bound on the standard deviation.  This is a linear program
in ``alpha``.  The design is then assessed through ``P_theta(t) = Pr{g(t) >= theta(t)}``,
computed by convolving the per-release distributions of ``alpha_i h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import signal, special

from .channel import EnvParams, cir_unchecked, distance_moments, peak_radius_unchecked
from .cir_stats import CirStatistics, _mean_closed_form, cir_moments_batch
from .numerics import LPSolution, gauss_legendre_nodes, solve_lp
from .particle_sim import worker_count

__all__ = [
    "ReleaseSchedule",
    "DrugDesignProblem",
    "DrugDesignResult",
    "ConstraintTables",
    "constraint_tables",
    "build_constraint_matrix",
    "design_release",
    "naive_release",
    "absorption_rate_moments",
    "exceedance_probability",
    "chebyshev_lower_bound",
    "evaluate_schedule",
]

CONSTRAINT_GRIDS = ("per-release", "window")


@dataclass(frozen=True)
class ReleaseSchedule:
    """Release instants in s and molecule counts."""

    times: np.ndarray
    alphas: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        alphas = np.asarray(self.alphas, dtype=float)
        if times.shape != alphas.shape or times.ndim != 1:
            raise ValueError("times and alphas must be 1-D arrays of equal length")
        if np.any(alphas < 0):
            raise ValueError("alphas must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "alphas", alphas)

    @property
    def total(self) -> float:
        return float(self.alphas.sum())


@dataclass(frozen=True)
class DrugDesignProblem:
    """Release-design problem.

    Attributes
    ----------
    env : EnvParams
    T : float
        Release window in s; releases happen at ``(i - 1) T / I``.
    T_Rx : float
        Window over which the absorption target must hold, in s.
    I : int
        Number of releases.
    N : int
        Number of constraint instants.  With ``grid="per-release"`` (the
        default) there are ``N`` equally spaced instants in every release
        interval, i.e. spacing ``T_b / N``, over the whole of ``[0, T_Rx]``.
        With ``grid="window"`` there are ``N`` instants ``n T_Rx / N`` in
        total.
    beta : float
        Weight of the standard-deviation margin.
    theta : float, callable or array
        Target absorption rate in 1/s: a constant, a function of time, or
        samples at :meth:`constraint_times`.
    grid : str
        ``"per-release"`` or ``"window"``.
    """

    env: EnvParams
    T: float = 24 * 3600.0
    T_Rx: float = 24 * 3600.0
    I: int = 3000
    N: int = 5
    beta: float = 0.0
    theta: float | Callable | np.ndarray = 1.0
    grid: str = "per-release"

    def __post_init__(self) -> None:
        if self.I < 1 or self.N < 1:
            raise ValueError("I and N must be at least 1")
        if not (self.T > 0 and self.T_Rx > 0):
            raise ValueError("T and T_Rx must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.grid not in CONSTRAINT_GRIDS:
            raise ValueError(f"grid must be one of {CONSTRAINT_GRIDS}")
        if np.any(self.theta_values() < 0):
            raise ValueError("theta must be non-negative")

    @property
    def T_b(self) -> float:
        return self.T / self.I

    def release_times(self) -> np.ndarray:
        return np.arange(self.I) * self.T_b

    def constraint_times(self) -> np.ndarray:
        if self.grid == "window":
            return np.arange(1, self.N + 1) * (self.T_Rx / self.N)
        step = self.T_b / self.N
        count = int(math.floor(self.T_Rx / step + 1e-9))
        return np.arange(1, count + 1) * step

    def theta_values(self) -> np.ndarray:
        times = self.constraint_times()
        if callable(self.theta):
            values = np.asarray(self.theta(times), dtype=float)
        else:
            values = np.asarray(self.theta, dtype=float)
        values = np.broadcast_to(values, times.shape) if values.ndim == 0 else values
        if values.shape != times.shape:
            raise ValueError(f"theta has {values.size} samples but there are {times.size} constraint instants")
        return values

    def with_changes(self, **changes) -> "DrugDesignProblem":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class ConstraintTables:
    """Mean and standard deviation of ``h(t_i, t_n - t_i)`` for all pairs.

    Entries with ``t_i >= t_n`` are zero.  Shapes are ``(n_instants, I)``.
    """

    times: np.ndarray
    release_times: np.ndarray
    mean: np.ndarray
    std: np.ndarray | None

    def matrix(self, beta: float) -> np.ndarray:
        if beta == 0:
            return self.mean
        if self.std is None:
            raise ValueError("standard deviations were not computed for these tables")
        return self.mean - beta * self.std


def constraint_tables(problem: DrugDesignProblem, with_std: bool | None = None, order: int = 24, panels: int = 4) -> ConstraintTables:
    """Compute the coefficient tables of the design constraints.

    Column ``i`` holds the moments of ``h(t_i, .)`` at all later constraint
    instants.  Means use the closed form; standard deviations use centered
    Gauss-Legendre quadrature over the distance law of ``r(t_i)``.  Columns
    are computed in parallel threads.
    """
    env = problem.env
    times = problem.constraint_times()
    t_rel = problem.release_times()
    if with_std is None:
        with_std = problem.beta > 0
    mean = np.zeros((times.size, t_rel.size))
    std = np.zeros((times.size, t_rel.size)) if with_std else None

    def column(i: int) -> None:
        later = times > t_rel[i]
        tau = times[later] - t_rel[i]
        if with_std:
            m, s = cir_moments_batch(env, t_rel[i], tau, order=order, panels=panels)
            std[later, i] = s
        else:
            m = _mean_closed_form(env, t_rel[i], tau)
        mean[later, i] = m

    workers = worker_count()
    if workers > 1 and t_rel.size > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(column, range(t_rel.size)))
    else:
        for i in range(t_rel.size):
            column(i)
    return ConstraintTables(times, t_rel, mean, std)


def build_constraint_matrix(problem: DrugDesignProblem, tables: ConstraintTables | None = None) -> np.ndarray:
    """Matrix of ``m - beta * sigma`` coefficients, shape ``(n_instants, I)``."""
    if tables is None:
        tables = constraint_tables(problem)
    return tables.matrix(problem.beta)


@dataclass(frozen=True)
class DrugDesignResult:
    """Outcome of :func:`design_release`.

    Attributes
    ----------
    alphas : ndarray
        Integer molecule counts (LP solution rounded to nearest).
    total_A : int
        ``alphas.sum()``.
    lp_objective_real : float
        Optimal value of the real-valued LP.
    feasible : bool
        False when no non-negative schedule meets the constraints.
    alphas_real : ndarray
        Unrounded LP solution.
    duality_gap : float
        Relative gap between primal and dual objectives of the certificate.
    method : str
        ``"causal"`` when the forward-substitution solution was certified
        optimal directly, ``"simplex"`` when the general LP solver was used.
    """

    alphas: np.ndarray
    total_A: int
    lp_objective_real: float
    feasible: bool
    alphas_real: np.ndarray = field(repr=False)
    duality_gap: float = math.nan
    method: str = ""

    def schedule(self, problem: DrugDesignProblem) -> ReleaseSchedule:
        return ReleaseSchedule(problem.release_times(), self.alphas.astype(float))


def _newest_release(times: np.ndarray, t_rel: np.ndarray) -> np.ndarray:
    return np.searchsorted(t_rel, times, side="left") - 1


def _staircase_solve(C: np.ndarray, theta: np.ndarray, times: np.ndarray, t_rel: np.ndarray, tol: float = 1e-9, max_passes: int = 50):
    """Exact solve exploiting the causal structure, with a dual certificate.

    Each instant is assigned to the newest release preceding it.  Given the
    earlier releases, the rows of that group bound ``alpha_k`` from below
    (positive coefficient) and, once the margin exceeds the mean, from above
    (negative coefficient).  A forward pass fixes every release at its lower
    or upper bound; the binding rows form a triangular system whose
    multipliers follow by back substitution.  A multiplier's sign tells
    whether the release should sit at its upper bound (stockpiling for later
    intervals) instead, and the passes repeat until the choice is stable.

    Returns
    -------
    result : tuple or None
        ``(alpha, gap)`` when the final schedule is primal feasible and its
        multipliers are non-negative, otherwise ``None``.
    seed : ndarray
        Binding and violated rows of the last pass, a good starting set for
        a general solver.
    """
    n_rel = t_rel.size
    group = _newest_release(times, t_rel)
    scale = max(1.0, float(np.max(np.abs(theta), initial=0.0)))
    starts = np.searchsorted(group, np.arange(n_rel), side="left")
    ends = np.searchsorted(group, np.arange(n_rel), side="right")
    upper = np.zeros(n_rel, dtype=bool)
    seed = np.zeros(0, dtype=int)
    for _ in range(max_passes):
        resid = theta.astype(float).copy()
        alpha = np.zeros(n_rel)
        active = np.full(n_rel, -1)
        blocked = False
        for k in range(n_rel):
            s, e = starts[k], ends[k]
            need = resid[s:e]
            coef = C[s:e, k]
            pos = coef > 0
            neg = coef < 0
            if np.any(~pos & ~neg & (need > tol * scale)):
                blocked = True
            lo, lo_row = 0.0, -1
            if np.any(pos):
                ratio = np.where(pos, need / np.where(pos, coef, 1.0), -np.inf)
                j = int(np.argmax(ratio))
                if ratio[j] > 0:
                    lo, lo_row = float(ratio[j]), s + j
            hi, hi_row = math.inf, -1
            if np.any(neg):
                ratio = np.where(neg, need / np.where(neg, coef, -1.0), np.inf)
                j = int(np.argmin(ratio))
                hi, hi_row = float(ratio[j]), s + j
            if hi < lo or hi < 0:
                blocked = True
            if upper[k] and hi_row >= 0 and hi >= lo and hi > 0:
                alpha[k], active[k] = hi, hi_row
            else:
                alpha[k], active[k] = lo, lo_row
            if alpha[k] > 0:
                resid -= C[:, k] * alpha[k]
            else:
                active[k] = -1
        violated = resid > tol * scale
        acc = np.zeros(n_rel)
        y = np.zeros(times.size)
        reduced = np.zeros(n_rel)
        for k in range(n_rel - 1, -1, -1):
            reduced[k] = 1.0 - acc[k]
            if active[k] >= 0:
                row = active[k]
                y[row] = reduced[k] / C[row, k]
                acc += C[row, :] * y[row]
        seed = np.union1d(active[active >= 0], np.flatnonzero(violated))
        dual_ok = np.all(y >= -tol * max(1.0, float(np.max(np.abs(y))))) and np.all(reduced[active < 0] >= -tol)
        if not blocked and not np.any(violated) and not np.any(group < 0) and dual_ok:
            y = np.maximum(y, 0.0)
            primal = float(alpha.sum())
            gap = abs(primal - float(theta @ y)) / max(1.0, primal)
            if gap <= 1e-8:
                return (alpha, gap), seed
            return None, seed
        new_upper = reduced < 0
        if np.array_equal(new_upper, upper):
            break
        upper = new_upper
    return None, seed


def _lp_with_row_generation(C: np.ndarray, theta: np.ndarray, times, t_rel, seed=None, max_rounds: int = 50):
    """General LP over a growing subset of instants until all are satisfied."""
    n_rows, n_rel = C.shape
    group = _newest_release(times, t_rel)
    # Initial rows: the last instant of every group plus the seed rows.
    last = np.flatnonzero(np.r_[group[1:] != group[:-1], True])
    rows = set(last.tolist())
    if seed is not None:
        rows.update(np.asarray(seed, dtype=int).tolist())
    cost = np.ones(n_rel)
    scale = max(1.0, float(np.max(np.abs(theta), initial=0.0)))
    for _ in range(max_rounds):
        idx = np.array(sorted(rows))
        sol = solve_lp(cost, C[idx], theta[idx])
        if not sol.optimal:
            return sol
        slack = C @ sol.x - theta
        violated = np.flatnonzero(slack < -1e-9 * scale)
        if violated.size == 0:
            dual = np.zeros(n_rows)
            dual[idx] = sol.dual
            return LPSolution(sol.status, sol.x, sol.objective, dual, sol.duality_gap)
        # Add the most violated instant of each affected group.
        order = np.lexsort((slack[violated], group[violated]))
        v = violated[order]
        first = np.r_[True, group[v][1:] != group[v][:-1]]
        rows.update(v[first].tolist())
    return solve_lp(cost, C, theta)


def design_release(problem: DrugDesignProblem, tables: ConstraintTables | None = None) -> DrugDesignResult:
    """Minimum-dose schedule meeting the mean-minus-margin constraints.

    The real-valued LP is solved and each ``alpha_i`` rounded to the nearest
    integer.  Infeasibility (typically a large ``beta``) is reported through
    ``feasible=False`` rather than raised.
    """
    if tables is None:
        tables = constraint_tables(problem)
    C = tables.matrix(problem.beta)
    theta = problem.theta_values()
    times = tables.times
    t_rel = tables.release_times
    fast, seed = _staircase_solve(C, theta, times, t_rel)
    if fast is not None:
        alpha, gap = fast
        method = "causal"
    else:
        sol = _lp_with_row_generation(C, theta, times, t_rel, seed)
        if not sol.optimal:
            empty = np.zeros(t_rel.size)
            return DrugDesignResult(empty.astype(np.int64), 0, math.nan, False, empty, math.nan, "simplex")
        alpha, gap, method = sol.x, sol.duality_gap, "simplex"
    rounded = np.rint(alpha).astype(np.int64)
    return DrugDesignResult(rounded, int(rounded.sum()), float(alpha.sum()), True, alpha, float(gap), method)


def naive_release(problem: DrugDesignProblem, tables: ConstraintTables | None = None) -> ReleaseSchedule:
    """Constant schedule ``alpha_i = alpha_1`` with ``alpha_1`` from the first constraint group.

    ``alpha_1`` is the smallest amount for which the first release alone
    meets the target in its own interval, which is the uniform benchmark
    the optimized designs are compared against.
    """
    if tables is None:
        tables = constraint_tables(problem, with_std=problem.beta > 0)
    C = tables.matrix(problem.beta)
    theta = problem.theta_values()
    group = _newest_release(tables.times, tables.release_times)
    rows = group == 0
    alpha1 = float(np.max(theta[rows] / C[rows, 0]))
    return ReleaseSchedule(problem.release_times(), np.full(problem.I, float(np.rint(alpha1))))


def _pair_moments(env: EnvParams, t_rel: np.ndarray, tau: np.ndarray, order: int = 24, panels: int = 4):
    """Mean and std of ``h(t_i, tau_i)`` for paired arrays."""
    mean = _mean_closed_form(env, t_rel, tau)
    std = np.zeros_like(mean)
    random = (env.D2 * t_rel > 0) & (tau > 0)
    if np.any(random):
        tr, tt = t_rel[random], tau[random]
        mu, sd = distance_moments(env, tr)
        lo = np.maximum(0.0, mu - 10.0 * sd)
        hi = mu + 10.0 * sd
        nodes, w = gauss_legendre_nodes(lo, hi, order, panels)
        dt = env.D2 * tr[:, None]
        r0 = env.r0
        dens = nodes / (r0 * np.sqrt(np.pi * dt)) * 0.5 * np.exp(-((nodes - r0) ** 2) / (4.0 * dt)) * (-np.expm1(-nodes * r0 / dt))
        w = w * dens
        w /= w.sum(axis=1, keepdims=True)
        h = cir_unchecked(env.a_rx, env.D1, nodes, tt[:, None])
        mq = np.sum(h * w, axis=1)
        std[random] = np.sqrt(np.maximum(np.sum((h - mq[:, None]) ** 2 * w, axis=1), 0.0))
    return mean, std


def absorption_rate_moments(env: EnvParams, schedule: ReleaseSchedule, t: float) -> tuple[float, float]:
    """Mean of ``g(t)`` and the Minkowski upper bound on its standard deviation."""
    past = (schedule.times < t) & (schedule.alphas > 0)
    if not np.any(past):
        return 0.0, 0.0
    t_rel = schedule.times[past]
    alpha = schedule.alphas[past]
    m, s = _pair_moments(env, t_rel, t - t_rel)
    return float(alpha @ m), float(alpha @ s)


def chebyshev_lower_bound(beta: float) -> float:
    """Lower bound ``max(0, 1 - 1/beta^2)`` on ``P_theta`` for a design with margin ``beta``.

    Only informative for ``beta > 1``.
    """
    if beta <= 0:
        return 0.0
    return max(0.0, 1.0 - 1.0 / beta**2)


def exceedance_probability(
    env: EnvParams,
    schedule: ReleaseSchedule,
    theta: float,
    t: float,
    grid_resolution: int = 4096,
    resolve_bins: float = 8.0,
    lump_fraction: float = 0.05,
) -> float:
    """``P_theta(t) = Pr{g(t) >= theta}`` assuming independent releases.

    Each release contributes ``alpha_i h(t_i, t - t_i)``, whose law is
    discretized on a uniform grid by differences of its exact CDF; the
    probability mass functions are convolved and the result read at
    ``theta``.  Because every contribution is non-negative, mass beyond the
    grid can be dropped without affecting ``Pr{g < theta}``.

    Releases whose spread ``alpha_i sigma_i`` is below ``resolve_bins`` grid
    bins and below ``lump_fraction`` of the total spread are not
    discretized; their sum is represented by a Gaussian with the
    exact total mean and variance, applied as a final smoothing step.
    Releases with a deterministic distance shift the grid exactly.  The
    rounding of discretized releases to bin centres is undone by Gaussian
    smoothing with the matching variance.

    Parameters
    ----------
    theta : float
        Target rate in 1/s.
    t : float
        Evaluation time in s.
    grid_resolution : int
        Number of bins on ``[0, theta_hi)``, where ``theta_hi`` slightly
        exceeds ``theta``.
    """
    if theta <= 0:
        return 1.0
    past = (schedule.times < t) & (schedule.alphas > 0)
    if not np.any(past):
        return 0.0
    t_rel = schedule.times[past]
    alpha = schedule.alphas[past]
    tau = t - t_rel
    a, D1 = env.a_rx, env.D1
    h_star = cir_unchecked(a, D1, peak_radius_unchecked(a, D1, tau), tau)
    if theta > float(alpha @ h_star):
        return 0.0
    m, s = _pair_moments(env, t_rel, tau)
    deterministic = (env.D2 * t_rel == 0)
    shift = float(alpha[deterministic] @ m[deterministic])
    rand = ~deterministic
    spread = alpha * s
    lump_var = 0.0
    lump_mean = 0.0
    # Grid: provisional bin width from theta, then widened to cover the
    # Gaussian smoothing of the lumped part.
    delta = theta / grid_resolution
    total_sd = math.sqrt(float(np.sum(spread[rand] ** 2)))
    small = rand & (spread < resolve_bins * delta) & (spread < lump_fraction * total_sd)
    lump_mean = float(alpha[small] @ m[small])
    lump_var = float(np.sum(spread[small] ** 2))
    lump_sd = math.sqrt(lump_var)
    theta_hi = theta + 10.0 * lump_sd
    delta = theta_hi / grid_resolution
    edges = np.arange(1, grid_resolution + 1) * delta
    stats = CirStatistics(env)
    pmf = np.zeros(grid_resolution)
    pmf[0] = 1.0
    offset = shift + lump_mean
    for i in np.flatnonzero(rand & ~small):
        cdf = np.asarray(stats.cdf(t_rel[i], tau[i], edges / alpha[i]))
        masses = np.diff(np.r_[0.0, cdf])
        pmf = signal.fftconvolve(pmf, masses)[:grid_resolution]
        np.maximum(pmf, 0.0, out=pmf)
        offset += 0.5 * delta
    x = np.arange(grid_resolution) * delta + offset
    # Each discretized release is rounded to its bin centre; adding that
    # rounding noise back (uniform, variance delta^2/12) removes the lattice
    # error of reading a step function at theta.
    n_conv = int(np.count_nonzero(rand & ~small))
    smooth_sd = math.sqrt(lump_var + n_conv * delta * delta / 12.0)
    if smooth_sd > 0:
        below = 0.5 * special.erfc(-(theta - x) / (math.sqrt(2.0) * smooth_sd))
    else:
        below = (x < theta).astype(float)
    p_below = float(pmf @ below)
    return float(min(1.0, max(0.0, 1.0 - p_below)))


def evaluate_schedule(env: EnvParams, schedule: ReleaseSchedule, times, theta, beta: float, grid_resolution: int = 4096):
    """Table of ``E{g}``, ``V_upper``, ``P_theta`` and the Chebyshev bound at ``times``.

    Returns
    -------
    dict of ndarray
        Keys ``t_s``, ``E_g``, ``V_upper``, ``P_theta``, ``chebyshev_bound``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    thetas = np.broadcast_to(np.asarray(theta(times) if callable(theta) else theta, dtype=float), times.shape)
    e_g = np.empty(times.size)
    v_up = np.empty(times.size)
    p_theta = np.empty(times.size)
    for k, (tk, th) in enumerate(zip(times, thetas)):
        e_g[k], v_up[k] = absorption_rate_moments(env, schedule, tk)
        p_theta[k] = exceedance_probability(env, schedule, float(th), tk, grid_resolution)
    bound = np.full(times.size, chebyshev_lower_bound(beta))
    return {"t_s": times, "E_g": e_g, "V_upper": v_up, "P_theta": p_theta, "chebyshev_bound": bound}
