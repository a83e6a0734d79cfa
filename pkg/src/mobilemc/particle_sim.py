"""Hybrid particle / Monte Carlo simulator used as ground truth.

Transceiver motion is simulated explicitly (random walk with the
revert-on-overlap rule, or exact Gaussian displacements), and each
realization of the distance is mapped to its analytic CIR.  Averaging over
realizations gives Monte Carlo estimates of the CIR statistics and of the
drug absorption rate.

Random numbers come from one PCG64 stream per fixed-size block of
realizations, derived from the user seed with :class:`numpy.random.SeedSequence`.
The block layout does not depend on the number of worker threads, so results
are bit-identical for any value of ``MCMC_THREADS``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .channel import EnvParams, absorption_probability_unchecked, cir_unchecked

__all__ = [
    "SimConfig",
    "DistanceTrajectory",
    "RunningMoments",
    "CirMonteCarlo",
    "AbsorptionMonteCarlo",
    "simulate_distance",
    "sample_distances",
    "monte_carlo_cir_stats",
    "monte_carlo_absorption",
    "worker_count",
]

MODES = ("gaussian-displacement", "particle-with-reflection")


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo configuration.

    Attributes
    ----------
    step : float
        Time step of the particle random walk in s.
    horizon : float
        Simulated time span in s (used for single-trajectory output).
    realizations : int
        Number of independent realizations.
    seed : int
        Root seed.
    mode : str
        ``"gaussian-displacement"`` (exact sampling, no reflection) or
        ``"particle-with-reflection"``.
    block_size : int
        Realizations per random stream; fixes the stream layout.
    """

    step: float = 1e-3
    horizon: float = 1.0
    realizations: int = 100_000
    seed: int = 0
    mode: str = "gaussian-displacement"
    block_size: int = 4096

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.realizations < 1:
            raise ValueError("realizations must be at least 1")
        if not self.horizon >= self.step:
            raise ValueError("horizon must be at least one step")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    def blocks(self) -> list[tuple[int, int]]:
        """``(block_index, size)`` pairs covering all realizations."""
        n = self.realizations
        return [(b, min(self.block_size, n - s)) for b, s in enumerate(range(0, n, self.block_size))]

    def rng(self, block: int, stream: int = 0) -> np.random.Generator:
        """Generator for one block (and optional sub-stream)."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(block, stream))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class DistanceTrajectory:
    """One realization of the transceiver distance over time."""

    times: np.ndarray
    distances: np.ndarray

    def __post_init__(self) -> None:
        if self.times.shape != self.distances.shape:
            raise ValueError("times and distances must have equal length")


def worker_count() -> int:
    """Number of worker threads, capped by the ``MCMC_THREADS`` variable."""
    cap = os.environ.get("MCMC_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            pass
    return n


def _map_blocks(fn: Callable[[int, int], object], cfg: SimConfig) -> list:
    blocks = cfg.blocks()
    workers = min(worker_count(), len(blocks))
    if workers <= 1:
        return [fn(b, n) for b, n in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda bn: fn(*bn), blocks))


def _initial_positions(env: EnvParams, n: int) -> tuple[np.ndarray, np.ndarray]:
    tx = np.zeros((n, 3))
    rx = np.full((n, 3), env.r0 / math.sqrt(3.0))
    return tx, rx


def _gaussian_path(env: EnvParams, rng: np.random.Generator, n: int, times: np.ndarray) -> np.ndarray:
    """Exact Brownian sampling of the distance at increasing ``times``."""
    tx, rx = _initial_positions(env, n)
    out = np.empty((n, times.size))
    prev = 0.0
    for k, t in enumerate(times):
        dt = t - prev
        if dt > 0:
            if env.D_Tx > 0:
                tx = tx + rng.normal(0.0, math.sqrt(2.0 * env.D_Tx * dt), size=(n, 3))
            if env.D_Rx > 0:
                rx = rx + rng.normal(0.0, math.sqrt(2.0 * env.D_Rx * dt), size=(n, 3))
        out[:, k] = np.linalg.norm(rx - tx, axis=1)
        prev = t
    return out


def _particle_path(env: EnvParams, rng: np.random.Generator, n: int, times: np.ndarray, step: float) -> np.ndarray:
    """Random walk with revert-on-overlap, recorded at ``times``."""
    tx, rx = _initial_positions(env, n)
    contact = env.a_tx + env.a_rx
    s_tx = math.sqrt(2.0 * env.D_Tx * step)
    s_rx = math.sqrt(2.0 * env.D_Rx * step)
    out = np.empty((n, times.size))
    steps = np.rint(times / step).astype(np.int64)
    current = 0
    for k, target in enumerate(steps):
        while current < target:
            new_tx = tx + rng.normal(0.0, s_tx, size=(n, 3)) if s_tx > 0 else tx
            new_rx = rx + rng.normal(0.0, s_rx, size=(n, 3)) if s_rx > 0 else rx
            ok = np.linalg.norm(new_rx - new_tx, axis=1) >= contact
            tx = np.where(ok[:, None], new_tx, tx)
            rx = np.where(ok[:, None], new_rx, rx)
            current += 1
        out[:, k] = np.linalg.norm(rx - tx, axis=1)
    return out


def _block_distances(env: EnvParams, cfg: SimConfig, block: int, n: int, times: np.ndarray) -> np.ndarray:
    rng = cfg.rng(block)
    order = np.argsort(times, kind="stable")
    sorted_times = times[order]
    if cfg.mode == "gaussian-displacement":
        d = _gaussian_path(env, rng, n, sorted_times)
    else:
        d = _particle_path(env, rng, n, sorted_times, cfg.step)
    out = np.empty_like(d)
    out[:, order] = d
    return out


def sample_distances(env: EnvParams, cfg: SimConfig, times: Sequence[float]) -> np.ndarray:
    """Distance samples for every realization at the requested times.

    Within a realization the samples at different times belong to the same
    trajectory.

    Returns
    -------
    ndarray
        Shape ``(cfg.realizations, len(times))``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    parts = _map_blocks(lambda b, n: _block_distances(env, cfg, b, n, times), cfg)
    return np.concatenate(parts, axis=0)


def simulate_distance(env: EnvParams, cfg: SimConfig) -> DistanceTrajectory:
    """First realization of the distance on the grid ``0, step, ..., horizon``."""
    n_steps = int(math.floor(cfg.horizon / cfg.step + 1e-9))
    times = np.arange(n_steps + 1) * cfg.step
    d = _block_distances(env, cfg, 0, 1, times)[0]
    return DistanceTrajectory(times=times, distances=d)


@dataclass
class RunningMoments:
    """Count, mean and centered sum of squares, mergeable across blocks.

    Works elementwise on arrays; merging uses the pairwise update of Chan,
    Golub and LeVeque so that block order fully determines the result.
    """

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "RunningMoments":
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        return cls(x.shape[0], mean, ((x - mean) ** 2).sum(axis=0))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return RunningMoments(n, mean, m2)

    @property
    def variance(self) -> np.ndarray:
        """Unbiased sample variance."""
        return self.m2 / max(self.count - 1, 1)

    @property
    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.variance / self.count)


def _merge_all(parts: list[RunningMoments]) -> RunningMoments:
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    return acc


def cir_samples(env: EnvParams, r: np.ndarray, tau) -> np.ndarray:
    """CIR of each distance sample; distances inside the receiver give zero."""
    r = np.asarray(r, dtype=float)
    inside = r <= env.a_rx
    h = cir_unchecked(env.a_rx, env.D1, np.where(inside, 2.0 * env.a_rx, r), tau)
    return np.where(inside, 0.0, h)


def absorption_samples(env: EnvParams, r: np.ndarray, T_b: float) -> np.ndarray:
    """Absorption probability of each distance sample; distances inside the receiver give one."""
    r = np.asarray(r, dtype=float)
    inside = r <= env.a_rx
    p = absorption_probability_unchecked(env.a_rx, env.D1, np.where(inside, env.a_rx, r), T_b)
    return np.where(inside, 1.0, np.clip(p, 0.0, 1.0))


@dataclass(frozen=True)
class CirMonteCarlo:
    """Monte Carlo estimates of the CIR statistics at one release time.

    Attributes
    ----------
    tau : ndarray
        Delay grid.
    mean, variance, second_moment, standard_error : ndarray
        Per-delay sample statistics.
    h_grid : ndarray or None
        Levels at which the empirical CDF was evaluated.
    ecdf : ndarray or None
        Shape ``(len(tau), len(h_grid))``.
    """

    tau: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    second_moment: np.ndarray
    standard_error: np.ndarray
    h_grid: np.ndarray | None
    ecdf: np.ndarray | None


def monte_carlo_cir_stats(
    env: EnvParams, cfg: SimConfig, t: float, tau_grid: Sequence[float], h_grid: Sequence[float] | None = None
) -> CirMonteCarlo:
    """Sample mean, variance and empirical CDF of ``h(t, tau)``.

    Each realization draws ``r(t)`` and evaluates the analytic CIR on the
    whole delay grid.
    """
    tau = np.atleast_1d(np.asarray(tau_grid, dtype=float))
    levels = None if h_grid is None else np.sort(np.atleast_1d(np.asarray(h_grid, dtype=float)))

    def block(b: int, n: int):
        r = _block_distances(env, cfg, b, n, np.array([t]))[:, 0]
        h = cir_samples(env, r[:, None], tau[None, :])
        moments = RunningMoments.from_samples(h)
        counts = None
        if levels is not None:
            counts = np.stack([np.searchsorted(np.sort(h[:, j]), levels, side="right") for j in range(tau.size)])
        return moments, counts

    parts = _map_blocks(block, cfg)
    acc = _merge_all([p[0] for p in parts])
    ecdf = None
    if levels is not None:
        ecdf = sum(p[1] for p in parts) / cfg.realizations
    var = acc.variance if acc.count > 1 else np.zeros_like(acc.mean)
    second = acc.m2 / acc.count + acc.mean**2
    return CirMonteCarlo(tau, acc.mean, var, second, acc.standard_error, levels, ecdf)


@dataclass(frozen=True)
class AbsorptionMonteCarlo:
    """Monte Carlo estimates of the drug absorption rate ``g(t)``.

    Attributes
    ----------
    eval_times : ndarray
    mean, variance : ndarray
        Per evaluation time.
    thetas : ndarray or None
        Threshold per evaluation time.
    p_exceed, p_exceed_se : ndarray or None
        Fraction of realizations with ``g(t) >= theta`` and its standard error.
    samples : ndarray or None
        Shape ``(realizations, len(eval_times))`` when requested.
    """

    eval_times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    thetas: np.ndarray | None
    p_exceed: np.ndarray | None
    p_exceed_se: np.ndarray | None
    samples: np.ndarray | None


def monte_carlo_absorption(
    env: EnvParams,
    cfg: SimConfig,
    release_times: Sequence[float],
    alphas: Sequence[float],
    eval_times: Sequence[float],
    theta=None,
    correlated: bool = False,
    keep_samples: bool = False,
    release_chunk: int = 256,
) -> AbsorptionMonteCarlo:
    """Monte Carlo estimate of ``g(t) = sum_i alpha_i h(t_i, t - t_i)``.

    Parameters
    ----------
    release_times, alphas : sequence
        Release schedule.
    eval_times : sequence
        Times at which ``g`` is evaluated.
    theta : float or sequence, optional
        Target absorption rate per evaluation time; enables the exceedance
        estimate ``Pr{g(t) >= theta(t)}``.
    correlated : bool
        If true the distances ``r(t_i)`` of one realization come from a
        single transmitter trajectory.  Otherwise each release gets an
        independent draw from its marginal law, which matches the
        independence used by the convolution formula for ``P_theta``.
    keep_samples : bool
        Return the per-realization values of ``g``.
    """
    t_rel = np.asarray(release_times, dtype=float)
    alpha = np.asarray(alphas, dtype=float)
    if t_rel.shape != alpha.shape:
        raise ValueError("alphas must align with release times")
    t_eval = np.atleast_1d(np.asarray(eval_times, dtype=float))
    thetas = None if theta is None else np.broadcast_to(np.asarray(theta, dtype=float), t_eval.shape)
    active = (alpha != 0) & (t_rel < t_eval.max())
    t_rel, alpha = t_rel[active], alpha[active]

    def block(b: int, n: int):
        g = np.zeros((n, t_eval.size))
        if t_rel.size:
            if correlated:
                r_all = _block_distances(env, cfg, b, n, t_rel)
            for c, s in enumerate(range(0, t_rel.size, release_chunk)):
                tr = t_rel[s : s + release_chunk]
                if correlated:
                    r = r_all[:, s : s + release_chunk]
                else:
                    r = _independent_draws(env, cfg.rng(b, 1 + c), n, tr)
                h = cir_samples(env, r[:, :, None], t_eval[None, None, :] - tr[None, :, None])
                g += np.einsum("nre,r->ne", h, alpha[s : s + release_chunk])
        moments = RunningMoments.from_samples(g)
        hits = None if thetas is None else (g >= thetas[None, :]).sum(axis=0)
        return moments, hits, (g if keep_samples else None)

    parts = _map_blocks(block, cfg)
    acc = _merge_all([p[0] for p in parts])
    p_exceed = se = None
    if thetas is not None:
        p_exceed = sum(p[1] for p in parts) / cfg.realizations
        se = np.sqrt(np.maximum(p_exceed * (1.0 - p_exceed), 0.0) / cfg.realizations)
    samples = np.concatenate([p[2] for p in parts], axis=0) if keep_samples else None
    var = acc.variance if acc.count > 1 else np.zeros_like(acc.mean)
    return AbsorptionMonteCarlo(t_eval, acc.mean, var, thetas, p_exceed, se, samples)


def _independent_draws(env: EnvParams, rng: np.random.Generator, n: int, times: np.ndarray) -> np.ndarray:
    """Independent draws of ``r(t)`` for each time (marginals only)."""
    tx = np.zeros((n, times.size, 3))
    rx = np.full((n, times.size, 3), env.r0 / math.sqrt(3.0))
    if env.D_Tx > 0:
        tx = tx + rng.normal(size=(n, times.size, 3)) * np.sqrt(2.0 * env.D_Tx * times)[None, :, None]
    if env.D_Rx > 0:
        rx = rx + rng.normal(size=(n, times.size, 3)) * np.sqrt(2.0 * env.D_Rx * times)[None, :, None]
    return np.linalg.norm(rx - tx, axis=2)
