"""On-off keying link design with outdated channel state information.

The transmitter knows the distance ``r0`` only at the start of a frame of
``I`` bits.  For bit ``i`` released at ``t_i = (i - 1) T_b`` the number of
absorbed molecules is modeled as Gaussian with mean ``alpha_i p + eta`` and
variance ``alpha_i p (1 - p) + eta``, where ``p = p(t_i, T_b)`` is random
through ``r(t_i)`` and ``eta`` is the mean (and variance) of the noise.  With
equiprobable bits and a threshold ``xi`` the bit error probability is

    P_b(i) = 1/2 - 1/4 erf((xi - eta) / sqrt(2 eta)) + 1/4 E_r{erf(zeta_i)},
    zeta_i = (xi - alpha_i p - eta) / sqrt(2 (alpha_i p (1 - p) + eta)).

Inside the receiver (``r < a_rx``) the absorption probability is taken to
be one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .channel import DistanceLaw, EnvParams, absorption_probability_unchecked
from .cir_stats import CirStatistics
from .numerics import (
    InfeasibleError,
    QuadratureSpec,
    RootBracket,
    bisect_vectorized,
    gauss_legendre_nodes,
    integrate_semi_infinite,
    minimize_scalar_convex,
)

__all__ = [
    "McLinkConfig",
    "McDesignResult",
    "ReleaseProfile",
    "FrameDuration",
    "BerModel",
    "bit_error_probability",
    "optimize_threshold_uniform",
    "optimize_release",
    "optimal_frame_duration",
    "efficiency_curve",
    "design_link",
    "largest_remainder_round",
]


@dataclass(frozen=True)
class McLinkConfig:
    """Link parameters.

    Attributes
    ----------
    env : EnvParams
    I : int
        Bits per frame.
    T_b : float
        Bit interval in s.
    eta : float
        Mean and variance of the noise count.
    A : int
        Molecule budget per frame.
    psi : float
        Efficiency floor for the frame-duration design.
    P : float
        Required probability of meeting the efficiency floor.
    """

    env: EnvParams
    I: int = 30
    T_b: float = 10.0
    eta: float = 1.0
    A: int = 10_000
    psi: float = 0.02
    P: float = 0.8

    def __post_init__(self) -> None:
        if self.I < 1:
            raise ValueError("I must be at least 1")
        if not self.T_b > 0:
            raise ValueError("T_b must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.A < self.I:
            raise ValueError("A must be at least I")
        if not (0 < self.psi < 1 and 0 < self.P < 1):
            raise ValueError("psi and P must lie in (0, 1)")

    @property
    def T(self) -> float:
        """Frame duration ``I * T_b`` in s."""
        return self.I * self.T_b

    def release_time(self, i: int) -> float:
        """Release time of bit ``i`` (1-based)."""
        return (i - 1) * self.T_b


def _p_clamped(env: EnvParams, r: np.ndarray, T_b: float) -> np.ndarray:
    inside = r <= env.a_rx
    p = absorption_probability_unchecked(env.a_rx, env.D1, np.where(inside, env.a_rx, r), T_b)
    return np.where(inside, 1.0, np.clip(p, 0.0, 1.0))


def _ber_from_p(xi: float, eta: float, alpha, p, w) -> np.ndarray:
    """Per-bit BER from absorption-probability nodes ``p`` and weights ``w``."""
    alpha = np.asarray(alpha, dtype=float)
    a = alpha[..., None]
    num = xi - a * p - eta
    den = np.sqrt(2.0 * (a * p * (1.0 - p) + eta))
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.sign(num) * np.inf)
    # 1/2 - erf(c)/4 + E{erf(zeta)}/4 written as erfc terms, which keeps
    # full relative accuracy when the error probability is tiny.
    miss = np.sum(special.erfc(-zeta) * w, axis=-1)
    if eta > 0:
        false_alarm = math.erfc((xi - eta) / math.sqrt(2.0 * eta))
    else:
        false_alarm = 1.0 - float(np.sign(xi - eta))
    ber = 0.25 * false_alarm + 0.25 * miss
    return np.where(alpha == 0, 0.5, np.clip(ber, 0.0, 0.5))


class BerModel:
    """Vectorized BER evaluation for all bits of a frame.

    The expectation over ``r(t_i)`` uses fixed composite Gauss-Legendre nodes
    on ``[mean - 10 std, mean + 10 std]`` of each bit's distance law, with a
    panel edge at ``a_rx`` where the absorption probability has a kink.
    Bit 1 has a deterministic distance and a single node.
    """

    def __init__(self, cfg: McLinkConfig, order: int = 32, panels: int = 6):
        self.cfg = cfg
        env = cfg.env
        nodes_p: list[np.ndarray] = []
        weights: list[np.ndarray] = []
        for i in range(1, cfg.I + 1):
            law = DistanceLaw(env, cfg.release_time(i))
            if law.degenerate:
                r, w = np.array([env.r0]), np.array([1.0])
            else:
                lo, hi = law.support()
                segments = [(lo, hi)]
                if lo < env.a_rx < hi:
                    segments = [(lo, env.a_rx), (env.a_rx, hi)]
                parts = [gauss_legendre_nodes(s0, s1, order, panels if s0 >= env.a_rx else 1) for s0, s1 in segments]
                r = np.concatenate([p[0] for p in parts])
                w = np.concatenate([p[1] for p in parts]) * law.pdf(r)
                w = w / w.sum()
            nodes_p.append(_p_clamped(env, r, cfg.T_b))
            weights.append(w)
        k = max(n.size for n in nodes_p)
        self.p = np.zeros((cfg.I, k))
        self.w = np.zeros((cfg.I, k))
        for i, (p, w) in enumerate(zip(nodes_p, weights)):
            self.p[i, : p.size] = p
            self.w[i, : w.size] = w
        self.mean_p = np.sum(self.p * self.w, axis=1)

    def ber(self, xi: float, alphas) -> np.ndarray:
        """Per-bit BER for threshold ``xi`` and allocation ``alphas`` (length ``I``)."""
        alphas = np.broadcast_to(np.asarray(alphas, dtype=float), (self.cfg.I,))
        return _ber_from_p(xi, self.cfg.eta, alphas, self.p, self.w)

    def ber_grid(self, xi: float, alphas: np.ndarray) -> np.ndarray:
        """BER for an array of allocations of shape ``(..., I)``."""
        return _ber_from_p(xi, self.cfg.eta, alphas, self.p, self.w)


def bit_error_probability(
    cfg: McLinkConfig, i: int, xi: float, alpha_i: float, spec: QuadratureSpec = QuadratureSpec()
) -> float:
    """Error probability of bit ``i`` (1-based) by adaptive quadrature.

    This is the scalar reference evaluator; :class:`BerModel` is the fast
    path used by the optimizers.
    """
    if alpha_i < 0:
        raise ValueError("alpha_i must be non-negative")
    if not 1 <= i <= cfg.I:
        raise ValueError(f"bit index must be in [1, {cfg.I}]")
    if alpha_i == 0:
        return 0.5
    env, eta = cfg.env, cfg.eta
    law = DistanceLaw(env, cfg.release_time(i))
    if law.degenerate:
        p = _p_clamped(env, np.array([env.r0]), cfg.T_b)
        return float(_ber_from_p(xi, eta, np.array(alpha_i), p, np.array([1.0])))
    p_of = lambda r: _p_clamped(env, np.array([r]), cfg.T_b)  # noqa: E731

    def integrand(r: float) -> float:
        p = p_of(r)
        num = xi - alpha_i * p[0] - eta
        den = math.sqrt(2.0 * (alpha_i * p[0] * (1.0 - p[0]) + eta))
        z = num / den if den > 0 else math.copysign(math.inf, num)
        return float(law.pdf(r)) * math.erfc(-z)

    miss = integrate_semi_infinite(integrand, law.mean(), law.std(), spec, breakpoints=(env.a_rx,))
    false_alarm = math.erfc((xi - eta) / math.sqrt(2.0 * eta)) if eta > 0 else 1.0 - float(np.sign(xi - eta))
    return float(min(0.5, max(0.0, 0.25 * false_alarm + 0.25 * miss)))


def optimize_threshold_uniform(cfg: McLinkConfig, model: BerModel | None = None) -> tuple[float, float]:
    """Threshold minimizing the worst-bit BER under uniform allocation ``A / I``.

    The search runs over ``(eta, min_i mu_{i,1})`` with
    ``mu_{i,1} = (A / I) E{p_i} + eta``; the objective is convex there.

    Raises
    ------
    InfeasibleError
        If the interval is empty (budget too small to lift any bit above noise).
    """
    model = model or BerModel(cfg)
    alpha = np.full(cfg.I, cfg.A / cfg.I)
    mu1 = alpha * model.mean_p + cfg.eta
    hi = float(mu1.min())
    lo = float(cfg.eta)
    if not hi > lo:
        raise InfeasibleError("detection interval is empty: the budget cannot separate bit 1 from noise")
    objective = lambda xi: float(np.max(model.ber(xi, alpha)))  # noqa: E731
    xi, fx = minimize_scalar_convex(objective, RootBracket(lo, hi), tol=1e-10 * (hi - lo))
    return xi, fx


def largest_remainder_round(values: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative reals to integers summing to ``total``.

    Floors every value and hands the remaining units to the largest
    fractional parts (ties broken by index).
    """
    values = np.asarray(values, dtype=float)
    floors = np.floor(values).astype(np.int64)
    remaining = int(total - floors.sum())
    if remaining < 0 or remaining > values.size:
        raise ValueError("values do not sum to the requested total")
    frac = values - floors
    order = np.lexsort((np.arange(values.size), -frac))
    floors[order[:remaining]] += 1
    return floors


@dataclass(frozen=True)
class ReleaseProfile:
    """Result of :func:`optimize_release`.

    Attributes
    ----------
    alphas : ndarray
        Integer allocation summing to ``A``.
    alphas_real : ndarray
        Equalizing real allocation.
    level : float
        Common BER level of the real allocation.
    ber_real : ndarray
        Per-bit BER of ``alphas_real``.
    ber : ndarray
        Per-bit BER of ``alphas``.
    """

    alphas: np.ndarray
    alphas_real: np.ndarray
    level: float
    ber_real: np.ndarray
    ber: np.ndarray


def optimize_release(cfg: McLinkConfig, xi: float, model: BerModel | None = None) -> ReleaseProfile:
    """Allocation of the budget that minimizes the worst-bit BER for a fixed threshold.

    Every per-bit BER is strictly decreasing in its own allocation, so the
    min-max allocation equalizes the BERs.  For a trial level the per-bit
    allocations meeting it are found by vectorized bisection; the level is
    then adjusted until the allocations sum to ``A``.

    Raises
    ------
    InfeasibleError
        If some bit cannot be made better than chance (``xi <= eta`` or the
        absorption probability vanishes).
    """
    model = model or BerModel(cfg)
    A = float(cfg.A)
    if cfg.I == 1:
        alphas = np.array([cfg.A], dtype=np.int64)
        b = model.ber(xi, alphas.astype(float))
        return ReleaseProfile(alphas, alphas.astype(float), float(b[0]), b, b)
    if xi <= cfg.eta:
        raise InfeasibleError("threshold must exceed the noise mean for BER to decrease with the allocation")
    floor_full = model.ber(xi, np.full(cfg.I, A))
    if np.any(floor_full >= 0.5):
        raise InfeasibleError("some bit cannot reach a BER below one half with the whole budget")

    def alloc(level: float) -> np.ndarray:
        # BER is compared on a log scale so that tiny levels are resolved.
        target = math.log(level)
        g = lambda a: np.log(model.ber(xi, a)) - target  # noqa: E731
        hi = np.full(cfg.I, A)
        return bisect_vectorized(g, np.zeros(cfg.I), hi, increasing=False, max_iter=80)

    # Bisection on log(level): the total allocation decreases with the level,
    # from at least A at the whole-budget floor of the worst bit to 0 at 1/2.
    lo, hi = math.log(float(np.max(floor_full))), math.log(0.5)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if alloc(math.exp(mid)).sum() > A:
            lo = mid
        else:
            hi = mid
    level = math.exp(hi)
    real = alloc(level)
    real *= A / real.sum()
    rounded = _refine_integer(model, xi, largest_remainder_round(real, cfg.A))
    return ReleaseProfile(rounded, real, float(level), model.ber(xi, real), model.ber(xi, rounded.astype(float)))


def _refine_integer(model: BerModel, xi: float, alphas: np.ndarray, max_moves: int = 10_000) -> np.ndarray:
    """Move single molecules to the worst bit while that lowers the maximum BER."""
    alphas = alphas.copy()
    ber = model.ber(xi, alphas.astype(float))
    for _ in range(max_moves):
        j = int(np.argmax(ber))
        donors = alphas.astype(float) - 1.0
        donors[j] = np.nan
        ok = donors >= 0
        if not np.any(ok):
            break
        after = np.where(ok, model.ber(xi, np.where(ok, donors, 0.0)), np.inf)
        after[j] = np.inf
        k = int(np.argmin(after))
        gained = model.ber(xi, alphas.astype(float) + (np.arange(alphas.size) == j))[j]
        if max(after[k], gained) >= ber[j]:
            break
        alphas[k] -= 1
        alphas[j] += 1
        ber = model.ber(xi, alphas.astype(float))
    return alphas


@dataclass(frozen=True)
class FrameDuration:
    """Result of :func:`optimal_frame_duration`.

    Attributes
    ----------
    T_star : float
        Maximum frame duration in s (``t + T_b``), 0 when even the first bit
        fails, or the horizon when the constraint never binds.
    t_release : float
        Latest release time meeting the efficiency constraint.
    status : str
        ``"ok"``, ``"zero"`` or ``"horizon"``.
    r_tilde : float
        Distance at which the absorption probability equals ``psi``.
    """

    T_star: float
    t_release: float
    status: str
    r_tilde: float


def efficiency_probability(cfg: McLinkConfig, psi: float, t) -> np.ndarray:
    """``Pr{p(t, T_b) > psi}`` for an array of release times."""
    stats = CirStatistics(cfg.env)
    r_tilde = float(stats.absorption_radius(cfg.T_b, psi))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(t.size)
    for k, tk in enumerate(t):
        law = DistanceLaw(cfg.env, float(tk))
        out[k] = float(law.cdf(r_tilde)) if not law.degenerate else float(cfg.env.r0 < r_tilde)
    return out


def efficiency_curve(cfg: McLinkConfig, psi_list, t_grid) -> np.ndarray:
    """Table of ``Pr{p(t, T_b) > psi}`` with shape ``(len(psi_list), len(t_grid))``."""
    return np.stack([efficiency_probability(cfg, float(psi), t_grid) for psi in np.atleast_1d(psi_list)])


def optimal_frame_duration(cfg: McLinkConfig, horizon: float = 1e7) -> FrameDuration:
    """Longest frame whose last release still meets ``Pr{p > psi} >= P``.

    Solves ``F_{r(t)}(r_tilde(psi)) = P`` for ``t``; the left side is
    decreasing in ``t`` whenever ``r_tilde(psi) >= r0``.
    """
    stats = CirStatistics(cfg.env)
    r_tilde = float(stats.absorption_radius(cfg.T_b, cfg.psi))
    if not cfg.env.r0 < r_tilde:
        return FrameDuration(0.0, 0.0, "zero", r_tilde)

    def excess(t: float) -> float:
        return float(efficiency_probability(cfg, cfg.psi, t)[0]) - cfg.P

    if cfg.env.D2 == 0 or excess(horizon) >= 0:
        return FrameDuration(horizon + cfg.T_b, horizon, "horizon", r_tilde)
    # Bracket on a logarithmic ladder, then refine.
    lo = 0.0
    hi = min(horizon, 1e-3)
    while excess(hi) >= 0:
        lo, hi = hi, min(horizon, hi * 4.0)
    t = optimize.brentq(excess, lo, hi, xtol=1e-12 * hi, rtol=1e-14, maxiter=500)
    return FrameDuration(t + cfg.T_b, t, "ok", r_tilde)


@dataclass(frozen=True)
class McDesignResult:
    """Complete link design.

    Attributes
    ----------
    xi : float
        Detection threshold.
    alphas : ndarray
        Integer allocation.
    per_bit_ber : ndarray
        BER of each bit with ``alphas``.
    max_ber : float
    T_star : float
        Maximum frame duration from the efficiency constraint.
    uniform_max_ber : float
        Worst-bit BER of the uniform allocation at ``xi``.
    """

    xi: float
    alphas: np.ndarray
    per_bit_ber: np.ndarray
    max_ber: float
    T_star: float
    uniform_max_ber: float = field(default=math.nan)


def design_link(cfg: McLinkConfig, horizon: float = 1e7) -> McDesignResult:
    """Threshold, allocation and frame duration for one configuration."""
    model = BerModel(cfg)
    xi, uniform_max = optimize_threshold_uniform(cfg, model)
    profile = optimize_release(cfg, xi, model)
    frame = optimal_frame_duration(cfg, horizon)
    return McDesignResult(xi, profile.alphas, profile.ber, float(profile.ber.max()), frame.T_star, uniform_max)
