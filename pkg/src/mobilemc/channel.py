"""Deterministic channel physics and the law of the transceiver distance.

A point transmitter releases molecules that diffuse towards a spherical
absorbing receiver.  For a fixed center distance ``r`` the hitting rate
after a delay ``tau`` is the classical first-passage density

    h(r, tau) = a / sqrt(4 pi D1 tau^3) * (1 - a/r) * exp(-(r - a)^2 / (4 D1 tau)),

with ``a`` the receiver radius and ``D1`` the molecule-receiver relative
diffusion coefficient.  When the transceivers themselves diffuse, the
distance ``r(t)`` follows a noncentral chi law with three degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .numerics import DomainError, gauss_legendre_nodes, noncentral_chi3_cdf

__all__ = [
    "EnvParams",
    "DistanceLaw",
    "table1_env",
    "mc_link_env",
    "cir",
    "cir_derivative_r",
    "cir_peak",
    "absorption_probability",
    "absorption_probability_derivative",
    "distance_mean",
    "distance_variance",
    "distance_pdf",
    "distance_cdf",
    "distance_moments",
]


@dataclass(frozen=True)
class EnvParams:
    """Physical scenario.

    Attributes
    ----------
    D_Tx, D_Rx, D_X : float
        Diffusion coefficients of transmitter, receiver and signaling
        molecules in m^2/s.
    a_tx, a_rx : float
        Transmitter and receiver radii in m.
    r0 : float
        Initial center-to-center distance in m.
    """

    D_Tx: float
    D_Rx: float
    D_X: float
    a_tx: float
    a_rx: float
    r0: float

    def __post_init__(self) -> None:
        for name in ("D_Tx", "D_Rx", "D_X", "a_tx", "a_rx", "r0"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.D_Tx < 0 or self.D_Rx < 0:
            raise ValueError("diffusion coefficients must be non-negative")
        if self.D_X <= 0:
            raise ValueError("D_X must be positive")
        if self.a_tx <= 0 or self.a_rx <= 0:
            raise ValueError("radii must be positive")
        if self.r0 < self.a_tx + self.a_rx:
            raise ValueError("r0 must be at least a_tx + a_rx (transmitter outside receiver)")

    @property
    def D1(self) -> float:
        """Relative diffusion coefficient of molecules with respect to the receiver."""
        return self.D_X + self.D_Rx

    @property
    def D2(self) -> float:
        """Relative diffusion coefficient of the transmitter with respect to the receiver."""
        return self.D_Tx + self.D_Rx

    def replace(self, **changes) -> "EnvParams":
        """Return a copy with some fields changed."""
        return replace(self, **changes)


def table1_env(D_Tx: float = 1e-14) -> EnvParams:
    """Default drug-delivery scenario (micrometre-scale carrier and target cell)."""
    return EnvParams(D_Tx=D_Tx, D_Rx=0.0, D_X=8e-11, a_tx=1e-7, a_rx=1e-6, r0=1e-5)


def mc_link_env() -> EnvParams:
    """Default communication-link scenario, in which the receiver also diffuses."""
    return table1_env().replace(D_Rx=1e-11)


def _check_r(env: EnvParams, r: np.ndarray, strict: bool = False) -> None:
    bad = (r <= env.a_rx) if strict else (r < env.a_rx)
    if np.any(bad) or np.any(np.isnan(r)):
        op = "<=" if strict else "<"
        raise DomainError(f"distance {op} receiver radius a_rx={env.a_rx:g} is not allowed")


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def cir_unchecked(a: float, D1: float, r, tau):
    """Vectorized CIR without domain checks (``r >= a`` is assumed)."""
    r = np.asarray(r, dtype=float)
    tau = np.asarray(tau, dtype=float)
    pos = tau > 0
    t = np.where(pos, tau, 1.0)
    val = a / np.sqrt(4.0 * math.pi * D1 * t**3) * (1.0 - a / r) * np.exp(-((r - a) ** 2) / (4.0 * D1 * t))
    return np.where(pos, val, 0.0)


def cir(env: EnvParams, r, tau):
    """Channel impulse response for a fixed transceiver distance.

    Parameters
    ----------
    env : EnvParams
    r : float or array_like
        Center distance in m, at least ``a_rx``.
    tau : float or array_like
        Delay since release in s.  Non-positive delays give zero.

    Returns
    -------
    float or ndarray
        Hitting rate in 1/s.

    Raises
    ------
    DomainError
        If any ``r < a_rx``.
    """
    r_arr = np.asarray(r, dtype=float)
    _check_r(env, r_arr)
    return _out(cir_unchecked(env.a_rx, env.D1, r_arr, tau))


def cir_derivative_r(env: EnvParams, r, tau):
    """Partial derivative of :func:`cir` with respect to the distance."""
    r_arr = np.asarray(r, dtype=float)
    tau_arr = np.asarray(tau, dtype=float)
    _check_r(env, r_arr, strict=True)
    if np.any(tau_arr <= 0):
        raise DomainError("tau must be positive")
    a, D1 = env.a_rx, env.D1
    k = a / np.sqrt(4.0 * math.pi * D1 * tau_arr**3)
    e = np.exp(-((r_arr - a) ** 2) / (4.0 * D1 * tau_arr))
    val = k * e * (a / r_arr**2 - (r_arr - a) / (2.0 * D1 * tau_arr) * (1.0 - a / r_arr))
    return _out(val)


def peak_radius_unchecked(a: float, D1: float, tau):
    """Vectorized peak radius of ``cir(., tau)``; see :func:`cir_peak`."""
    tau = np.asarray(tau, dtype=float)
    # In units of a the stationarity condition reads x (x - 1)^2 = kappa.
    kappa = 2.0 * D1 * tau / a**2
    q = 2.0 / 27.0 - kappa
    disc = 0.25 * q * q - 1.0 / 729.0
    with np.errstate(invalid="ignore", divide="ignore"):
        # One real root: Cardano, with the second cube root taken from u v = 1/9
        # to avoid cancellation.
        s = np.sqrt(np.maximum(disc, 0.0))
        u = np.cbrt(-0.5 * q + s)
        y_one = u + 1.0 / (9.0 * u)
        # Three real roots: trigonometric form, largest root is the one above 1.
        arg = np.clip(-13.5 * q, -1.0, 1.0)
        y_three = (2.0 / 3.0) * np.cos(np.arccos(arg) / 3.0)
    x = np.where(disc > 0, y_one, y_three) + 2.0 / 3.0
    x = np.maximum(x, 1.0)
    for _ in range(3):
        f = x * (x - 1.0) ** 2 - kappa
        df = (x - 1.0) * (3.0 * x - 1.0)
        step = np.where(df > 0, f / np.where(df > 0, df, 1.0), 0.0)
        x = np.maximum(x - step, 1.0)
    return a * x


def cir_peak(env: EnvParams, tau):
    """Distance maximizing the CIR at a given delay, and the maximum value.

    Setting the distance derivative to zero gives the cubic
    ``r (r - a)^2 = 2 D1 tau a``.  On ``r > a`` the left side increases
    monotonically from zero, so there is exactly one admissible root.  The
    cubic is solved in closed form (Cardano, or the trigonometric form when
    the cubic has three real roots, which happens for
    ``D1 tau < 2 a^2 / 27``) and refined with Newton steps.

    Returns
    -------
    r_star : float or ndarray
        Peak distance in m.
    h_star : float or ndarray
        ``cir(env, r_star, tau)`` in 1/s.
    """
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(~(tau_arr > 0)):
        raise DomainError("tau must be positive")
    r_star = peak_radius_unchecked(env.a_rx, env.D1, tau_arr)
    h_star = cir_unchecked(env.a_rx, env.D1, r_star, tau_arr)
    return _out(r_star), _out(h_star)


def absorption_probability_unchecked(a: float, D1: float, r, T_b):
    r = np.asarray(r, dtype=float)
    return a / r * special.erfc((r - a) / (2.0 * np.sqrt(D1 * T_b)))


def absorption_probability(env: EnvParams, r, T_b):
    """Probability that a molecule is absorbed within ``T_b`` of its release.

    Equals the integral of :func:`cir` over delays in ``[0, T_b]``.
    """
    r_arr = np.asarray(r, dtype=float)
    _check_r(env, r_arr)
    if np.any(~(np.asarray(T_b) > 0)):
        raise DomainError("T_b must be positive")
    return _out(np.clip(absorption_probability_unchecked(env.a_rx, env.D1, r_arr, T_b), 0.0, 1.0))


def absorption_probability_derivative_unchecked(a: float, D1: float, r, T_b):
    r = np.asarray(r, dtype=float)
    s = np.sqrt(D1 * T_b)
    z = (r - a) / (2.0 * s)
    return -a / r**2 * special.erfc(z) - a / (r * math.sqrt(math.pi) * s) * np.exp(-z * z)


def absorption_probability_derivative(env: EnvParams, r, T_b):
    """Derivative of :func:`absorption_probability` with respect to distance.

    The result is strictly negative for every admissible input.
    """
    r_arr = np.asarray(r, dtype=float)
    _check_r(env, r_arr, strict=True)
    if np.any(~(np.asarray(T_b) > 0)):
        raise DomainError("T_b must be positive")
    return _out(absorption_probability_derivative_unchecked(env.a_rx, env.D1, r_arr, T_b))


@dataclass(frozen=True)
class DistanceLaw:
    """Law of the transceiver distance ``r(t)`` after elapsed time ``t``.

    The scaled distance ``r(t) / sqrt(2 D2 t)`` is noncentral chi with three
    degrees of freedom and noncentrality ``lam = r0 / sqrt(2 D2 t)``.  For
    ``t = 0`` or ``D2 = 0`` the distance is the constant ``r0``.
    """

    env: EnvParams
    t: float

    def __post_init__(self) -> None:
        if not self.t >= 0 or not math.isfinite(self.t):
            raise ValueError(f"elapsed time must be finite and non-negative, got {self.t}")

    @property
    def degenerate(self) -> bool:
        """True when the distance is deterministic."""
        return self.t == 0 or self.env.D2 == 0

    @property
    def scale(self) -> float:
        """Per-coordinate displacement standard deviation ``sqrt(2 D2 t)``."""
        return math.sqrt(2.0 * self.env.D2 * self.t)

    @property
    def lam(self) -> float:
        """Noncentrality parameter (infinite for a degenerate law)."""
        return math.inf if self.degenerate else self.env.r0 / self.scale

    def mean(self) -> float:
        """Mean distance."""
        r0 = self.env.r0
        if self.degenerate:
            return r0
        four_dt = 4.0 * self.env.D2 * self.t
        return math.sqrt(four_dt / math.pi) * math.exp(-r0 * r0 / four_dt) + (r0 + 0.5 * four_dt / r0) * math.erf(
            r0 / math.sqrt(four_dt)
        )

    def second_moment(self) -> float:
        """Mean squared distance ``r0^2 + 6 D2 t``."""
        return self.env.r0**2 + 6.0 * self.env.D2 * self.t

    def variance(self) -> float:
        """Variance of the distance."""
        if self.degenerate:
            return 0.0
        return max(self.second_moment() - self.mean() ** 2, 0.0)

    def std(self) -> float:
        return math.sqrt(self.variance())

    def pdf(self, r):
        """Density of the distance in 1/m.

        The difference of Gaussians is formed as a product with ``-expm1`` so
        neither overflow nor cancellation occurs for small ``t``.
        """
        if self.degenerate:
            raise DomainError("the distance law is degenerate (point mass at r0)")
        r = np.asarray(r, dtype=float)
        r0 = self.env.r0
        dt = self.env.D2 * self.t
        rp = np.maximum(r, 0.0)
        val = rp / (r0 * math.sqrt(math.pi * dt)) * 0.5 * np.exp(-((rp - r0) ** 2) / (4.0 * dt)) * (-np.expm1(-rp * r0 / dt))
        return _out(np.where(r > 0, val, 0.0))

    def cdf(self, r):
        """Cumulative distribution of the distance."""
        r = np.asarray(r, dtype=float)
        if self.degenerate:
            return _out(np.where(r >= self.env.r0, 1.0, 0.0))
        b = np.maximum(r, 0.0) / self.scale
        return _out(np.where(r > 0, noncentral_chi3_cdf(self.lam, b), 0.0))

    def support(self, k_sigma: float = 10.0) -> tuple[float, float]:
        """Interval ``[max(0, mean - k std), mean + k std]`` holding all but a negligible mass."""
        mu, sd = self.mean(), self.std()
        return max(0.0, mu - k_sigma * sd), mu + k_sigma * sd

    def quadrature(self, order: int = 32, panels: int = 4, k_sigma: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and probability weights approximating expectations over ``r(t)``.

        Composite Gauss-Legendre on :meth:`support`, weights multiplied by the
        density and renormalized to sum to one.  A degenerate law yields a
        single node at ``r0``.
        """
        if self.degenerate:
            return np.array([self.env.r0]), np.array([1.0])
        lo, hi = self.support(k_sigma)
        nodes, weights = gauss_legendre_nodes(lo, hi, order, panels)
        w = weights * self.pdf(nodes)
        return nodes, w / w.sum()


def distance_moments(env: EnvParams, t) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized mean and standard deviation of ``r(t)`` for an array of times."""
    t = np.asarray(t, dtype=float)
    r0 = env.r0
    four_dt = 4.0 * env.D2 * t
    random_part = four_dt > 0
    fd = np.where(random_part, four_dt, 1.0)
    mean = np.sqrt(fd / math.pi) * np.exp(-r0 * r0 / fd) + (r0 + 0.5 * fd / r0) * special.erf(r0 / np.sqrt(fd))
    mean = np.where(random_part, mean, r0)
    var = np.maximum(r0 * r0 + 1.5 * four_dt - mean**2, 0.0)
    return mean, np.where(random_part, np.sqrt(var), 0.0)


def distance_mean(law: DistanceLaw) -> float:
    return law.mean()


def distance_variance(law: DistanceLaw) -> float:
    return law.variance()


def distance_pdf(law: DistanceLaw, r):
    return law.pdf(r)


def distance_cdf(law: DistanceLaw, r):
    return law.cdf(r)
