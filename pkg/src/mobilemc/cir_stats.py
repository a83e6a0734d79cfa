"""Statistics of the time-variant CIR induced by the random transceiver distance.

For a release at time ``t`` the CIR ``h(t, tau) = cir(r(t), tau)`` is a random
variable through ``r(t)``.  This module provides its mean (closed form),
second moment and variance (quadrature), and its PDF and CDF obtained by
inverting the unimodal map ``r -> cir(r, tau)``.  The same is done for the
absorption probability ``p(t, T_b)``, which is monotone in ``r``.

The distance law puts a small mass on ``r < a_rx``, where the transmitter
would sit inside the receiver.  The moments average the CIR formula over
all ``r > 0`` (the formula is negative there), which is what makes the mean
available in closed form.  The distribution functions instead count that
region as ``h <= 0``.  Both conventions agree to within the tiny mass below
``a_rx``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .channel import (
    DistanceLaw,
    EnvParams,
    absorption_probability_derivative_unchecked,
    absorption_probability_unchecked,
    cir_unchecked,
    peak_radius_unchecked,
)
from .numerics import DomainError, QuadratureSpec, bisect_vectorized, integrate_interval

__all__ = [
    "CirStatistics",
    "cir_mean",
    "cir_second_moment",
    "cir_variance",
    "cir_pdf",
    "cir_cdf",
    "absorption_prob_pdf",
    "absorption_prob_cdf",
    "cir_moments_batch",
]

_SQRT_PI = math.sqrt(math.pi)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _mean_closed_form(env: EnvParams, t, tau):
    """Mean of ``h(t, tau)``; vectorized over broadcastable ``t`` and ``tau``.

    Averaging the CIR over the noncentral chi law gives a Gaussian integral
    whose value involves ``exp(.) * erfc(.)`` products.  Writing
    ``S = D1 tau + D2 t`` the result is

        m = a D1 / (4 r0 sqrt(pi) S^{3/2})
            * [ (r0 - a) exp(-(r0 - a)^2 / (4 S)) erfc(z_v)
              + (r0 + a) exp(-(r0 + a)^2 / (4 S)) erfc(z_w) ],

    with ``z_v = -(a D2 t + r0 D1 tau) / (2 sqrt(D1 tau D2 t S))`` and
    ``z_w = (r0 D1 tau - a D2 t) / (2 sqrt(D1 tau D2 t S))``.  All exponents
    are non-positive, so the expression neither overflows nor cancels.
    """
    a, r0, D1, D2 = env.a_rx, env.r0, env.D1, env.D2
    t = np.asarray(t, dtype=float)
    tau = np.asarray(tau, dtype=float)
    t, tau = np.broadcast_arrays(t, tau)
    pos = tau > 0
    tau_s = np.where(pos, tau, 1.0)
    x = D1 * tau_s
    y = D2 * t
    random_part = y > 0
    y_s = np.where(random_part, y, 1.0)
    S = x + y_s
    root = 2.0 * np.sqrt(x * y_s * S)
    z_v = -(a * y_s + r0 * x) / root
    z_w = (r0 * x - a * y_s) / root
    m = (
        a
        * D1
        / (4.0 * r0 * _SQRT_PI * S**1.5)
        * (
            (r0 - a) * np.exp(-((r0 - a) ** 2) / (4.0 * S)) * special.erfc(z_v)
            + (r0 + a) * np.exp(-((r0 + a) ** 2) / (4.0 * S)) * special.erfc(z_w)
        )
    )
    deterministic = cir_unchecked(a, D1, r0, tau_s)
    m = np.where(random_part, m, deterministic)
    return np.where(pos, m, 0.0)


@dataclass(frozen=True)
class CirStatistics:
    """Evaluators for the moments and distribution of ``h(t, tau)`` and ``p(t, T_b)``.

    Parameters
    ----------
    env : EnvParams
    quad : QuadratureSpec
        Controls the adaptive quadrature used for the second moment.
    """

    env: EnvParams
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)

    # ------------------------------------------------------------------ moments
    def mean(self, t, tau):
        """Mean CIR ``E{h(t, tau)}`` in 1/s (vectorized)."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0):
            raise DomainError("t must be non-negative")
        return _out(_mean_closed_form(self.env, t_arr, tau))

    def second_moment(self, t: float, tau: float) -> float:
        """Second moment ``E{h(t, tau)^2}`` in 1/s^2 by adaptive quadrature.

        The integrand is ``cir(r, tau)^2 f_r(r)`` over all ``r > 0``, with the
        CIR formula continued below ``a_rx`` exactly as in the closed-form
        mean, so that ``phi - m^2`` is the variance of one and the same
        random variable.  The two Gaussian factors are merged into single
        exponentials, so no intermediate quantity overflows.
        """
        env = self.env
        if tau <= 0:
            return 0.0
        law = DistanceLaw(env, t)
        a, D1, r0 = env.a_rx, env.D1, env.r0
        if law.degenerate:
            return float(cir_unchecked(a, D1, r0, tau)) ** 2
        dt = env.D2 * t
        r_star = float(peak_radius_unchecked(a, D1, tau))
        # Scale the integrand by a Gauss-Legendre estimate of the result so the
        # adaptive tolerances act on a quantity of order one.
        nodes, w = law.quadrature()
        h_ref = float(cir_unchecked(a, D1, nodes, tau) ** 2 @ w)
        if not h_ref > 0:
            h_ref = float(cir_unchecked(a, D1, r_star, tau)) ** 2
        c_pre = a * a / (4.0 * math.pi * D1 * tau**3) / (r0 * math.sqrt(math.pi * dt)) * 0.5

        def integrand(r: float) -> float:
            if r <= 0.0:
                return 0.0
            log_e1 = -((r - a) ** 2) / (2.0 * D1 * tau) - (r - r0) ** 2 / (4.0 * dt)
            diff = math.exp(log_e1) * -math.expm1(-r * r0 / dt)
            return c_pre * (r - 2.0 * a + a * a / r) * diff / h_ref

        mu, sd = law.mean(), law.std()
        hi = mu + self.quad.truncation_sigma * sd
        lo = max(0.0, mu - self.quad.truncation_sigma * sd)
        if hi <= lo:
            return 0.0
        points = [mu, r_star, a, mu - 3 * sd, mu + 3 * sd]
        value = integrate_interval(integrand, lo, hi, self.quad, points)
        return value * h_ref

    def variance(self, t: float, tau: float) -> float:
        """Variance ``phi - m^2``, clamped at zero against round-off."""
        phi = self.second_moment(t, tau)
        m = float(self.mean(t, tau))
        var = phi - m * m
        if var < 0:
            if var < -1e-12 * m * m:
                warnings.warn(f"negative variance {var:g} at t={t:g}, tau={tau:g}", RuntimeWarning, stacklevel=2)
            var = 0.0
        return var

    # ------------------------------------------------------------ distribution
    def peak(self, tau):
        """``(r_star, h_star)`` for delay ``tau``."""
        tau = np.asarray(tau, dtype=float)
        r_star = peak_radius_unchecked(self.env.a_rx, self.env.D1, tau)
        return _out(r_star), _out(cir_unchecked(self.env.a_rx, self.env.D1, r_star, tau))

    def branch_radii(self, t: float, tau: float, h):
        """Distances ``r1 <= r_star <= r2`` at which ``cir(r, tau) = h``.

        ``r2`` is searched up to ``r_max = mean + 10 std`` of ``r(t)`` (or
        ``2 r_star`` if larger); ``r2 = inf`` is returned for levels below
        ``cir(r_max, tau)``, where the distance density is negligible.
        """
        env = self.env
        a, D1 = env.a_rx, env.D1
        h = np.asarray(h, dtype=float)
        r_star = float(peak_radius_unchecked(a, D1, tau))
        h_star = float(cir_unchecked(a, D1, r_star, tau))
        law = DistanceLaw(env, t)
        r_max = max(law.mean() + self.quad.truncation_sigma * law.std(), 2.0 * r_star)
        h_max = float(cir_unchecked(a, D1, r_max, tau))
        level = np.clip(h, 0.0, h_star)

        def g(r):
            return cir_unchecked(a, D1, r, tau) - level

        r1 = bisect_vectorized(g, np.full(level.shape, a), np.full(level.shape, r_star), increasing=True)
        r1 = np.where(level <= 0, a, r1)
        r2 = bisect_vectorized(g, np.full(level.shape, r_star), np.full(level.shape, r_max), increasing=False)
        r2 = np.where(level <= h_max, np.inf, r2)
        r1 = np.where(level >= h_star, r_star, r1)
        r2 = np.where(level >= h_star, r_star, r2)
        return _out(r1), _out(r2)

    def _law_pdf(self, law: DistanceLaw, r):
        r = np.asarray(r, dtype=float)
        finite = np.isfinite(r)
        return np.where(finite, law.pdf(np.where(finite, r, 0.0)), 0.0)

    def _law_cdf(self, law: DistanceLaw, r):
        r = np.asarray(r, dtype=float)
        finite = np.isfinite(r)
        return np.where(finite, law.cdf(np.where(finite, r, 0.0)), 1.0)

    def pdf(self, t: float, tau: float, h):
        """Density of ``h(t, tau)`` in s.

        Returns ``inf`` at the support endpoint ``h_star`` and 0 outside
        ``[0, h_star]``.
        """
        self._check_t_tau(t, tau)
        env = self.env
        law = DistanceLaw(env, t)
        if law.degenerate:
            raise DomainError("the CIR is deterministic when the distance law is degenerate")
        h = np.asarray(h, dtype=float)
        _, h_star = self.peak(tau)
        r1, r2 = self.branch_radii(t, tau, h)
        r1 = np.asarray(r1)
        r2 = np.asarray(r2)
        a, D1 = env.a_rx, env.D1
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = _derivative(a, D1, r1, tau)
            d2 = _derivative(a, D1, np.where(np.isfinite(r2), r2, 2 * a), tau)
            term1 = self._law_pdf(law, r1) / d1
            term2 = np.where(np.isfinite(r2), -self._law_pdf(law, r2) / d2, 0.0)
            val = term1 + term2
        val = np.where((h < 0) | (h > h_star), 0.0, val)
        val = np.where(h == h_star, np.inf, val)
        return _out(val)

    def cdf(self, t: float, tau: float, h):
        """Cumulative distribution of ``h(t, tau)``."""
        self._check_t_tau(t, tau)
        env = self.env
        law = DistanceLaw(env, t)
        h = np.asarray(h, dtype=float)
        if law.degenerate:
            h0 = float(cir_unchecked(env.a_rx, env.D1, env.r0, tau))
            return _out(np.where(h >= h0, 1.0, 0.0))
        _, h_star = self.peak(tau)
        r1, r2 = self.branch_radii(t, tau, h)
        val = self._law_cdf(law, r1) + 1.0 - self._law_cdf(law, r2)
        val = np.where(h < 0, 0.0, np.where(h >= h_star, 1.0, val))
        return _out(np.clip(val, 0.0, 1.0))

    def _check_t_tau(self, t, tau) -> None:
        if not (t >= 0 and tau > 0):
            raise DomainError("requires t >= 0 and tau > 0")

    # ------------------------------------------------- absorption probability
    def absorption_radius(self, T_b: float, p):
        """Distance ``r_tilde(p)`` at which the absorption probability equals ``p``."""
        env = self.env
        p = np.asarray(p, dtype=float)
        if np.any(~((p > 0) & (p < 1))):
            raise DomainError("p must lie in (0, 1)")
        a, D1 = env.a_rx, env.D1
        # Upper bracket: p(r) <= (a/r) erfc((r-a)/(2 sqrt(D1 T_b))) decays faster than a/r.
        hi = np.full(p.shape, a + 80.0 * math.sqrt(D1 * T_b) + a / np.min(p))
        lo = np.full(p.shape, a)
        r = bisect_vectorized(
            lambda r: absorption_probability_unchecked(a, D1, r, T_b) - p, lo, hi, increasing=False
        )
        return _out(r)

    def absorption_prob_cdf(self, t: float, T_b: float, p):
        """``Pr{p(t, T_b) <= p}`` which equals ``1 - F_r(r_tilde(p))``."""
        law = DistanceLaw(self.env, t)
        r = np.asarray(self.absorption_radius(T_b, p))
        if law.degenerate:
            return _out(np.where(self.env.r0 >= r, 1.0, 0.0))
        return _out(np.clip(1.0 - law.cdf(r), 0.0, 1.0))

    def absorption_prob_exceedance(self, t: float, T_b: float, p):
        """``Pr{p(t, T_b) > p} = F_r(r_tilde(p))`` without subtracting from one."""
        law = DistanceLaw(self.env, t)
        r = np.asarray(self.absorption_radius(T_b, p))
        if law.degenerate:
            return _out(np.where(self.env.r0 < r, 1.0, 0.0))
        return _out(law.cdf(r))

    def absorption_prob_pdf(self, t: float, T_b: float, p):
        """Density of ``p(t, T_b)`` on ``(0, 1)``."""
        law = DistanceLaw(self.env, t)
        if law.degenerate:
            raise DomainError("the absorption probability is deterministic when the distance law is degenerate")
        r = np.asarray(self.absorption_radius(T_b, p))
        dp = absorption_probability_derivative_unchecked(self.env.a_rx, self.env.D1, r, T_b)
        return _out(-law.pdf(r) / dp)


def _derivative(a, D1, r, tau):
    k = a / np.sqrt(4.0 * math.pi * D1 * tau**3)
    e = np.exp(-((r - a) ** 2) / (4.0 * D1 * tau))
    return k * e * (a / r**2 - (r - a) / (2.0 * D1 * tau) * (1.0 - a / r))


def cir_moments_batch(env: EnvParams, t: float, tau, order: int = 32, panels: int = 4):
    """Mean and standard deviation of ``h(t, tau)`` for one ``t`` and many ``tau``.

    The mean comes from the closed form.  The standard deviation is a
    centered Gauss-Legendre average over the distance law,
    ``sqrt(E{(h - m_q)^2})`` with ``m_q`` the quadrature mean, which avoids
    the cancellation in ``E{h^2} - m^2`` when the spread is small.

    Returns
    -------
    mean, std : ndarray
        Arrays shaped like ``tau``.
    """
    tau = np.asarray(tau, dtype=float)
    mean = _mean_closed_form(env, t, tau)
    law = DistanceLaw(env, t)
    if law.degenerate:
        return mean, np.zeros_like(mean)
    nodes, w = law.quadrature(order=order, panels=panels)
    flat = tau.reshape(-1)
    std = np.empty_like(flat)
    chunk = max(1, 2_000_000 // nodes.size)
    for s in range(0, flat.size, chunk):
        tt = flat[s : s + chunk]
        h = cir_unchecked(env.a_rx, env.D1, nodes[None, :], tt[:, None])
        mq = h @ w
        std[s : s + chunk] = np.sqrt(np.maximum(((h - mq[:, None]) ** 2) @ w, 0.0))
    return mean, std.reshape(tau.shape)


# ------------------------------------------------------------ function API
def cir_mean(stats: CirStatistics, t, tau):
    return stats.mean(t, tau)


def cir_second_moment(stats: CirStatistics, t: float, tau: float) -> float:
    return stats.second_moment(t, tau)


def cir_variance(stats: CirStatistics, t: float, tau: float) -> float:
    return stats.variance(t, tau)


def cir_pdf(stats: CirStatistics, t: float, tau: float, h):
    return stats.pdf(t, tau, h)


def cir_cdf(stats: CirStatistics, t: float, tau: float, h):
    return stats.cdf(t, tau, h)


def absorption_prob_pdf(stats: CirStatistics, t: float, T_b: float, p):
    return stats.absorption_prob_pdf(t, T_b, p)


def absorption_prob_cdf(stats: CirStatistics, t: float, T_b: float, p):
    return stats.absorption_prob_cdf(t, T_b, p)
