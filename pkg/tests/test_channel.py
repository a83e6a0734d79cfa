import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import integrate

from mobilemc.channel import (
    DistanceLaw,
    EnvParams,
    absorption_probability,
    absorption_probability_derivative,
    cir,
    cir_derivative_r,
    cir_peak,
    distance_cdf,
    distance_mean,
    distance_moments,
    distance_pdf,
    distance_variance,
    peak_radius_unchecked,
    table1_env,
)
from mobilemc.numerics import DomainError

mp.mp.dps = 40

A_RX = 1e-6
D1 = 8e-11


def mp_cir(a, D, r, tau):
    a, D, r, tau = (mp.mpf(v) for v in (a, D, r, tau))
    return a / mp.sqrt(4 * mp.pi * D * tau**3) * (1 - a / r) * mp.exp(-((r - a) ** 2) / (4 * D * tau))


# ------------------------------------------------------------- parameters
def test_env_derived_coefficients():
    env = EnvParams(D_Tx=1e-14, D_Rx=2e-13, D_X=8e-11, a_tx=1e-7, a_rx=1e-6, r0=1e-5)
    assert env.D1 == pytest.approx(8.02e-11)
    assert env.D2 == pytest.approx(2.1e-13)


@pytest.mark.parametrize(
    "changes",
    [{"D_Tx": -1e-14}, {"D_X": 0.0}, {"a_rx": 0.0}, {"r0": 1.05e-6}, {"D_Rx": float("nan")}],
)
def test_env_rejects_invalid(changes):
    with pytest.raises(ValueError):
        table1_env().replace(**changes)


# ------------------------------------------------------------- CIR
def test_cir_zero_for_nonpositive_delay(env):
    assert cir(env, 1e-5, -1.0) == 0.0
    assert cir(env, 1e-5, 0.0) == 0.0


def test_cir_vanishes_at_receiver_surface(env):
    assert cir(env, env.a_rx, 1.0) == 0.0


def test_cir_table1_value(env):
    expected = float(mp_cir(A_RX, D1, 1e-5, 0.17))
    assert cir(env, 1e-5, 0.17) == pytest.approx(expected, rel=1e-13)
    assert cir(env, 1e-5, 0.17) == pytest.approx(0.0914, abs=5e-5)


def test_cir_rejects_distance_inside_receiver(env):
    with pytest.raises(DomainError):
        cir(env, 0.5e-6, 1.0)


@given(st.floats(1e-6, 1e-3), st.floats(1e-4, 1e4))
def test_cir_non_negative(r, tau):
    env = table1_env()
    assert cir(env, r, tau) >= 0.0


def test_cir_decays_in_delay_and_distance(env):
    assert cir(env, 1e-5, 1e9) < 1e-12
    assert cir(env, 1e-2, 1.0) == 0.0


# ------------------------------------------------------------- derivative
def test_cir_derivative_finite_difference(env):
    r, tau, h = 1e-5, 0.17, 1e-10
    fd = (cir(env, r + h, tau) - cir(env, r - h, tau)) / (2 * h)
    assert cir_derivative_r(env, r, tau) == pytest.approx(fd, rel=1e-6)


def test_cir_derivative_zero_at_peak(env):
    for tau in [1e-4, 0.01, 0.17, 5.0, 500.0]:
        r_star, h_star = cir_peak(env, tau)
        scale = h_star / r_star
        assert abs(cir_derivative_r(env, r_star, tau)) <= 1e-9 * scale


def test_cir_derivative_positive_near_surface(env):
    assert cir_derivative_r(env, env.a_rx * (1 + 1e-9), 0.17) > 0


def test_cir_derivative_domain(env):
    with pytest.raises(DomainError):
        cir_derivative_r(env, env.a_rx, 1.0)
    with pytest.raises(DomainError):
        cir_derivative_r(env, 1e-5, 0.0)


@given(st.floats(1e-4, 1e3))
def test_cir_derivative_single_sign_change(tau):
    env = table1_env()
    r = env.a_rx * (1 + np.geomspace(1e-6, 1e3, 4000))
    d = cir_derivative_r(env, r, tau)
    r_star, h_star = cir_peak(env, tau)
    tiny = 1e-12 * h_star / r_star
    signs = np.sign(np.where(np.abs(d) < tiny, 0.0, d))
    signs = signs[signs != 0]
    # Positive then negative; the far tail may underflow to zero.
    assert signs[0] == 1
    assert np.count_nonzero(np.diff(signs)) <= 1


# ------------------------------------------------------------- peak
def test_peak_reference_value(env):
    _, h_star = cir_peak(env, 0.17)
    assert h_star == pytest.approx(0.29, abs=0.01)


def test_peak_is_maximum(env):
    for tau in [1e-4, 0.17, 10.0]:
        r_star, h_star = cir_peak(env, tau)
        assert cir(env, r_star + 1e-9, tau) < h_star
        assert cir(env, r_star - 1e-9, tau) < h_star


def test_peak_against_newton_from_grid_seed(env):
    def newton(tau):
        # Independent oracle: grid seed, then Newton on the derivative.
        r = env.a_rx * (1 + np.geomspace(1e-4, 1e4, 20000))
        x = float(r[np.argmax(cir(env, r, tau))])
        for _ in range(100):
            k = 2 * env.D1 * tau * env.a_rx
            f = x * (x - env.a_rx) ** 2 - k
            df = (x - env.a_rx) * (3 * x - env.a_rx)
            x -= f / df
        return x

    for tau in [2e-4, 9e-4, 1e-3, 0.17, 3.0, 1e3]:
        r_star, _ = cir_peak(env, tau)
        assert r_star == pytest.approx(newton(tau), rel=1e-12)


def test_peak_three_real_root_regime():
    # kappa < 4/27: the cubic has three real roots; the admissible one is > a.
    a, D = 1.0, 1.0
    for kappa in [1e-8, 1e-3, 0.1, 4 / 27 - 1e-9, 4 / 27 + 1e-9, 1.0]:
        x = float(peak_radius_unchecked(a, D, kappa / 2))
        assert x > 1
        assert x * (x - 1) ** 2 == pytest.approx(kappa, rel=1e-12)


def test_peak_domain(env):
    with pytest.raises(DomainError):
        cir_peak(env, 0.0)


# ------------------------------------------------------------- absorption probability
def test_absorption_probability_limits(env):
    assert absorption_probability(env, env.a_rx, 10.0) == pytest.approx(1.0)
    assert absorption_probability(env, 1.0, 10.0) == 0.0


def test_absorption_probability_equals_integrated_cir(env):
    r, T_b = 1e-5, 28.8
    expected = mp.quad(lambda s: mp_cir(A_RX, D1, r, s), [0, 0.05, 0.5, 5, T_b])
    assert absorption_probability(env, r, T_b) == pytest.approx(float(expected), abs=1e-8)


@given(st.floats(1.0001e-6, 1e-4), st.floats(0.01, 100.0))
def test_absorption_probability_is_cir_integral(r, T_b):
    env = table1_env()
    # Oracle in log-delay with a breakpoint at the peak delay (r - a)^2 / (6 D1),
    # which is extremely early when r is close to the receiver surface.
    u_peak = mp.log(mp.mpf(r - A_RX) ** 2 / (6 * D1))
    u_hi = mp.log(T_b)
    points = [u_peak - 60, u_peak - 3, u_peak, u_peak + 3, u_hi]
    points = sorted(p for p in points if p <= u_hi)
    value = mp.quad(lambda u: mp_cir(A_RX, D1, r, mp.exp(u)) * mp.exp(u), points)
    assert absorption_probability(env, r, T_b) == pytest.approx(float(value), abs=1e-8)


@given(st.floats(1.0001e-6, 1e-4), st.floats(1.0001, 2.0), st.floats(0.01, 100.0))
def test_absorption_probability_monotone(r, factor, T_b):
    env = table1_env()
    p = absorption_probability(env, r, T_b)
    assume(p > 1e-300)
    assert absorption_probability(env, r * factor, T_b) < p
    assert absorption_probability(env, r, T_b * factor) > p


def test_absorption_derivative_finite_difference(env):
    r, T_b, h = 1e-5, 10.0, 1e-11
    fd = (absorption_probability(env, r + h, T_b) - absorption_probability(env, r - h, T_b)) / (2 * h)
    assert absorption_probability_derivative(env, r, T_b) == pytest.approx(fd, rel=1e-6)


@given(st.floats(1.0001e-6, 1e-4), st.floats(0.01, 1e3))
def test_absorption_derivative_negative(r, T_b):
    # Far from the receiver both terms underflow; restrict to representable values.
    assume(absorption_probability(table1_env(), r, T_b) > 1e-250)
    assert absorption_probability_derivative(table1_env(), r, T_b) < 0


def test_absorption_derivative_vanishes_far_away(env):
    d = absorption_probability_derivative(env, 1e-2, 10.0)
    assert -1e-300 <= d <= 0


def test_absorption_derivative_domain(env):
    with pytest.raises(DomainError):
        absorption_probability_derivative(env, env.a_rx, 10.0)


# ------------------------------------------------------------- distance law
def test_distance_law_at_time_zero(env):
    law = DistanceLaw(env, 0.0)
    assert distance_mean(law) == env.r0
    assert distance_variance(law) == 0.0
    assert distance_cdf(law, env.r0) == 1.0
    assert distance_cdf(law, 0.99 * env.r0) == 0.0


def test_distance_mean_against_quadrature(env):
    law = DistanceLaw(env, 3600.0)
    mp_pdf = _mp_pdf(env.r0, env.D2 * 3600.0)
    expected = mp.quad(lambda r: r * mp_pdf(r), [0, env.r0, 2 * env.r0, mp.inf])
    assert distance_mean(law) == pytest.approx(float(expected), rel=1e-12)


def _mp_pdf(r0, dt):
    r0, dt = mp.mpf(r0), mp.mpf(dt)
    return lambda r: r / (r0 * mp.sqrt(4 * mp.pi * dt)) * (
        mp.exp(-((r - r0) ** 2) / (4 * dt)) - mp.exp(-((r + r0) ** 2) / (4 * dt))
    )


@given(st.floats(1e-6, 1e-4), st.floats(1e-16, 1e-10), st.floats(1e-2, 1e5))
def test_distance_second_moment_identity(r0, D2, t):
    env = EnvParams(D_Tx=D2, D_Rx=0.0, D_X=8e-11, a_tx=1e-8, a_rx=1e-7, r0=r0 + 1.1e-7)
    law = DistanceLaw(env, t)
    lo, hi = law.support(12.0)
    scale = env.r0**2 + 6 * D2 * t
    value, _ = integrate.quad(lambda r: r * r * law.pdf(r) / scale, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert value == pytest.approx(1.0, rel=1e-9)
    assert law.second_moment() == pytest.approx(scale, rel=1e-15)


def test_distance_pdf_normalized(env):
    for t in [1.0, 36.0, 3600.0, 86400.0]:
        law = DistanceLaw(env, t)
        lo, hi = law.support()
        value, _ = integrate.quad(law.pdf, lo, hi, points=[law.mean()], epsabs=0, epsrel=1e-12, limit=200)
        assert value == pytest.approx(1.0, abs=1e-6)


def test_distance_cdf_limits(env):
    law = DistanceLaw(env, 360.0)
    assert distance_cdf(law, 0.0) == 0.0
    assert distance_cdf(law, np.inf) == 1.0


def test_distance_pdf_vanishes_at_origin(env):
    law = DistanceLaw(env, 1e5)
    values = distance_pdf(law, np.array([1e-9, 1e-12, 1e-15]))
    assert np.all(np.diff(values) < 0)
    assert values[-1] < 1e-3 * float(distance_pdf(law, law.mean()))


@given(st.floats(1.0, 1e5), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_distance_pdf_integrates_to_cdf_difference(t, u, v):
    law = DistanceLaw(table1_env(1e-13), t)
    lo, hi = law.support(8.0)
    r1, r2 = sorted((lo + u * (hi - lo), lo + v * (hi - lo)))
    value, _ = integrate.quad(law.pdf, r1, r2, epsabs=1e-14, epsrel=1e-12, limit=200)
    assert value == pytest.approx(law.cdf(r2) - law.cdf(r1), abs=1e-8)


@given(st.floats(1.0, 1e6))
def test_distance_cdf_monotone(t):
    law = DistanceLaw(table1_env(), t)
    lo, hi = law.support()
    c = law.cdf(np.linspace(0, hi, 500))
    assert np.all(np.diff(c) >= 0)


def test_distance_moments_vectorized_matches_scalar(env):
    t = np.array([0.0, 1.0, 36.0, 3600.0, 86400.0])
    mean, std = distance_moments(env, t)
    for k, tk in enumerate(t):
        law = DistanceLaw(env, tk)
        assert mean[k] == pytest.approx(law.mean(), rel=1e-14)
        assert std[k] == pytest.approx(law.std(), rel=1e-9, abs=1e-20)


def test_degenerate_law_pdf_raises():
    law = DistanceLaw(table1_env(0.0), 10.0)
    assert law.degenerate
    with pytest.raises(DomainError):
        law.pdf(1e-5)


def test_distance_law_rejects_negative_time(env):
    with pytest.raises(ValueError):
        DistanceLaw(env, -1.0)
