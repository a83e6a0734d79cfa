import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats as sps

from mobilemc import particle_sim as ps
from mobilemc.channel import DistanceLaw, EnvParams
from mobilemc.cir_stats import CirStatistics
from mobilemc.particle_sim import (
    RunningMoments,
    SimConfig,
    absorption_samples,
    cir_samples,
    monte_carlo_absorption,
    monte_carlo_cir_stats,
    sample_distances,
    simulate_distance,
    worker_count,
)


def test_same_seed_is_reproducible(env):
    cfg = SimConfig(realizations=5000, seed=7)
    a = sample_distances(env, cfg, [10.0, 100.0])
    b = sample_distances(env, cfg, [10.0, 100.0])
    assert np.array_equal(a, b)
    c = sample_distances(env, SimConfig(realizations=5000, seed=8), [10.0, 100.0])
    assert not np.array_equal(a, c)


def test_results_do_not_depend_on_thread_count(env, monkeypatch):
    cfg = SimConfig(realizations=3000, seed=3, block_size=500)
    monkeypatch.setattr(ps, "worker_count", lambda: 1)
    serial = monte_carlo_cir_stats(env, cfg, 360.0, [0.1, 0.5], h_grid=[0.01, 0.05])
    monkeypatch.setattr(ps, "worker_count", lambda: 4)
    threaded = monte_carlo_cir_stats(env, cfg, 360.0, [0.1, 0.5], h_grid=[0.01, 0.05])
    assert np.array_equal(serial.mean, threaded.mean)
    assert np.array_equal(serial.variance, threaded.variance)
    assert np.array_equal(serial.ecdf, threaded.ecdf)


def test_block_layout_is_prefix_stable(env):
    small = sample_distances(env, SimConfig(realizations=4096, seed=1), [50.0])
    large = sample_distances(env, SimConfig(realizations=6000, seed=1), [50.0])
    assert np.array_equal(small, large[:4096])


def test_worker_count_respects_cap(monkeypatch):
    monkeypatch.setenv("MCMC_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("MCMC_THREADS", "not-a-number")
    assert worker_count() >= 1


@pytest.mark.parametrize(
    "kwargs",
    [dict(step=0.0), dict(realizations=0), dict(horizon=1e-4, step=1e-3), dict(mode="other"), dict(block_size=0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


@given(
    x=hnp.arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)),
    cut=st.integers(1, 39),
)
def test_chan_merge_matches_pooled(x, cut):
    cut = min(cut, x.shape[0] - 1)
    merged = RunningMoments.from_samples(x[:cut]).merge(RunningMoments.from_samples(x[cut:]))
    assert merged.count == x.shape[0]
    np.testing.assert_allclose(merged.mean, x.mean(axis=0), rtol=1e-10, atol=1e-9)
    np.testing.assert_allclose(merged.variance, x.var(axis=0, ddof=1), rtol=1e-8, atol=1e-7)


def test_reflection_keeps_bodies_apart():
    env = EnvParams(D_Tx=1e-11, D_Rx=1e-11, D_X=8e-11, a_tx=1e-7, a_rx=1e-6, r0=1.3e-6)
    cfg = SimConfig(step=1e-3, horizon=0.5, realizations=500, seed=2, mode="particle-with-reflection")
    d = sample_distances(env, cfg, np.linspace(0.01, 0.5, 20))
    assert d.min() >= env.a_tx + env.a_rx
    # Without the rule some realizations overlap.
    free = sample_distances(env, SimConfig(realizations=500, seed=2), np.linspace(0.01, 0.5, 20))
    assert free.min() < env.a_tx + env.a_rx


def test_gaussian_mode_matches_distance_law(env):
    cfg = SimConfig(realizations=20_000, seed=11)
    r = sample_distances(env, cfg, [360.0])[:, 0]
    law = DistanceLaw(env, 360.0)
    ks = sps.kstest(r, lambda x: np.asarray(law.cdf(x)))
    assert ks.statistic < 0.015
    r2 = r**2
    expected = env.r0**2 + 6.0 * env.D2 * 360.0
    assert abs(r2.mean() - expected) < 4.0 * r2.std() / math.sqrt(r2.size)


def test_particle_mode_matches_gaussian_without_contact():
    # Far from contact the revert rule never fires, so both samplers follow the same law.
    env = EnvParams(D_Tx=1e-12, D_Rx=0.0, D_X=8e-11, a_tx=1e-7, a_rx=1e-6, r0=1e-5)
    cfg = SimConfig(step=0.05, horizon=5.0, realizations=4000, seed=4, mode="particle-with-reflection")
    r = sample_distances(env, cfg, [5.0])[:, 0]
    law = DistanceLaw(env, 5.0)
    assert sps.kstest(r, lambda x: np.asarray(law.cdf(x))).pvalue > 1e-3


def test_trajectory_starts_at_initial_distance(env):
    traj = simulate_distance(env, SimConfig(step=1.0, horizon=100.0, seed=0))
    assert traj.times.size == 101
    assert traj.distances[0] == pytest.approx(env.r0, rel=1e-12)


def test_samples_inside_receiver(env):
    r = np.array([0.5 * env.a_rx, env.a_rx, 2 * env.a_rx])
    h = cir_samples(env, r, 0.3)
    assert h[0] == 0.0 and h[1] == 0.0 and h[2] > 0
    p = absorption_samples(env, r, 10.0)
    assert p[0] == 1.0 and p[1] == 1.0 and 0 < p[2] < 1


def test_cir_mean_monte_carlo_consistent_with_closed_form(env):
    cfg = SimConfig(realizations=20_000, seed=5)
    tau = np.array([0.1, 0.5, 2.0])
    mc = monte_carlo_cir_stats(env, cfg, 360.0, tau)
    exact = CirStatistics(env).mean(360.0, tau)
    assert np.all(np.abs(mc.mean - exact) < 4.0 * mc.standard_error)
    assert np.allclose(mc.second_moment, mc.variance * (cfg.realizations - 1) / cfg.realizations + mc.mean**2)


def test_absorption_rate_correlated_and_independent_means_agree(env):
    cfg = SimConfig(realizations=8000, seed=9)
    t_rel = np.arange(5) * 50.0
    alpha = np.full(5, 1000.0)
    t_eval = [260.0, 300.0]
    ind = monte_carlo_absorption(env, cfg, t_rel, alpha, t_eval, theta=1.0, keep_samples=True)
    cor = monte_carlo_absorption(env, cfg, t_rel, alpha, t_eval, theta=1.0, correlated=True)
    se = np.sqrt(ind.variance / cfg.realizations + cor.variance / cfg.realizations)
    assert np.all(np.abs(ind.mean - cor.mean) < 5 * se)
    assert ind.samples.shape == (cfg.realizations, 2)
    assert np.allclose(ind.p_exceed, (ind.samples >= 1.0).mean(axis=0))
    assert np.allclose(ind.p_exceed_se, np.sqrt(ind.p_exceed * (1 - ind.p_exceed) / cfg.realizations))


def test_absorption_ignores_future_releases(env):
    cfg = SimConfig(realizations=100, seed=0)
    out = monte_carlo_absorption(env, cfg, [0.0, 500.0], [10.0, 1e9], [100.0])
    ref = monte_carlo_absorption(env, cfg, [0.0], [10.0], [100.0])
    assert np.allclose(out.mean, ref.mean)


def test_absorption_alignment_check(env):
    with pytest.raises(ValueError):
        monte_carlo_absorption(env, SimConfig(realizations=10), [0.0, 1.0], [1.0], [2.0])
