import math

import numpy as np
import pytest

from rediff.env import EnvSpec, SpecError, sample_environment
from rediff.sde import (Domain, EstimatorRefusal, estimate_exit_stats, mean_exit_time,
                        run_to_neighbor_slab, run_until_exit, simulate, step)

BM1 = sample_environment(EnvSpec(d=1, eps=0.0), 0)
BM3 = sample_environment(EnvSpec(d=3, eps=0.0), 0)


def test_step_without_noise():
    assert np.array_equal(step(BM3, [0.1, 0.2, 0.3], 0.01, np.zeros(3)), [0.1, 0.2, 0.3])
    env = sample_environment(EnvSpec(d=2, eps=0.2, lam=0.2, fluct=0.0), 0)
    np.testing.assert_allclose(step(env, [1.0, 0.0], 0.01, np.zeros(2)), [1.002, 0.0], atol=1e-15)


def test_step_variance():
    dt = 0.01
    env = sample_environment(EnvSpec(d=2, eps=0.0), 0)
    noise = np.random.default_rng(0).normal(size=(100_000, 2))
    inc = step(env, np.zeros((100_000, 2)), dt, noise)
    var = inc.var(axis=0, ddof=1)
    # chi-square envelope: sd of the sample variance is dt sqrt(2/(n-1))
    assert np.all(np.abs(var - dt) < 3 * dt * math.sqrt(2.0 / (inc.shape[0] - 1)))


def test_start_on_positive_face():
    env = sample_environment(EnvSpec(d=2, eps=0.0), 0)
    rec = run_until_exit(env, [2.0, 0.0], Domain.box(2, 3.0, 2.0, 4.0), 1e-3)
    assert rec.exit_time == 0.0 and rec.face == "+"


def test_interval_symmetry():
    b = simulate(BM1, [0.0], Domain.interval(1.0), 100_000, 1e-3, seed=2)
    p = np.mean(b.label == 1)
    assert abs(p - 0.5) < 3 * math.sqrt(0.25 / b.n)


@pytest.mark.parametrize("x1,exact", [(0.0, 1.0), (0.5, 0.75)])
def test_mean_exit_time_slab(x1, exact):
    est = mean_exit_time(BM3, [x1, 0, 0], Domain.slab(3, 1.0), 20_000, 1e-3, seed=3)
    assert abs(est.mean - exact) < 3 * est.stderr + 2e-3


def test_mean_exit_time_bracket_with_drift():
    env = sample_environment(EnvSpec(d=2, eps=0.05, lam=0.05), 1)
    est = mean_exit_time(env, [1.0, 0.0], Domain.slab(2, 5.0), 2000, 0.02, seed=1)
    assert est.extra["bracket_ok"]
    lo, hi = est.extra["bracket"]
    assert lo == pytest.approx(16.0) and hi == pytest.approx(48.0)


def test_neighbor_slab_symmetry_and_drift():
    side, _ = run_to_neighbor_slab(BM1, [0.0], 4.0, 20_000, 1e-3, seed=4)
    assert abs(np.mean(side == 1) - 0.5) < 3 * math.sqrt(0.25 / 20_000)
    env = sample_environment(EnvSpec(d=1, eps=0.5, lam=0.5, fluct=0.0, R=2.0), 0)
    side, _ = run_to_neighbor_slab(env, [0.0], 4.0, 10_000, 1e-3, seed=5)
    # exit window (-3, 3) with drift 1/2: exact right-exit probability
    exact = (1 - math.exp(-3.0)) / (math.exp(3.0) - math.exp(-3.0)) * math.exp(3.0)
    p = np.mean(side == 1)
    assert p > 0.9 and abs(p - exact) < 3 * math.sqrt(exact * (1 - exact) / 10_000)


def test_neighbor_slab_immediate_return():
    side, batch = run_to_neighbor_slab(BM1, [4.0], 4.0, 3, 1e-3, index=0)
    assert np.all(side == 1) and np.all(batch.exit_time == 0)


def test_exit_stats_symmetric_box():
    env = sample_environment(EnvSpec(d=1, eps=0.0), 0)
    st = estimate_exit_stats(env, [0.0], Domain.box(1, 3.0, 3.0, 1.0), 20_000, 1e-3, seed=6)
    lo, hi = st["rho"].ci()
    assert lo <= 1.0 <= hi


def test_exit_stats_constant_drift():
    b, L = 0.1, 5.0
    env = sample_environment(EnvSpec(d=1, eps=b, lam=b, fluct=0.0), 0)
    st = estimate_exit_stats(env, [0.0], Domain.box(1, L, L, 1.0), 20_000, 0.01, seed=7, L=100)
    q_exact = 1.0 / (1.0 + math.exp(2 * b * L))
    assert abs(st["q"].mean - q_exact) < 3 * st["q"].stderr


def test_all_paths_forward_is_flagged():
    env = sample_environment(EnvSpec(d=1, eps=0.5, lam=0.5, fluct=0.0), 0)
    st = estimate_exit_stats(env, [0.0], Domain.box(1, 20.0, 0.5, 1.0), 1000, 1e-3, seed=8, L=2.0)
    assert st["counts"]["-"] == 0 and st["zero_count"]
    assert 0 < st["rho"].mean < 1.0 / 1000 * 0.5 ** -5.0


def test_timeout_refusal():
    b = simulate(BM1, [0.0], Domain.interval(50.0), 200, 0.1, max_time=1.0)
    with pytest.raises(EstimatorRefusal):
        b.check_timeouts()


def test_worker_count_does_not_change_paths():
    env = sample_environment(EnvSpec(d=2, eps=0.2, lam=0.1), 3)
    a = simulate(env, [0, 0], Domain.slab(2, 2.0), 500, 0.01, seed=9, workers=1)
    b = simulate(env, [0, 0], Domain.slab(2, 2.0), 500, 0.01, seed=9, workers=4)
    assert np.array_equal(a.exit_point, b.exit_point) and np.array_equal(a.exit_time, b.exit_time)


def test_domain_dimension_mismatch():
    with pytest.raises(SpecError):
        simulate(BM1, [0.0, 0.0], Domain.slab(2, 1.0), 10)


def test_csv_export_round_trips_counts():
    b = simulate(BM1, [0.0], Domain.interval(1.0), 50, 1e-3, seed=1)
    lines = b.to_csv().strip().splitlines()
    assert len(lines) == 51
    assert sum(line.endswith(",+,") or ",+," in line for line in lines[1:]) == b.counts()["+"]
