import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rediff.env import (EnvSpec, SpecError, derive_seed, diffusion_at, drift_at,
                        ks_lattice_stationarity, sample_environment, verify_env_axioms)


def test_constant_mode_gives_constant_drift():
    spec = EnvSpec(d=3, eps=0.1, lam=0.1, fluct=0.0)
    env = sample_environment(spec, 7)
    x = np.random.default_rng(0).uniform(-20, 20, (500, 3))
    b = drift_at(env, x)
    np.testing.assert_allclose(b, np.tile([0.1, 0.0, 0.0], (500, 1)), rtol=0, atol=1e-15)


def test_drift_is_a_pure_function_of_seed_and_point():
    spec = EnvSpec(d=2, eps=0.2, lam=0.05)
    x = np.random.default_rng(1).uniform(-10, 10, (1000, 2))
    a = sample_environment(spec, 99).drift(x)
    b = sample_environment(spec, 99).drift(x)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_environment(spec, 100).drift(x))


def test_site_mean_matches_lam():
    spec = EnvSpec(d=2, eps=0.1, lam=0.01, offset=False)
    env = sample_environment(spec, 3)
    zs = np.stack(np.meshgrid(np.arange(100), np.arange(100)), -1).reshape(-1, 2)
    v1 = env.site_vectors(zs)[:, 0]
    se = v1.std(ddof=1) / np.sqrt(v1.size)
    assert abs(v1.mean() - 0.01) < 3 * se


def test_drift_bound_on_grid():
    spec = EnvSpec(d=2, eps=0.15, lam=0.03)
    env = sample_environment(spec, 11)
    x = np.random.default_rng(2).uniform(-30, 30, (10_000, 2))
    assert np.linalg.norm(env.drift(x), axis=1).max() <= 0.15 * (1 + 1e-12)


def test_finite_difference_slope_below_lipschitz_bound():
    spec = EnvSpec(d=2, eps=0.2, lam=0.0)
    env = sample_environment(spec, 5)
    rng = np.random.default_rng(3)
    x = rng.uniform(-10, 10, (1000, 2))
    u = rng.normal(size=(1000, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    h = 1e-3
    slope = np.linalg.norm(env.drift(x + h * u) - env.drift(x), axis=1) / h
    assert slope.max() <= spec.kbar * (1 + 1e-2)


def test_identity_diffusion():
    env = sample_environment(EnvSpec(d=3, eps=0.1), 0)
    a = diffusion_at(env, np.zeros(3))
    assert np.array_equal(a, np.eye(3))


def test_generated_diffusion_is_symmetric_and_elliptic():
    spec = EnvSpec(d=3, eps=0.1, nu=2.0, diffusion_mode="generated")
    env = sample_environment(spec, 4)
    x = np.random.default_rng(4).uniform(-5, 5, (1000, 3))
    a = env.diffusion(x)
    assert np.array_equal(a, np.swapaxes(a, 1, 2))
    w = np.linalg.eigvalsh(a)
    assert w.min() >= 1 / 2.0 - 1e-12 and w.max() <= 2.0 + 1e-12


def test_axioms_report_for_constant_field_is_zero_variance():
    rep = verify_env_axioms(sample_environment(EnvSpec(d=2, eps=0.1, lam=0.1, fluct=0.0), 0),
                            n_probe=200, n_seeds=50)
    assert rep.zero_variance and rep.ok


def test_axioms_random_field():
    rep = verify_env_axioms(sample_environment(EnvSpec(d=2, eps=0.1, lam=0.02), 0),
                            n_probe=500, n_seeds=500)
    assert rep.ok
    assert abs(rep.correlation_far) < 4 / np.sqrt(500)
    assert rep.correlation_origin == pytest.approx(1.0)


def test_lattice_stationarity():
    spec = EnvSpec(d=2, eps=0.1, lam=0.02)
    assert ks_lattice_stationarity(spec, [0.3, 0.1], [3, -2], n_seeds=400) > 1e-3


def test_mirror_reverses_mean():
    spec = EnvSpec(d=1, eps=0.2, lam=-0.1)
    vals = [sample_environment(spec, s).drift(0.37)[0] for s in range(2000)]
    assert np.mean(vals) == pytest.approx(-0.1, abs=4 * np.std(vals) / np.sqrt(2000))


@pytest.mark.parametrize("kw", [dict(lam=0.2, eps=0.1), dict(nu=0.5), dict(r_phi=0.4), dict(r_phi=1.0),
                                dict(d=0), dict(diffusion_mode="x")])
def test_invalid_specs(kw):
    with pytest.raises(SpecError):
        EnvSpec(**kw)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.floats(0.01, 0.3), st.floats(0, 1), st.booleans())
def test_spec_text_round_trip(d, eps, frac, offset):
    spec = EnvSpec(d=d, eps=eps, lam=eps * frac, offset=offset)
    assert EnvSpec.from_text(spec.to_text()) == spec


def test_derive_seed_is_stable():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
