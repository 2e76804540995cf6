import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from rediff.env import EnvSpec, SpecError
from rediff.criterion import (build_hierarchy, check_recursion, estimate_kappa,
                              evaluate_effective_criterion, rho_samples, slab_exit_decay_scan)
from rediff.sde import Domain


def test_hierarchy_scales_are_exact():
    h = build_hierarchy(300, 50, levels=3)
    assert h.N(0) == 240 and h.L(1) == 72000
    assert h.a(3) == Fraction(1, 8) and h.u(2) == Fraction(1, 64)
    assert h.L(0) == 300 and h.Lt(0) == 50
    assert h.L(2) == 240 ** 2 * 8 * 300
    assert h.Lt(1) == (h.L(1) / 300) ** 3 * 50
    assert [r["k"] for r in h.table()] == [0, 1, 2, 3]


@pytest.mark.parametrize("kw", [dict(L0=3, Lt0=2), dict(L0=3, Lt0=100), dict(L0=6, Lt0=5, u0=2),
                                dict(L0=6, Lt0=5, a0=0)])
def test_hierarchy_rejects_bad_seeds(kw):
    with pytest.raises(SpecError):
        build_hierarchy(**kw)


def _odds_1d(b, back, front):
    # exact q/p for BM with constant drift b started at 0 in (-back, front)
    if b == 0:
        return front / back
    s = lambda x: (1 - math.exp(-2 * b * x)) / (2 * b)
    p = (s(0) - s(-back)) / (s(front) - s(-back))
    return (1 - p) / p


@pytest.mark.parametrize("b", [0.0, 0.1])
def test_rho_matches_gamblers_ruin(b):
    L, R = 6.0, 2.0
    spec = EnvSpec(d=1, eps=abs(b), lam=b, fluct=0.0, R=R)
    box = Domain.criterion_box(1, L, 1.0, R)
    rs = rho_samples(spec, box, 6, 2000, dt=0.01, seed=1, L=L)
    exact = _odds_1d(b, L - R - 2, L + 2)
    est = rs.moment(1.0)
    # ratio-of-counts bias is O(1/n_path); allow 1%
    assert abs(est.mean - exact) < 3 * est.stderr + 0.01 * exact


def test_moment_tends_to_one_as_a_shrinks():
    spec = EnvSpec(d=2, eps=0.1, lam=0.05)
    rs = rho_samples(spec, Domain.criterion_box(2, 5.0, 4.0, 2.0), 3, 50, dt=0.05, seed=2)
    assert rs.moment(1e-9).mean == pytest.approx(1.0, abs=1e-7)
    assert np.all(rs.rho <= rs.cap)


def test_moment_exponent_range():
    spec = EnvSpec(d=2, eps=0.1, lam=0.05)
    with pytest.raises(SpecError):
        evaluate_effective_criterion(spec, 5.0, 4.0, a_grid=(1.5,), n_env=1, n_path=1)
    with pytest.raises(SpecError):
        evaluate_effective_criterion(spec, 5.0, 200.0, n_env=1, n_path=1)
    with pytest.raises(SpecError):
        evaluate_effective_criterion(spec, 5.0, 4.0, kappa=0.6, n_env=1, n_path=1)


@pytest.mark.parametrize("lam", [0.0, -0.1])
def test_criterion_negative_without_forward_drift(lam):
    spec = EnvSpec(d=2, eps=0.1, lam=lam)
    rep = evaluate_effective_criterion(spec, 6.0, 5.0, n_env=3, n_path=60, dt=0.05, seed=3)
    assert rep.min_lhs > 1 and rep.decision is False
    d = rep.as_dict()
    assert d["decision"] is False and d["best_a"] in rep.a_grid


def test_decay_zero_drift_is_flat():
    scan = slab_exit_decay_scan(EnvSpec(d=1, eps=0.0), 1.0, [2, 3, 4], 4, 1000, dt=0.01, seed=4)
    for p in scan.prob:
        assert abs(p.mean - 0.5) < 3 * math.sqrt(0.25 / 4000) + 1e-9
    assert scan.L.tolist() == [2, 3, 4]


def test_decay_reversed_drift_fit_rejected():
    spec = EnvSpec(d=1, eps=0.2, lam=-0.2, fluct=0.0)
    scan = slab_exit_decay_scan(spec, 1.0, [2, 4, 6], 2, 300, dt=0.02, seed=5)
    assert not scan.accepted and scan.diagnostic


def test_decay_rejects_bad_inputs():
    spec = EnvSpec(d=1, eps=0.0)
    with pytest.raises(SpecError):
        slab_exit_decay_scan(spec, 1.0, [2, 3], 1, 1)
    with pytest.raises(SpecError):
        slab_exit_decay_scan(spec, 0.0, [2, 3, 4], 1, 1)


def _kappa(spec, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return estimate_kappa(spec, 1.0, dt=1e-3, return_details=True, **kw)


def test_kappa_brownian_traversal():
    kap, det = _kappa(EnvSpec(d=1, eps=0.0), n_env=2, n_path=4000, seed=6)
    assert kap <= 0.5
    p = det["traversal"]
    # BM from 0 in (-1/4, 1) leaves at 1 with probability 1/5
    assert abs(p.mean() - 0.2) < 3 * math.sqrt(0.16 / 8000) + 5e-3


def test_kappa_insensitive_to_small_drift():
    k0, _ = _kappa(EnvSpec(d=2, eps=0.0), n_env=3, n_path=20000, seed=7)
    k1, _ = _kappa(EnvSpec(d=2, eps=0.05, lam=0.0), n_env=3, n_path=20000, seed=7)
    assert k0 <= 0.5 and k1 <= 0.5 and abs(k0 - k1) <= 0.1


def test_kappa_warns():
    with pytest.warns(UserWarning):
        estimate_kappa(EnvSpec(d=1, eps=0.0), 1.0, n_env=1, n_path=50, dt=1e-2)


def test_recursion_level_zero():
    h = build_hierarchy(6, 5, levels=1)
    rows = check_recursion(EnvSpec(d=2, eps=0.1, lam=0.05), h, 0, n_env=2, n_path=40, dt=0.05, seed=8)
    assert len(rows) == 1
    r = rows[0]
    assert r["feasible"] and r["prefactor"] == pytest.approx(float(h.Lt(1)) * 6.0)
    assert r["target"] == pytest.approx(0.5 ** 6)
    assert r["holds"] == (r["phi"] <= r["target"])
    with pytest.raises(SpecError):
        check_recursion(EnvSpec(d=2, eps=0.1), h, 3)
