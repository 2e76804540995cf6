import math

import numpy as np
import pytest

from rediff.ballistic_example import (ExampleParams, check_perturbation_identity, delta_condition,
                                      displacement_check, fluctuation_scan, green_op_quenched,
                                      phat_formula_vs_mc, rhohat_estimate,
                                      supermartingale_exit_bound)
from rediff.env import EnvSpec, SpecError, sample_environment
from rediff.greenslab import SeparableBump


def bm(d):
    return sample_environment(EnvSpec(d=d, eps=0.0), 0)


def const(d, b):
    return sample_environment(EnvSpec(d=d, eps=b, lam=b, fluct=0.0), 0)


def scale_p_right(b, x, L):
    # right-exit probability of (-L, L) for BM with constant drift b
    if b == 0:
        return (x + L) / (2 * L)
    return -math.expm1(-2 * b * (x + L)) / -math.expm1(-4 * b * L)


def exit_time_1d(b, x, L):
    # E_x[T] for drift b in (-L, L): solves u''/2 + b u' = -1, u(+-L) = 0
    B = -L / (b * math.sinh(2 * b * L))
    A = L / b - B * math.exp(-2 * b * L)
    return -x / b + A + B * math.exp(-2 * b * x)


def test_params_scales():
    p = ExampleParams(0.01, N=None)
    assert (p.L, p.n_slabs, float(p.Lp), float(p.h)) == (25, 15625, 26.0, 676.0)
    assert p.H == 406250 ** 2 and p.gamma == pytest.approx(0.05)
    assert p.violations() == [] and not p.desk_scale
    q = ExampleParams(0.05)
    assert q.desk_scale and q.as_dict()["stamp"]
    assert q.M == math.floor((4 * 6) ** 3 / (32 * q.H))


def test_params_reject_weak_drift():
    p = ExampleParams(0.05)
    with pytest.raises(SpecError):
        p.check_spec(EnvSpec(d=4, eps=0.05, lam=0.001))
    p.check_spec(EnvSpec(d=4, eps=0.05, lam=0.05))
    with pytest.raises(SpecError):
        ExampleParams(0.3)


def test_exit_time_of_unit_slab():
    est = green_op_quenched(bm(3), "one", [0, 0, 0], 20000, 1e-4, L=1.0, seed=1)
    assert abs(est.mean - 1.0) < 3 * est.stderr + 1e-3
    lo, hi = est.extra["bracket"]
    assert lo <= est.mean <= hi


def test_exit_time_bracket_with_drift():
    env = sample_environment(EnvSpec(d=2, eps=0.1, lam=0.05), 2)
    est = green_op_quenched(env, "one", [0.5, 0], 2000, 0.01, L=3.0, seed=2)
    lo, hi = est.extra["bracket"]
    assert lo <= est.mean <= hi


def test_green_of_constant_drift_matches_1d_exit_time():
    b, L = 0.1, 3.0
    g = green_op_quenched(const(2, b), "b1", [0.5, 0], 8000, 0.005, L=L, seed=3)
    assert abs(g.mean - b * exit_time_1d(b, 0.5, L)) < 3 * g.stderr + 0.01


def test_f_must_be_supported():
    with pytest.raises(SpecError):
        green_op_quenched(bm(2), lambda y: y, [0, 0], 10, L=1.0)
    with pytest.raises(SpecError):
        green_op_quenched(bm(2), "one", [2, 0], 10, L=1.0)


def test_phat_zero_drift_centre():
    env = sample_environment(EnvSpec(d=2, eps=0.0, R=2.0), 0)
    r = phat_formula_vs_mc(env, [0, 0], 3.0, 4000, 0.005, seed=4)
    assert r["formula"].mean == 0.5 and r["agree"]
    r = phat_formula_vs_mc(env, [1.0, 0], 3.0, 200, 0.01, seed=4)
    assert r["formula"].mean == (1.0 + 3.0) / 6.0


def test_phat_constant_drift_matches_scale_function():
    b, L = 0.1, 3.0
    r = phat_formula_vs_mc(const(2, b), [0.5, 0], L, 8000, 0.005, seed=5)
    exact = scale_p_right(b, 0.5, L)
    assert abs(r["formula"].mean - exact) < 3 * r["formula"].stderr + 2e-3
    assert r["agree"]


def test_rhohat_zero_drift_is_deterministic():
    params = ExampleParams(0.1, d=2)
    est = rhohat_estimate(EnvSpec(d=2, eps=0.0), params, 2, 10, dt=0.05, seed=0)
    L, R = params.L, params.R
    assert est.mean == (L + R / 2) / (L - R / 2)
    assert est.stderr == 0


def test_rhohat_refuses_small_slab():
    with pytest.raises(SpecError):
        rhohat_estimate(EnvSpec(d=2, eps=0.2, lam=0.2), ExampleParams(0.2, d=2), 1, 1)


def test_rhohat_monotone_in_lam_and_below_one_when_aligned():
    eps = 1.0 / 80
    params = ExampleParams(eps, d=2)
    assert params.L == 20
    means = []
    for lam in (0.0, eps / 2, eps):
        est = rhohat_estimate(EnvSpec(d=2, eps=eps, lam=lam), params, 50 if lam == eps else 10, 100,
                              dt=0.4, seed=6, refine=False)
        means.append(est)
        assert est.extra["cap_ok"]
    assert means[0].mean > means[1].mean > means[2].mean
    assert means[2].extra["below_one"]


def test_green_b1_bounded_by_half_slab():
    env = sample_environment(EnvSpec(d=2, eps=0.1, lam=0.05), 7)
    L = 2.5
    for x1 in (-1.0, 0.0, 1.0):
        g = green_op_quenched(env, "b1", [x1, 0.3], 1000, 0.01, L=L, seed=7)
        assert abs(g.mean) - 3 * g.stderr <= L / 2


def test_identity_without_drift():
    sep = SeparableBump(2.5, [1.0, 0.4], 0.7, d=3)
    rows = check_perturbation_identity(bm(3), sep, [[0.0, 0, 0], [1.0, 0.3, 0]], 3000, 0.005, seed=8)
    for r in rows:
        assert r["correction"] == 0.0 and r["passed"]


def test_identity_random_drift():
    env = sample_environment(EnvSpec(d=3, eps=0.1, lam=0.05), 9)
    sep = SeparableBump(2.5, [1.0], 0.8, d=3)
    rows = check_perturbation_identity(env, sep, [[0.5, 0, 0]], 3000, 0.005, seed=9)
    assert rows[0]["passed"] and rows[0]["correction"] != 0


def test_displacement_zero_and_constant_drift():
    rows = displacement_check(bm(2), [[0.0, 0.0]], 3.0, n=4000, dt=0.01, seed=10)
    r = rows[0]
    assert abs(r["displacement"].mean) < 3 * r["displacement"].stderr
    assert r["green_b1"].mean == 0 and r["lateral_fraction"] < 0.01
    b, L, x = 0.1, 3.0, 0.5
    rows = displacement_check(const(2, b), [[x, 0.0]], L, n=8000, dt=0.005, seed=11)
    d = rows[0]["displacement"]
    exact = L * (2 * scale_p_right(b, x, L) - 1) - x
    assert abs(d.mean - exact) < 3 * d.stderr + 0.02


def test_delta_degenerate_case():
    p = ExampleParams(0.05, d=2, N=4)
    val, ok, (t1, t2) = delta_condition(p)
    assert float(p.H) / (2 * float(p.h) * 4) <= 4 / p.gamma
    assert t2 == pytest.approx(40 / p.gamma, rel=1e-14) and not ok


def test_delta_decreases_in_N():
    vals = [delta_condition(ExampleParams(0.01, N=n))[0] for n in (400, 800, 1600, 3200, 15625)]
    assert np.all(np.diff(vals) < 0)
    assert delta_condition(ExampleParams(0.01, N=None))[1]


def test_backtrack_zero_drift_exact():
    L, R = 4.0, 2.0
    env = sample_environment(EnvSpec(d=1, eps=0.0, R=R), 0)
    res = supermartingale_exit_bound(env, L, 20000, 1e-3, seed=12)
    exact = (R / 2) / (2 * L)
    assert abs(res["estimate"].mean - exact) < 3 * res["estimate"].stderr + 2e-3
    assert res["bound"] == pytest.approx(R / (4 * L)) and res["ok"]


def test_backtrack_constant_drift_below_bound():
    eps, L, R = 0.05, 4.0, 2.0
    env = sample_environment(EnvSpec(d=1, eps=eps, lam=eps, fluct=0.0, R=R), 0)
    res = supermartingale_exit_bound(env, L, 20000, 1e-3, seed=13)
    s = lambda x: -math.expm1(-2 * eps * x)
    exact = (s(L + R / 2) - s(L)) / (s(L + R / 2) - s(-L + R / 2))
    assert exact <= res["bound"] and res["ok"]
    assert abs(res["estimate"].mean - exact) < 3 * res["estimate"].stderr + 2e-3


def test_fluctuations_shrink():
    out = fluctuation_scan(d=4, L_list=(4, 8, 16), n_env=8, seed=1)
    assert out["decreasing"]
    assert [r["L"] for r in out["rows"]] == [4, 8, 16]
