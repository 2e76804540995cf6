"""End-to-end acceptance checks, one group per criterion id (A1..A12).

Tolerances are pinned as module constants.  Run with ``pytest -s`` or read
the summary block that conftest prints for the per-criterion verdicts.
"""
import math
import warnings

import numpy as np
import pytest
from scipy.linalg import solve_banded

from rediff.ballistic_example import (ExampleParams, check_perturbation_identity, delta_condition,
                                      phat_formula_vs_mc, rhohat_estimate)
from rediff.criterion import evaluate_effective_criterion, mirror_duality, slab_exit_decay_scan
from rediff.env import EnvSpec, derive_seed, sample_environment
from rediff.greenslab import (SeparableBump, SlabKernel, gamma_sums, green_apply,
                              green_by_time_integral, green_function, green_gradient)
from rediff.oned import (ChainSpec, ScaleProfile, chain_exit_probability, check_identity_275,
                         exit_probabilities_1d, rho_L_exact, transience_dichotomy)
from rediff.sde import Domain, estimate_exit_stats, mean_exit_time

SIGMA = 3.0
EXACT_RHO_TOL = 1e-6
CHAIN_TOL = 1e-12
BOUNDARY_TOL = 1e-10
SYMMETRY_TOL = 1e-14
ONE_REL_TOL = 1e-3
PDE_REL_TOL = 1e-3
GRAD_REL_TOL = 1e-4
TIME_INT_TOL = 1e-6
SUM_FACTOR = 2.0
RHOHAT_CAP = 5.0
DECAY_REL_TOL = 0.10
KS_ALPHA = 0.01


# -- A1 ----------------------------------------------------------------------

def _a1(d, x1, n=100_000, dt=1e-4, workers=1):
    env = sample_environment(EnvSpec(d=d, eps=0.0), 0)
    x = np.zeros(d)
    x[0] = x1
    return mean_exit_time(env, x, Domain.slab(d, 1.0), n, dt, seed=derive_seed(1, d, x1),
                          workers=workers)


@pytest.mark.criterion("A1")
@pytest.mark.parametrize("d", [1, 3])
@pytest.mark.parametrize("x1", [0.0, 0.5])
def test_a1_exit_time(d, x1):
    est = _a1(d, x1)
    assert abs(est.mean - (1.0 - x1 ** 2)) <= SIGMA * est.stderr


# -- A2 ----------------------------------------------------------------------

@pytest.mark.criterion("A2")
def test_a2_constant_drift_odds():
    env = sample_environment(EnvSpec(d=1, eps=0.1, lam=0.1, fluct=0.0), 0)
    assert abs(rho_L_exact(ScaleProfile(env, 5.0), 5.0) - math.exp(-1.0)) <= EXACT_RHO_TOL


def _a2_quenched(n=40_000, workers=1):
    env = sample_environment(EnvSpec(d=1, eps=0.2, lam=0.05), 21)
    L = 5.0
    left, right = exit_probabilities_1d(ScaleProfile(env, L), 0.0, -L, L)
    st = estimate_exit_stats(env, [0.0], Domain.box(1, L, L, 1.0), n, 0.005, seed=22,
                             workers=workers, L=100)
    return st, left / right


@pytest.mark.criterion("A2")
def test_a2_quenched_mc():
    st, exact = _a2_quenched()
    assert abs(st["rho"].mean - exact) <= SIGMA * st["rho"].stderr


@pytest.mark.criterion("A2")
def test_a2_log_odds_identity():
    rep = check_identity_275(EnvSpec(d=1, eps=0.2, lam=0.05), 10.0, n_env=500, seed=3)
    assert rep.passed


# -- A3 ----------------------------------------------------------------------

def _tridiagonal_left_exit(rho):
    # h(lo) = 1, h(hi) = 0, h(i) = q_i h(i-1) + p_i h(i+1) with q/p = rho
    r = rho[1:-1]
    p = 1.0 / (1.0 + r)
    q = r * p
    n = r.size
    ab = np.zeros((3, n))
    ab[1] = 1.0
    ab[0, 1:] = -p[:-1]
    ab[2, :-1] = -q[1:]
    rhs = np.zeros(n)
    rhs[0] = q[0]
    return np.concatenate([[1.0], solve_banded((1, 1), ab, rhs), [0.0]])


def _a3_chains():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        size = int(rng.integers(5, 201))
        rho = np.exp(rng.uniform(-0.5, 0.5, size))
        lo = int(rng.integers(-50, 50))
        yield ChainSpec(rho, lo, lo + size - 1)


@pytest.mark.criterion("A3")
def test_a3_chain_formula():
    worst = 0.0
    for chain in _a3_chains():
        oracle = _tridiagonal_left_exit(chain.rho_hat)
        got = np.array([chain_exit_probability(chain, s) for s in range(chain.lo, chain.hi + 1)])
        worst = max(worst, float(np.max(np.abs(got - oracle))))
    assert worst <= CHAIN_TOL


# -- A4 ----------------------------------------------------------------------

@pytest.mark.criterion("A4")
@pytest.mark.parametrize("d", [3, 4])
def test_a4_boundary_and_symmetry(d):
    kern = SlabKernel(2.0, d)
    rng = np.random.default_rng(d)
    y = rng.uniform(-1.9, 1.9, (200, d))
    face = rng.uniform(-3, 3, (200, d))
    face[:, 0] = np.where(rng.random(200) < 0.5, -2.0, 2.0)
    assert np.max(np.abs(green_function(kern, face, y))) <= BOUNDARY_TOL
    x = rng.uniform(-1.9, 1.9, (200, d))
    a, b = green_function(kern, x, y), green_function(kern, y, x)
    assert np.max(np.abs(a - b) / np.abs(a)) <= SYMMETRY_TOL


@pytest.mark.criterion("A4")
@pytest.mark.parametrize("d", [3, 4])
@pytest.mark.parametrize("x1", [0.0, 0.5])
def test_a4_constant_function(d, x1):
    L = 1.0
    kern = SlabKernel(L, d)
    x = np.zeros(d)
    x[0] = x1
    res = green_apply(kern, lambda p: np.ones(len(p)), x)
    assert abs(res.value - (L * L - x1 * x1)) <= ONE_REL_TOL * (L * L - x1 * x1)


@pytest.mark.criterion("A4")
def test_a4_pde():
    # (1/2) Laplacian of G f = -f, by Richardson-extrapolated central differences
    sep = SeparableBump(2.0, [1.0, 0.3], 0.6, d=3, n_grid=60001)
    x = np.array([0.3, 0.2, -0.1])

    def lap(h):
        out = -2 * 3 * sep.green(x)
        for e in np.eye(3):
            out += sep.green(x + h * e) + sep.green(x - h * e)
        return out / h ** 2

    lp = (4 * lap(0.05) - lap(0.1)) / 3
    f = float(sep(x[None])[0])
    assert abs(0.5 * lp + f) <= PDE_REL_TOL * abs(f)


@pytest.mark.criterion("A4")
@pytest.mark.parametrize("d", [3, 4])
def test_a4_gradient(d):
    kern = SlabKernel(2.0, d)
    rng = np.random.default_rng(10 + d)
    h = 1e-4
    for _ in range(10):
        x, y = rng.uniform(-1.5, 1.5, (2, d))
        g = green_gradient(kern, x, y)
        fd = np.array([(green_function(kern, x + h * e, y) - green_function(kern, x - h * e, y)) / (2 * h)
                       for e in np.eye(d)])
        assert np.linalg.norm(g - fd) <= GRAD_REL_TOL * np.linalg.norm(g)


@pytest.mark.criterion("A4")
@pytest.mark.parametrize("d", [3, 4])
def test_a4_time_integral(d):
    kern = SlabKernel(1.0, d)
    x = np.array([0.2] + [0.0] * (d - 1))
    for y in ([-0.3, 0.4] + [0.0] * (d - 2), [0.7, -1.0] + [0.5] * (d - 2)):
        a = green_function(kern, x, y)
        b = green_by_time_integral(kern, x, y)
        assert abs(a - b) <= TIME_INT_TOL * abs(a)


# -- A5 ----------------------------------------------------------------------

def _a5():
    y = np.zeros((1, 5))
    s5 = [float(gamma_sums(SlabKernel(float(L), 5), y, 2.0).sum_gamma.max()) for L in (8, 16, 32)]
    y = np.zeros((1, 4))
    s4 = [float(gamma_sums(SlabKernel(float(L), 4), y, 2.0).sum_gamma_tilde.max()) / math.log(L)
          for L in (8, 16, 32)]
    return s5, s4


@pytest.mark.criterion("A5")
def test_a5_variance_sums():
    s5, s4 = _a5()
    assert max(s5) / min(s5) <= SUM_FACTOR
    assert max(s4) / min(s4) <= SUM_FACTOR


# -- A6 ----------------------------------------------------------------------

def _a6(eps, n=4000, workers=1):
    L = math.floor(1 / (4 * eps))
    env = sample_environment(EnvSpec(d=4, eps=eps, lam=eps / 2), derive_seed(6, eps))
    sep = SeparableBump(float(L), [1.0, 0.5], L / 4.0, d=4)
    probes = np.zeros((5, 4))
    probes[:, 0] = np.array([-0.6, -0.3, 0.0, 0.3, 0.6]) * L
    probes[1, 1] = 0.25 * L
    probes[3, 2] = -0.25 * L
    return check_perturbation_identity(env, sep, probes, n, 1e-3 * L * L, seed=derive_seed(60, eps),
                                       workers=workers)


@pytest.mark.criterion("A6")
@pytest.mark.parametrize("eps", [0.01, 0.02, 0.05])
def test_a6_perturbation_identity(eps):
    rows = _a6(eps)
    assert all(abs(r["residual"]) <= SIGMA * r["combined_stderr"] for r in rows)


# -- A7 ----------------------------------------------------------------------

A7_EPS = 0.04


def _a7_phat(n_env=10, n=4000, workers=1):
    spec = EnvSpec(d=2, eps=A7_EPS, lam=A7_EPS / 2)
    L = ExampleParams(A7_EPS, d=2).L
    out = []
    for e in range(n_env):
        env = sample_environment(spec, derive_seed(7, e))
        x = [(-0.5 + 0.5 * (e % 3)) * spec.R, 0.0]
        out.append(phat_formula_vs_mc(env, x, L, n, 1e-3 * L * L, seed=derive_seed(70, e),
                                      workers=workers))
    return out


@pytest.mark.criterion("A7")
def test_a7_phat_formula():
    rows = _a7_phat()
    assert all(abs(r["gap"]) <= SIGMA * r["combined_stderr"] for r in rows)


@pytest.mark.criterion("A7")
def test_a7_rhohat_cap():
    params = ExampleParams(A7_EPS, d=2)
    assert params.L >= 3 * params.R
    for lam in (0.0, A7_EPS / 2, A7_EPS):
        est = rhohat_estimate(EnvSpec(d=2, eps=A7_EPS, lam=lam), params, 10, 200, dt=0.04, seed=71,
                              transverse_extent=2.0)
        assert max(est.extra["samples"]) <= RHOHAT_CAP


# -- A8 ----------------------------------------------------------------------

A8 = dict(L=10.0, Ltilde=13.0, a_grid=(0.25, 0.5, 1.0), kappa=0.5, c7=1.0)


def _a8(lam, n_env=30, n_path=200, workers=1):
    spec = EnvSpec(d=2, eps=0.2, lam=lam)
    return evaluate_effective_criterion(spec, A8["L"], A8["Ltilde"], A8["a_grid"], A8["kappa"], A8["c7"],
                                        n_env, n_path, dt=0.05, seed=8, workers=workers)


@pytest.mark.criterion("A8")
def test_a8_decision_aligned_drift():
    rep = _a8(0.2)
    assert rep.decision, f"min lhs = {rep.min_lhs:.4g} at a = {rep.best_a}"


@pytest.mark.criterion("A8")
def test_a8_decision_reversed_drift():
    assert not _a8(-0.2).decision


@pytest.mark.criterion("A8")
def test_a8_mirror_duality():
    res = mirror_duality(EnvSpec(d=2, eps=0.2, lam=0.05), 10.0, 200, 100, dt=0.05, seed=80,
                         alpha=KS_ALPHA)
    assert res["passed"], f"KS p-value {res['pvalue']:.3g}"


# -- A9 ----------------------------------------------------------------------

def _a9(n_env=4, n_path=5000, workers=1):
    spec = EnvSpec(d=1, eps=0.1, lam=0.1, fluct=0.0)
    return slab_exit_decay_scan(spec, 1.0, [5, 10, 15], n_env, n_path, dt=0.02, seed=9,
                                workers=workers)


@pytest.mark.criterion("A9")
def test_a9_decay_rate():
    scan = _a9()
    assert abs(scan.rate - 0.2) <= DECAY_REL_TOL * 0.2


# -- A10 ---------------------------------------------------------------------

def _a10_specs():
    rng = np.random.default_rng(10)
    for _ in range(10):
        eps = float(rng.uniform(0.1, 0.25))
        lam = float(rng.uniform(0.25, 1.0)) * eps * (1 if rng.random() < 0.5 else -1)
        yield EnvSpec(d=1, eps=eps, lam=lam)


def _a10(spec, n_env=300, workers=1):
    return transience_dichotomy(spec, 5.0, n_env=n_env, horizon=10_000.0, dt=0.1, seed=100,
                             workers=workers)


@pytest.mark.criterion("A10")
@pytest.mark.parametrize("k", range(10))
def test_a10_sign_agreement(k):
    spec = list(_a10_specs())[k]
    rep = _a10(spec)
    want = 1 if spec.lam > 0 else -1
    assert rep.signs == {"moment": want, "log_mean": want, "annealed": want}, rep.signs


@pytest.mark.criterion("A10")
def test_a10_symmetric_inconclusive():
    rep = _a10(EnvSpec(d=1, eps=0.2, lam=0.0))
    lo, hi = rep.log_rho.ci()
    assert lo < 0 < hi and rep.verdict == "inconclusive"


# -- A11 ---------------------------------------------------------------------

@pytest.mark.criterion("A11")
def test_a11_hand_arithmetic():
    p = ExampleParams(0.01, eta=0.5, N=None)
    # L = 25, L' = 26, N = 25^3, h = 676, H = (15625 * 26)^2, gamma = 25^-1/2 / 4
    assert (p.L, p.n_slabs, p.h, p.H) == (25, 15625, 676, 406250 ** 2)
    assert p.gamma == 0.05
    assert p.H / (2 * 676 * 15625) == 7812.5
    val, ok, (t1, t2) = delta_condition(p)
    assert t1 == math.exp(-0.05 * 15625 / 128) == math.exp(-6.103515625)
    # exponent (gamma N / 32) (7812.5 - 80)^2 is far beyond underflow
    assert t2 == 0.0 and val == t1 and ok


@pytest.mark.criterion("A11")
def test_a11_degenerate_positive_part():
    p = ExampleParams(0.05, d=2, N=4)
    val, ok, (t1, t2) = delta_condition(p)
    assert p.H / (2 * p.h * 4) == 2 and 2 < 4 / p.gamma
    assert t2 == 10 * 4 / p.gamma and not ok
    assert val == t1 + t2


# -- A12 ---------------------------------------------------------------------

def _fingerprint(obj):
    # every float repr, so any bit difference shows up
    if isinstance(obj, dict):
        return {k: _fingerprint(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_fingerprint(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tobytes().hex()
    if hasattr(obj, "as_dict"):
        return _fingerprint(obj.as_dict())
    if isinstance(obj, float):
        return obj.hex()
    return repr(obj)


def _quiet(fn):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn()


A12_RUNS = {
    "A1": lambda w: _a1(3, 0.5, n=2000, dt=1e-3, workers=w),
    "A2": lambda w: (_a2_quenched(n=2000, workers=w)[0],
                     check_identity_275(EnvSpec(d=1, eps=0.2, lam=0.05), 10.0, n_env=100, seed=3)),
    "A3": lambda w: [[chain_exit_probability(c, s) for s in range(c.lo, c.hi + 1)]
                     for c in list(_a3_chains())[:10]],
    "A4": lambda w: green_apply(SlabKernel(1.0, 3), lambda p: np.ones(len(p)), np.zeros(3)).value,
    "A5": lambda w: _a5(),
    "A6": lambda w: _a6(0.05, n=200, workers=w),
    "A7": lambda w: _a7_phat(n_env=2, n=300, workers=w),
    "A8": lambda w: (_a8(0.2, n_env=2, n_path=20, workers=w),
                     mirror_duality(EnvSpec(d=2, eps=0.2, lam=0.05), 10.0, 5, 10, dt=0.1,
                                    seed=80, workers=w)),
    "A9": lambda w: _a9(n_env=2, n_path=200, workers=w),
    "A10": lambda w: _a10(EnvSpec(d=1, eps=0.2, lam=0.05), n_env=10, workers=w),
    "A11": lambda w: delta_condition(ExampleParams(0.01, N=None)),
}


@pytest.mark.criterion("A12")
@pytest.mark.parametrize("cid", list(A12_RUNS))
def test_a12_bit_identical(cid):
    fn = A12_RUNS[cid]
    one = _fingerprint(_quiet(lambda: fn(1)))
    eight = _fingerprint(_quiet(lambda: fn(8)))
    again = _fingerprint(_quiet(lambda: fn(1)))
    assert one == eight == again
