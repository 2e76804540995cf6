"""One-dimensional diffusions: scale functions, exit odds and the slab chain.

In one dimension the quenched exit problem is solved by the scale function
``s(x) = int_0^x exp(-int_0^y 2 b/a du) dy``; everything below is built from
it or from the nearest-neighbour chain on slabs of width ``L0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.special import logsumexp

from .env import EnvSpec, Environment, SpecError, derive_seed, sample_environment
from .sde import MCEstimate, free_positions

__all__ = [
    "ScaleProfile",
    "scale_function",
    "rho_L_exact",
    "check_identity_275",
    "IdentityReport",
    "transience_dichotomy",
    "DichotomyReport",
    "eta_delta_recursion",
    "RecursionResult",
    "ChainSpec",
    "chain_exit_probability",
    "exit_probabilities_1d",
]


def _one_d(env: Environment):
    if env.d != 1:
        raise SpecError("one-dimensional routines need a d = 1 environment")


class ScaleProfile:
    """Tabulated scale function of a 1-D environment on ``[-extent, extent]``.

    The inner integral ``B(x) = int_0^x 2b/a`` and the outer integral of
    ``exp(-B)`` are both composite Simpson sums on a grid of step
    ``quad_step`` anchored at 0.
    """

    def __init__(self, env: Environment, extent: float, quad_step: float = 1e-3):
        _one_d(env)
        if extent <= 0 or quad_step <= 0:
            raise SpecError("extent and quad_step must be positive")
        self.env = env
        n = max(2, int(math.ceil(extent / quad_step)))
        self.quad_step = extent / n
        self.extent = float(extent)
        u = np.linspace(0.0, extent, n + 1)
        halves = []
        for sign in (1.0, -1.0):
            xs = sign * u
            beta = self._beta(xs)
            B = sign * cumulative_simpson(beta, x=u, initial=0.0)
            eB = np.exp(-B)
            s = sign * cumulative_simpson(eB, x=u, initial=0.0)
            halves.append((xs, beta, B, s))
        (xr, br, Br, sr), (xl, bl, Bl, sl) = halves
        self.x = np.concatenate([xl[:0:-1], xr])
        self.beta = np.concatenate([bl[:0:-1], br])
        self.B = np.concatenate([Bl[:0:-1], Br])
        self.s = np.concatenate([sl[:0:-1], sr])
        h = self.quad_step
        self._lip = float(np.max(np.abs(np.diff(self.beta)))) / h
        self._lip2 = float(np.max(np.abs(np.diff(self.beta, 2)), initial=0.0)) / h ** 2
        if not (np.all(np.diff(self.s) >= 0) and np.all(np.isfinite(self.B))):
            raise SpecError("scale function is not increasing; step too coarse")

    def _beta(self, xs):
        b = self.env.drift(xs[:, None])[:, 0]
        a = self.env.diffusion(xs[:, None])[:, 0, 0]
        return 2.0 * b / a

    @property
    def lipschitz(self) -> float:
        """Grid estimate of the Lipschitz constant of ``2b/a``."""
        return self._lip

    def _index(self, x):
        pos = (np.asarray(x, float) + self.extent) / self.quad_step
        if np.any(pos < -1e-9) or np.any(pos > len(self.x) - 1 + 1e-9):
            raise SpecError("point outside the tabulated range")
        return pos

    def __call__(self, x):
        return scale_function(self, x)[0]

    def error_bound(self, x) -> np.ndarray:
        """Bound on the quadrature error of ``s(x)``.

        Composite Simpson on an integrand whose derivative has Lipschitz
        constant ``M`` errs by at most ``(2/9) |x| h^2 M``.  For the inner
        integral ``M`` is the grid estimate of ``Lip((2b/a)')``; for the
        outer one ``M <= (Lip(2b/a) + max (2b/a)^2) max exp(-B)``.  The inner
        error enters ``exp(-B)`` as a relative factor.
        """
        xs = np.asarray(x, float)
        x = np.abs(xs)
        h2 = self.quad_step ** 2
        eb = 2.0 / 9.0 * x * h2 * self._lip2
        emax = float(np.max(np.exp(-self.B)))
        bmax = float(np.max(np.abs(self.beta)))
        sx = np.abs(_interp_s(self, xs))
        outer = 2.0 / 9.0 * x * h2 * (self._lip + bmax ** 2) * emax
        return sx * np.expm1(eb) + outer

    def log_increments(self, nodes) -> np.ndarray:
        """``log(s(nodes[i+1]) - s(nodes[i]))`` without cancellation.

        Nodes must be increasing grid points; each gap is integrated with
        ``exp(-B)`` normalized at its left end.
        """
        idx = np.rint((np.asarray(nodes, float) + self.extent) / self.quad_step).astype(int)
        if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= len(self.x):
            raise SpecError("nodes must be increasing points of the grid")
        out = np.empty(len(idx) - 1)
        for k in range(len(out)):
            seg = self.B[idx[k]:idx[k + 1] + 1]
            out[k] = math.log(simpson(np.exp(-(seg - seg[0])), dx=self.quad_step)) - seg[0]
        return out


def _interp_s(profile, x):
    # cubic Hermite between nodes, using s' = exp(-B)
    pos = profile._index(x)
    i = np.clip(np.floor(pos).astype(int), 0, len(profile.x) - 2)
    t = pos - i
    h = profile.quad_step
    s0, s1 = profile.s[i], profile.s[i + 1]
    d0, d1 = np.exp(-profile.B[i]) * h, np.exp(-profile.B[i + 1]) * h
    t2, t3 = t * t, t * t * t
    return (2 * t3 - 3 * t2 + 1) * s0 + (t3 - 2 * t2 + t) * d0 \
        + (-2 * t3 + 3 * t2) * s1 + (t3 - t2) * d1


def scale_function(profile: ScaleProfile, x):
    """``(s(x), error_bound)``; exact Simpson sums at grid nodes, Hermite in between."""
    val = _interp_s(profile, x)
    err = profile.error_bound(x)
    if np.ndim(val) == 0:
        return float(val), float(err)
    return val, err


def rho_L_exact(profile: ScaleProfile, L: float) -> float:
    """``s(L) / (-s(-L))``: odds of leaving ``(-L, L)`` to the left rather than the right."""
    if L <= 0:
        raise SpecError("L must be positive")
    sp, _ = scale_function(profile, L)
    sm, _ = scale_function(profile, -L)
    return float(sp / (-sm))


def exit_probabilities_1d(profile: ScaleProfile, x0: float, lo: float, hi: float):
    """``(P[exit at lo], P[exit at hi])`` from ``x0`` in ``(lo, hi)``."""
    if not lo < x0 < hi:
        raise SpecError("need lo < x0 < hi")
    s_lo, s0, s_hi = (float(_interp_s(profile, v)) for v in (lo, x0, hi))
    left = (s_hi - s0) / (s_hi - s_lo)
    return left, 1.0 - left


# ----------------------------------------------------------------------------

@dataclass
class IdentityReport:
    L: float
    n_env: int
    lhs: MCEstimate
    rhs: MCEstimate
    difference: MCEstimate
    quad_bound: float
    passed: bool

    def as_dict(self) -> dict:
        return {"L": self.L, "n_env": self.n_env, "lhs": self.lhs.as_dict(),
                "rhs": self.rhs.as_dict(), "difference": self.difference.as_dict(),
                "quad_bound": self.quad_bound, "passed": self.passed}


def _log_rho_bound(profile, L):
    sp, _ = scale_function(profile, L)
    sm, _ = scale_function(profile, -L)
    ep, em = profile.error_bound(L), profile.error_bound(-L)
    return float(ep / abs(sp) + em / abs(sm)) * 1.01


def check_identity_275(spec1d: EnvSpec, L: float, n_env: int = 500,
                       quad_step: float = 1e-3, seed: int = 0) -> IdentityReport:
    """Compare the mean of ``log rho_L`` with ``-2L E[b(0)/a(0)]`` over sampled environments.

    Each environment contributes the exact ``log rho_L`` and the point value
    ``-2L b(0)/a(0)``; the paired difference has mean zero when the identity
    holds.  The verdict allows three standard errors plus the worst
    quadrature bound.
    """
    if spec1d.d != 1:
        raise SpecError("identity check needs a d = 1 spec")
    if n_env < 100:
        raise SpecError("n_env must be at least 100")
    lhs = np.empty(n_env)
    rhs = np.empty(n_env)
    qb = 0.0
    for i in range(n_env):
        env = sample_environment(spec1d, derive_seed(seed, "identity", i))
        prof = ScaleProfile(env, L, quad_step)
        lhs[i] = math.log(rho_L_exact(prof, L))
        beta0 = prof.beta[np.searchsorted(prof.x, 0.0)]
        rhs[i] = -L * beta0
        qb = max(qb, _log_rho_bound(prof, L))
    diff = MCEstimate.from_samples(lhs - rhs)
    passed = abs(diff.mean) <= 3.0 * diff.stderr + qb
    return IdentityReport(L, n_env, MCEstimate.from_samples(lhs), MCEstimate.from_samples(rhs),
                          diff, qb, bool(passed))


# ----------------------------------------------------------------------------

@dataclass
class DichotomyReport:
    L: float
    a_grid: list
    moments: dict
    moments_reversed: dict
    log_rho: MCEstimate
    annealed_right: float
    annealed_left: float
    signs: dict
    verdict: str

    def as_dict(self) -> dict:
        return {"L": self.L, "a_grid": list(self.a_grid),
                "moments": {str(a): m.as_dict() for a, m in self.moments.items()},
                "moments_reversed": {str(a): m.as_dict() for a, m in self.moments_reversed.items()},
                "log_rho": self.log_rho.as_dict(), "annealed_right": self.annealed_right,
                "annealed_left": self.annealed_left, "signs": dict(self.signs),
                "verdict": self.verdict}


def transience_dichotomy(spec1d: EnvSpec, L: float, a_grid=(0.25, 0.5, 1.0), n_env: int = 300,
                      horizon: float = 4000.0, *, dt: float = 0.05, seed: int = 0,
                      workers: int = 1, quad_step: float = 1e-3) -> DichotomyReport:
    """Three independent signs of directional transience in one dimension.

    Sign ``+1`` means transient to the right, ``-1`` to the left, ``0`` no
    conclusion.  (i) uses the smallest upper confidence limit of
    ``E[rho_L^a]`` (or of ``E[rho_L^-a]``) over ``a_grid``; (ii) the
    confidence interval of ``E[log rho_L]``; (v) the share of annealed
    paths beyond ``+L`` (or ``-L``) at time ``horizon``, with threshold 0.95.
    """
    if spec1d.d != 1:
        raise SpecError("dichotomy needs a d = 1 spec")
    if not L > spec1d.R:
        raise SpecError("need L > R")
    logs = np.empty(n_env)
    finals = np.empty(n_env)
    for i in range(n_env):
        env = sample_environment(spec1d, derive_seed(seed, "dichotomy", i))
        logs[i] = math.log(rho_L_exact(ScaleProfile(env, L, quad_step), L))
        finals[i] = free_positions(env, np.zeros(1), 1, horizon, dt,
                                   seed=derive_seed(seed, "annealed"), path_offset=i)[0, 0]
    mom = {a: MCEstimate.from_samples(np.exp(a * logs)) for a in a_grid}
    mom_r = {a: MCEstimate.from_samples(np.exp(-a * logs)) for a in a_grid}
    up = min(m.ci()[1] for m in mom.values())
    up_r = min(m.ci()[1] for m in mom_r.values())
    s1 = 1 if up < 1 else (-1 if up_r < 1 else 0)
    lr = MCEstimate.from_samples(logs)
    lo, hi = lr.ci()
    s2 = 1 if hi < 0 else (-1 if lo > 0 else 0)
    right = float(np.mean(finals > L))
    left = float(np.mean(finals < -L))
    s5 = 1 if right > 0.95 else (-1 if left > 0.95 else 0)
    signs = {"moment": s1, "log_mean": s2, "annealed": s5}
    vals = set(signs.values())
    if len(vals) > 1:
        verdict = "disagreement"
    else:
        verdict = {1: "transient_right", -1: "transient_left", 0: "inconclusive"}[vals.pop()]
    return DichotomyReport(L, list(a_grid), mom, mom_r, lr, right, left, signs, verdict)


# ----------------------------------------------------------------------------

@dataclass
class RecursionResult:
    L0: float
    eta: np.ndarray
    log_delta: np.ndarray
    log_rho_hat: np.ndarray
    slope: MCEstimate
    target: MCEstimate
    seeding: str
    extra: dict = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    def to_csv(self, env_index: int = 0) -> str:
        rows = ["n,eta,delta,log_rho_hat"]
        for n in range(self.eta.shape[1]):
            rows.append(f"{n},{self.eta[env_index, n]!r},{self.delta[env_index, n]!r},"
                        f"{self.log_rho_hat[env_index, n]!r}")
        return "\n".join(rows) + "\n"


def _chain_odds(env, L0, n_window, quad_step):
    # sites nL0 for n = -1..n_window; q_n = P[reach (n-1)L0 before (n+1)L0]
    ext = (n_window + 1) * L0
    prof = ScaleProfile(env, ext, quad_step)
    nodes = np.arange(-1, n_window + 1) * L0
    li = prof.log_increments(nodes)
    lr = li[1:] - li[:-1]
    # q = up / (up + down) = 1 / (1 + exp(-lr))
    q = 0.5 * (1.0 + np.tanh(0.5 * lr))
    return q, lr


def eta_delta_recursion(spec1d: EnvSpec, L0: float, n_window: int = 100, n_env: int = 50, *,
                        seed: int = 0, seeding: str = "fixed_point",
                        quad_step: float = 1e-3) -> RecursionResult:
    """Backward return probabilities ``eta_n`` and escape probabilities ``delta_n``.

    Sites are ``n L0`` for ``n = 0 .. n_window - 1``.  ``eta`` is seeded at
    the right edge, either with ``q`` (an absorbing wall one slab further)
    or with the fixed point ``min(1, q/p)`` of the constant-odds recursion,
    evaluated at the geometric mean of the window's odds.
    The seed's influence decays geometrically towards the left.  The slope
    of ``log delta_n`` against the distance to the right edge, fitted on
    the left half of the window, is compared with the window average of
    ``-log rho_hat + log eta``.
    """
    if spec1d.d != 1:
        raise SpecError("recursion needs a d = 1 spec")
    if n_window < 50:
        raise SpecError("n_window must be at least 50")
    if seeding not in ("fixed_point", "q"):
        raise SpecError("seeding must be 'fixed_point' or 'q'")
    warnings.warn("eta is seeded at the right window edge; values near that edge "
                  "carry the truncation and only decay geometrically", stacklevel=2)
    etas = np.empty((n_env, n_window))
    ldel = np.empty((n_env, n_window))
    lrho = np.empty((n_env, n_window))
    slopes = np.empty(n_env)
    targets = np.empty(n_env)
    half = n_window // 2
    for e in range(n_env):
        env = sample_environment(spec1d, derive_seed(seed, "recursion", e))
        q, lr = _chain_odds(env, L0, n_window, quad_step)
        p = 1.0 - q
        eta = np.empty(n_window)
        # constant-odds fixed point from the window's geometric-mean odds
        fixed = min(1.0, math.exp(float(np.mean(lr))))
        start = fixed if seeding == "fixed_point" else q[-1]
        nxt = start
        for n in range(n_window - 1, -1, -1):
            eta[n] = q[n] / (1.0 - p[n] * nxt)
            nxt = eta[n]
        eta = np.minimum(eta, 1.0)
        with np.errstate(divide="ignore"):
            terms = -lr + np.log(eta)
            ld = math.log(1.0 - start) + np.cumsum(terms[::-1])[::-1] if start < 1.0 \
                else np.full(n_window, -np.inf)
        etas[e], ldel[e], lrho[e] = eta, ld, lr
        dist = n_window - np.arange(half)
        ok = np.all(np.isfinite(ld[:half]))
        slopes[e] = np.polyfit(dist, ld[:half], 1)[0] if ok else np.nan
        targets[e] = np.mean(terms[:half])
    return RecursionResult(L0, etas, ldel, lrho, MCEstimate.from_samples(slopes),
                           MCEstimate.from_samples(targets), seeding)


# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainSpec:
    """Nearest-neighbour chain on ``lo..hi`` with left/right odds ``rho_hat[i]``.

    ``rho_hat`` has one entry per site ``lo..hi``; the two boundary entries
    are unused because both ends are absorbing.  When ``kappa`` and ``L0``
    are given the odds are checked against ``kappa^(L0+1) <= rho <= kappa^-(L0+1)``.
    """

    rho_hat: np.ndarray
    lo: int
    hi: int
    kappa: float | None = None
    L0: float | None = None

    def __post_init__(self):
        r = np.asarray(self.rho_hat, float)
        object.__setattr__(self, "rho_hat", r)
        if self.hi - self.lo < 2:
            raise SpecError("window needs at least one interior site")
        if r.shape != (self.hi - self.lo + 1,):
            raise SpecError("rho_hat needs one entry per site lo..hi")
        if np.any(~(r[1:-1] > 0)) or not np.all(np.isfinite(r[1:-1])):
            raise SpecError("odds must be positive and finite")
        if self.kappa is not None and self.L0 is not None:
            lo_b = self.kappa ** (self.L0 + 1)
            if np.any(r[1:-1] < lo_b * (1 - 1e-12)) or np.any(r[1:-1] > (1 + 1e-12) / lo_b):
                raise SpecError("odds outside [kappa^(L0+1), kappa^-(L0+1)]")

    def log_products(self) -> np.ndarray:
        """``log Pi_{m+1..hi-1} rho_hat^-1`` for ``m = lo..hi-1``."""
        lr = np.log(self.rho_hat[1:-1])
        # suffix sums over sites m+1..hi-1
        suffix = np.concatenate([np.cumsum(lr[::-1])[::-1], [0.0]])
        return -suffix


def chain_exit_probability(chain: ChainSpec, start: int) -> float:
    """Probability that the chain started at ``start`` is absorbed at ``lo`` before ``hi``.

    Computed as ``f(start) / f(lo)`` with
    ``f(i) = sum_{m=i}^{hi-1} prod_{j=m+1}^{hi-1} rho_hat(j)^-1``.
    """
    if not chain.lo <= start <= chain.hi:
        raise SpecError("start outside the window")
    if start == chain.hi:
        return 0.0
    lp = chain.log_products()
    k = start - chain.lo
    return float(math.exp(logsumexp(lp[k:]) - logsumexp(lp)))
