"""Finite-box criterion for directional transience and its multiscale hierarchy.

The central quantity is the odds ``rho_B = q_B / p_B`` of leaving a box
through its back or lateral faces rather than through the positive face,
estimated per environment from a fixed path budget and then averaged over
environments (balanced two-level design).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .env import EnvSpec, SpecError, derive_seed, sample_environment
from .sde import (Domain, EstimatorRefusal, MCEstimate, TIMEOUT_LIMIT, simulate,
                  smoothed_rho)

__all__ = [
    "RhoSamples",
    "rho_samples",
    "estimate_rho_moment",
    "CriterionReport",
    "evaluate_effective_criterion",
    "BoxHierarchy",
    "build_hierarchy",
    "check_recursion",
    "DecayScan",
    "slab_exit_decay_scan",
    "estimate_kappa",
    "mirror_duality",
]


@dataclass
class RhoSamples:
    """Per-environment odds for one box, under add-1/2 and add-1 smoothing."""

    rho: np.ndarray
    rho_add1: np.ndarray
    counts: np.ndarray
    timeout_fraction: np.ndarray
    flagged: list
    cap: float

    def moment(self, a: float, add1: bool = False) -> MCEstimate:
        r = self.rho_add1 if add1 else self.rho
        return MCEstimate.from_samples(r ** a)


def _check_a(a):
    if not 0 < a <= 1:
        raise SpecError("moment exponent a must lie in (0, 1]")


def rho_samples(spec: EnvSpec, box: Domain, n_env: int, n_path: int, *, dt: float | None = None,
                seed: int = 0, workers: int = 1, kappa: float = 0.5, L: float | None = None,
                max_time: float | None = None, x0=None, tag: str = "rho") -> RhoSamples:
    """Odds ``rho`` of ``box`` in ``n_env`` sampled environments, ``n_path`` paths each.

    Environment ``i`` uses seed ``derive_seed(seed, tag, i)``; its paths use
    noise stream ``i``.  ``L`` sets the cap ``kappa^-(L + 3)`` and defaults
    to ``depth_pos - 2`` of the box.  Environments whose timeout share
    exceeds the refusal limit are flagged, not dropped.
    """
    if box.d != spec.d:
        raise SpecError("box and spec dimensions differ")
    if n_env < 1 or n_path < 1:
        raise SpecError("budgets must be positive")
    if L is None:
        L = box.params.get("depth_pos", 2.0) - 2.0
    x0 = np.zeros(spec.d) if x0 is None else np.asarray(x0, float)
    noise_seed = derive_seed(seed, tag, "paths")
    rho = np.empty(n_env)
    rho1 = np.empty(n_env)
    counts = np.empty((n_env, 4), dtype=np.int64)
    tof = np.empty(n_env)
    flagged = []
    for i in range(n_env):
        env = sample_environment(spec, derive_seed(seed, tag, i))
        batch = simulate(env, x0, box, n_path, dt, seed=noise_seed, stream=i,
                         workers=workers, max_time=max_time)
        c = batch.counts()
        k_p = c["+"]
        k_q = c["-"] + c["lateral"]
        rho[i] = smoothed_rho(k_p, k_q, kappa, L)
        rho1[i] = smoothed_rho(k_p, k_q, kappa, L, add=1.0)
        counts[i] = (c["+"], c["-"], c["lateral"], c["timeout"])
        tof[i] = batch.timeout_fraction
        if tof[i] > TIMEOUT_LIMIT:
            flagged.append(i)
    return RhoSamples(rho, rho1, counts, tof, flagged, kappa ** (-(L + 3.0)))


def estimate_rho_moment(spec: EnvSpec, box: Domain, a: float, n_env: int, n_path: int,
                        **kw) -> MCEstimate:
    """Two-level estimate of ``E[rho_B^a]`` with environment-level standard error.

    ``extra`` carries the add-1 smoothing value (the sensitivity band) and
    the indices of environments with too many timeouts.
    """
    _check_a(a)
    rs = rho_samples(spec, box, n_env, n_path, **kw)
    est = rs.moment(a)
    alt = rs.moment(a, add1=True)
    est.extra.update(add1=alt.mean, band=abs(alt.mean - est.mean), flagged=rs.flagged)
    return est


# ----------------------------------------------------------------------------

@dataclass
class CriterionReport:
    """Outcome of the finite-box criterion search.

    ``core[(L, Lt)][a]`` is the constant-free quantity
    ``Lt^(d-1) L^(3(d-1)+1) E[rho^a]``; the left-hand side adds the factor
    ``c7 (log 1/kappa)^(3(d-1))``.
    """

    d: int
    kappa: float
    c7: float
    a_grid: list
    boxes: list
    moments: dict
    core: dict
    best_a: float
    best_box: tuple
    n_env: int
    n_path: int
    flagged: dict = field(default_factory=dict)

    def log_factor(self) -> float:
        return math.log(1.0 / self.kappa) ** (3 * (self.d - 1))

    def lhs(self, c7: float | None = None, box=None, a=None) -> float:
        c7 = self.c7 if c7 is None else c7
        box = self.best_box if box is None else box
        a = self.best_a if a is None else a
        return c7 * self.log_factor() * self.core[box][a]

    @property
    def min_lhs(self) -> float:
        return self.lhs()

    @property
    def decision(self) -> bool:
        return self.min_lhs < 1.0

    def as_dict(self) -> dict:
        return {
            "schema": 1,
            "d": self.d, "kappa": self.kappa, "c7": self.c7, "a_grid": self.a_grid,
            "boxes": [list(b) for b in self.boxes],
            "moments": {f"{b[0]},{b[1]}": {str(a): m.as_dict() for a, m in mm.items()}
                        for b, mm in self.moments.items()},
            "core": {f"{b[0]},{b[1]}": {str(a): v for a, v in cc.items()}
                     for b, cc in self.core.items()},
            "best_a": self.best_a, "best_box": list(self.best_box),
            "min_lhs": self.min_lhs, "decision": self.decision,
            "n_env": self.n_env, "n_path": self.n_path,
            "flagged": {f"{b[0]},{b[1]}": v for b, v in self.flagged.items()},
        }


def evaluate_effective_criterion(spec: EnvSpec, L: float, Ltilde: float, a_grid=(0.25, 0.5, 1.0),
                                 kappa: float = 0.5, c7: float = 1.0, n_env: int = 30,
                                 n_path: int = 200, *, boxes=None, dt: float | None = None,
                                 seed: int = 0, workers: int = 1,
                                 max_time: float | None = None) -> CriterionReport:
    """Search the criterion over ``a_grid`` and a list of ``(L, Ltilde)`` boxes.

    ``boxes`` defaults to the single pair ``(L, Ltilde)``.  Every box must
    satisfy ``R + 2 <= Ltilde < L^3``.
    """
    if not 0 < kappa <= 0.5:
        raise SpecError("kappa must lie in (0, 1/2]")
    for a in a_grid:
        _check_a(a)
    boxes = [(float(L), float(Ltilde))] if boxes is None else [tuple(map(float, b)) for b in boxes]
    d = spec.d
    moments, core, flagged = {}, {}, {}
    for (bl, bt) in boxes:
        if not bt < bl ** 3:
            raise SpecError(f"need Ltilde < L^3 (got Ltilde={bt}, L={bl})")
        if bt < spec.R + 2:
            raise SpecError("need Ltilde >= R + 2")
        box = Domain.criterion_box(d, bl, bt, spec.R)
        rs = rho_samples(spec, box, n_env, n_path, dt=dt, seed=seed, workers=workers,
                         kappa=kappa, L=bl, max_time=max_time)
        mm = {}
        for a in a_grid:
            est = rs.moment(a)
            est.extra.update(add1=rs.moment(a, add1=True).mean)
            mm[a] = est
        moments[(bl, bt)] = mm
        core[(bl, bt)] = {a: bt ** (d - 1) * bl ** (3 * (d - 1) + 1) * m.mean for a, m in mm.items()}
        flagged[(bl, bt)] = rs.flagged
    best = min(((b, a) for b in boxes for a in a_grid), key=lambda t: core[t[0]][t[1]])
    return CriterionReport(d, kappa, c7, list(a_grid), boxes, moments, core, best[1], best[0],
                           n_env, n_path, flagged)


# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxHierarchy:
    """Scales of the multiscale boxes, in exact rational arithmetic."""

    L0: Fraction
    Lt0: Fraction
    u0: Fraction
    a0: Fraction
    v: int
    alpha: int
    levels: int

    def N(self, k: int) -> Fraction:
        return self.alpha / self.u0 * self.v ** k

    def L(self, k: int) -> Fraction:
        return (self.alpha / self.u0) ** k * Fraction(self.v) ** (k * (k - 1) // 2) * self.L0

    def Lt(self, k: int) -> Fraction:
        return (self.L(k) / self.L0) ** 3 * self.Lt0

    def a(self, k: int) -> Fraction:
        return self.a0 / 2 ** k

    def u(self, k: int) -> Fraction:
        return self.u0 / Fraction(self.v) ** k

    def table(self) -> list:
        return [{"k": k, "L": self.L(k), "Ltilde": self.Lt(k), "N": self.N(k),
                 "a": self.a(k), "u": self.u(k)} for k in range(self.levels + 1)]


def build_hierarchy(L0, Lt0, u0=1, a0=1, *, R: float = 2.0, v: int = 8, alpha: int = 240,
                    levels: int = 3) -> BoxHierarchy:
    """Level ``k`` has ``L_k = (alpha/u0)^k v^(k(k-1)/2) L0`` and ``Lt_k = (L_k/L0)^3 Lt0``."""
    L0, Lt0, u0, a0 = (Fraction(str(x)) if isinstance(x, float) else Fraction(x)
                       for x in (L0, Lt0, u0, a0))
    if not 0 < u0 <= 1:
        raise SpecError("u0 must lie in (0, 1]")
    if not Fraction(str(R)) + 2 <= Lt0 <= L0 ** 3:
        raise SpecError("need R + 2 <= Lt0 <= L0^3")
    if not 0 < a0 <= 1:
        raise SpecError("a0 must lie in (0, 1]")
    return BoxHierarchy(L0, Lt0, u0, a0, v, alpha, levels)


def check_recursion(spec: EnvSpec, hierarchy: BoxHierarchy, k_max: int = 0, *, n_env: int = 20,
                    n_path: int = 200, dt: float = 0.02, kappa: float = 0.5, c3: float = 1.0,
                    step_budget: float = 5e9, seed: int = 0, workers: int = 1) -> list:
    """Per-level ``phi_k = c3 Lt_{k+1}^(d-1) L_k E[rho_k^(a_k)]`` against ``kappa^(u_k L_k)``.

    A level is infeasible when the expected number of Euler steps,
    ``n_env n_path L_k^2 / dt`` with a generous drift-free exit time, exceeds
    ``step_budget``.  It is unresolved when the target is below the smallest
    nonzero moment the budget can see, ``1 / (n_env n_path)`` scaled by the
    prefactor.
    """
    if k_max > 2:
        raise SpecError("k_max is limited to 2")
    d = spec.d
    rows = []
    for k in range(k_max + 1):
        Lk = float(hierarchy.L(k))
        Ltk = float(hierarchy.Lt(k))
        ak = float(hierarchy.a(k))
        pref = c3 * float(hierarchy.Lt(k + 1)) ** (d - 1) * Lk
        target = kappa ** (float(hierarchy.u(k)) * Lk)
        steps = n_env * n_path * (Lk + 2) ** 2 / dt
        row = {"k": k, "L": Lk, "Ltilde": Ltk, "a": ak, "prefactor": pref, "target": target,
               "expected_steps": steps, "feasible": steps <= step_budget,
               "resolvable": target / pref >= 1.0 / (n_env * n_path)}
        if row["feasible"]:
            box = Domain.criterion_box(d, Lk, Ltk, spec.R)
            rs = rho_samples(spec, box, n_env, n_path, dt=dt, seed=seed, workers=workers,
                             kappa=kappa, L=Lk)
            m = rs.moment(ak)
            row.update(moment=m, phi=pref * m.mean, phi_stderr=pref * m.stderr,
                       holds=pref * m.mean <= target, flagged=rs.flagged)
        rows.append(row)
    return rows


# ----------------------------------------------------------------------------

@dataclass
class DecayScan:
    """Annealed back-exit probabilities over ``L`` and the fitted decay."""

    L: np.ndarray
    prob: list
    upper_bounds: dict
    rate: float
    rate_stderr: float
    c: float
    gamma: float
    gamma_stderr: float
    accepted: bool
    diagnostic: str

    def to_csv(self) -> str:
        rows = ["L,p,stderr,neg_log_p"]
        for L, p in zip(self.L, self.prob):
            nl = -math.log(p.mean) if p.mean > 0 else float("inf")
            rows.append(f"{L!r},{p.mean!r},{p.stderr!r},{nl!r}")
        return "\n".join(rows) + "\n"

    def as_dict(self) -> dict:
        return {"schema": 1, "L": self.L.tolist(), "prob": [p.as_dict() for p in self.prob],
                "upper_bounds": {str(k): v for k, v in self.upper_bounds.items()},
                "rate": self.rate, "rate_stderr": self.rate_stderr, "c": self.c,
                "gamma": self.gamma, "gamma_stderr": self.gamma_stderr,
                "accepted": self.accepted, "diagnostic": self.diagnostic}


def slab_exit_decay_scan(spec: EnvSpec, b_back: float, L_list, n_env: int, n_path: int, *,
                         dt: float | None = None, seed: int = 0, workers: int = 1,
                         max_time: float | None = None) -> DecayScan:
    """Estimate ``P_0[hit -b_back L before L]`` for each ``L`` and fit its decay.

    ``rate`` is the least-squares slope of ``-log P`` against ``L`` through
    the origin (the exponent-one fit).  ``(c, gamma)`` fit
    ``-log P = c L^gamma`` on log-log axes.  Entries with no back exit are
    replaced by the upper bound ``3 / (n_env n_path)`` and left out of the
    fits.  The fit is rejected when ``-log P`` does not increase with ``L``.
    """
    L_arr = np.asarray(L_list, float)
    if L_arr.size < 3 or np.any(np.diff(L_arr) <= 0):
        raise SpecError("L_list must be increasing with at least three entries")
    if b_back <= 0:
        raise SpecError("b_back must be positive")
    probs, ub = [], {}
    for j, L in enumerate(L_arr):
        dom = Domain.thresholds(spec.d, -b_back * L, L)
        freq = np.empty(n_env)
        for i in range(n_env):
            env = sample_environment(spec, derive_seed(seed, "decay", i))
            batch = simulate(env, np.zeros(spec.d), dom, n_path, dt, seed=derive_seed(seed, "decay-paths", j),
                             stream=i, workers=workers, max_time=max_time)
            batch.check_timeouts()
            lab = batch.label[~batch.timeout]
            freq[i] = np.mean(lab == -1)
        est = MCEstimate.from_samples(freq)
        if est.mean == 0:
            ub[float(L)] = 3.0 / (n_env * n_path)
        probs.append(est)
    keep = np.array([p.mean > 0 for p in probs])
    y = np.array([-math.log(p.mean) if p.mean > 0 else np.nan for p in probs])
    ys = np.array([p.stderr / p.mean if p.mean > 0 else np.nan for p in probs])
    rate = rate_se = c = gam = gam_se = float("nan")
    accepted = False
    diag = ""
    if keep.sum() >= 2:
        Lk, yk, sk = L_arr[keep], y[keep], ys[keep]
        rate = float(np.sum(Lk * yk) / np.sum(Lk * Lk))
        rate_se = float(math.sqrt(np.sum((Lk * sk) ** 2)) / np.sum(Lk * Lk))
        if np.all(np.diff(yk) > 0) and np.all(yk > 0):
            coef, cov = np.polyfit(np.log(Lk), np.log(yk), 1, cov=keep.sum() > 3) \
                if keep.sum() > 3 else (np.polyfit(np.log(Lk), np.log(yk), 1), None)
            gam = float(coef[0])
            c = float(math.exp(coef[1]))
            if cov is not None:
                gam_se = float(math.sqrt(cov[0, 0]))
            else:
                # propagate per-point errors through the log-log slope
                xl = np.log(Lk) - np.log(Lk).mean()
                gam_se = float(math.sqrt(np.sum((xl * sk / yk) ** 2)) / np.sum(xl * xl))
            accepted = True
        else:
            diag = "-log P does not increase with L; no decay to fit"
    else:
        diag = "fewer than two nonzero estimates"
    if not accepted and not diag:
        diag = "fit rejected"
    return DecayScan(L_arr, probs, ub, rate, rate_se, c, gam, gam_se, accepted, diag)


# ----------------------------------------------------------------------------

def estimate_kappa(spec: EnvSpec, L_probe: float = 1.0, n_env: int = 30, n_path: int = 2000, *,
                   dt: float | None = None, seed: int = 0, workers: int = 1,
                   return_details: bool = False):
    """Tube-traversal estimate of the ellipticity constant, never above 1/2.

    For each environment the share ``P`` of paths that cross the tube
    ``{-1/4 < x.e1 < L, |x_j| < L/4}`` through its far end gives
    ``c = P^(1/(L+1))``; the result is ``min(min_env c, 1/2)``.  This
    estimates an infimum from finitely many samples and so errs on the
    large side.
    """
    if L_probe < 1:
        raise SpecError("L_probe must be at least 1")
    warnings.warn("kappa estimated from finitely many environments overstates the infimum; "
                  "pass kappa explicitly for criterion decisions", stacklevel=2)
    dom = Domain.traversal_tube(spec.d, L_probe)
    ps = np.empty(n_env)
    for i in range(n_env):
        env = sample_environment(spec, derive_seed(seed, "kappa", i))
        batch = simulate(env, np.zeros(spec.d), dom, n_path, dt, seed=derive_seed(seed, "kappa-paths"),
                         stream=i, workers=workers)
        batch.check_timeouts()
        ps[i] = np.mean(batch.label[~batch.timeout] == 1)
    if np.any(ps == 0):
        raise EstimatorRefusal("an environment had no traversals; raise n_path")
    cs = ps ** (1.0 / (L_probe + 1.0))
    kap = float(min(cs.min(), 0.5))
    if return_details:
        return kap, {"traversal": ps, "c": cs}
    return kap


def mirror_duality(spec: EnvSpec, L: float, n_env: int = 200, n_path: int = 200, *,
                   Ltilde: float | None = None, dt: float | None = None, seed: int = 0,
                   workers: int = 1, alpha: float = 0.01) -> dict:
    """Two-sample KS test of ``rho_B`` against ``1 / rho_B'``.

    ``B'`` is the box reflected through the hyperplane ``x.e1 = 0`` and
    ``rho_B'`` is computed in the drift-reversed law with independent
    environments and noise.  Lateral exits break the symmetry, so the
    default transverse half-width is ``L^3 - 1``.
    """
    Lt = L ** 3 - 1 if Ltilde is None else float(Ltilde)
    box = Domain.criterion_box(spec.d, L, Lt, spec.R)
    mbox = Domain.box(spec.d, L + 2.0, L - spec.R - 2.0, Lt)
    a = rho_samples(spec, box, n_env, n_path, dt=dt, seed=seed, workers=workers, L=L, tag="mirror-a")
    b = rho_samples(spec.reversed(), mbox, n_env, n_path, dt=dt, seed=seed, workers=workers,
                    L=L, tag="mirror-b")
    # the reflected box measures odds along +e1, whose roles are swapped
    inv = 1.0 / b.rho
    res = stats.ks_2samp(a.rho, inv)
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue),
            "passed": bool(res.pvalue > alpha), "rho": a.rho, "rho_reflected_inverse": inv}
