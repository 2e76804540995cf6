"""Brownian motion killed on leaving the slab ``{|x1| < L}``.

The Green function is the alternating image series of the free kernel
``gamma_d |z|^(2-d)``.  With ``a = x1 - y1``, ``b = x1 + y1 - 2L`` and
``r = |x_perp - y_perp|``::

    g(x, y) = gamma_d * sum_k [F(a - 4kL) - F(b - 4kL)],   F(c) = (c^2 + r^2)^(-nu)

where ``nu = (d - 2) / 2``.  Images with ``|k| <= K`` are summed directly.
The remaining two-sided tail is expanded in Gegenbauer polynomials, which
turns it into a rapidly convergent series of Hurwitz zeta values, so the
truncation error does not depend on ``K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy import integrate, special

from .env import SpecError

__all__ = [
    "SlabKernel",
    "heat_kernel",
    "green_function",
    "green_gradient",
    "green_apply",
    "green_by_time_integral",
    "gamma_d",
    "gamma_d_numeric",
    "SeparableBump",
    "BoundFit",
    "fit_green_bounds",
    "check_green_bounds",
    "gamma_sums",
    "gamma_terms",
    "GammaSums",
]

_NMAX = 60
_KMAX = 4096
_GUARD = 1e-12


def gamma_d(d: int) -> float:
    """Coefficient of ``|x - y|^(2-d)`` in the free Green function of ``Delta / 2``."""
    if d < 3:
        raise SpecError("the free Green function needs d >= 3")
    return math.gamma(d / 2.0 - 1.0) / (2.0 * math.pi ** (d / 2.0))


def gamma_d_numeric(d: int) -> float:
    """Same constant obtained by integrating the Gaussian kernel in time at unit distance."""
    def p(t):
        return (2.0 * math.pi * t) ** (-d / 2.0) * math.exp(-1.0 / (2.0 * t))

    # split at the peak so quad sees a smooth integrand on each piece
    peak = 1.0 / d
    a, _ = integrate.quad(p, 0.0, peak, epsabs=0.0, epsrel=1e-13, limit=200)
    b, _ = integrate.quad(p, peak, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return a + b


@lru_cache(maxsize=None)
def _zeta_table(d: int) -> np.ndarray:
    # scaled Hurwitz values zeta(2nu + j, K + 1) * (K + 1)^(2nu + j)
    nu2 = d - 2.0
    ks = np.arange(_KMAX + 1, dtype=float)[:, None]
    js = np.arange(_NMAX + 4, dtype=float)[None, :]
    p = nu2 + js
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        z = special.zeta(p, ks + 1.0) * np.exp(p * np.log(ks + 1.0))
    z[~np.isfinite(z)] = 0.0
    return np.ascontiguousarray(z)


@njit(cache=True, inline="always")
def _neg_pow(q, nu2):
    # q^(-nu2/2) with cheap paths for small integer dimensions
    if nu2 == 2.0:
        return 1.0 / q
    if nu2 == 1.0:
        return 1.0 / math.sqrt(q)
    if nu2 == 3.0:
        return 1.0 / (q * math.sqrt(q))
    if nu2 == 4.0:
        return 1.0 / (q * q)
    return q ** (-0.5 * nu2)


@njit(cache=True)
def _tail(c, r2, L, nu2, K, zt, want_grad, out):
    """Two-sided image tail for |k| > K.  out = (value, d/dc, (d/dr)/r)."""
    nu = 0.5 * nu2
    A = 4.0 * L * (K + 1.0)
    cs = c / A
    rho2 = (c * c + r2) / (A * A)
    base = A ** (-nu2)
    # value: sum over even n >= 2 of C_n^nu(x) t^n Z_n
    p0 = 1.0
    p1 = 2.0 * nu * cs
    val = 0.0
    for n in range(2, _NMAX + 1):
        p2 = (2.0 * cs * (n + nu - 1.0) * p1 - rho2 * (n + 2.0 * nu - 2.0) * p0) / n
        if n % 2 == 0:
            val += p2 * zt[K, n]
        p0 = p1
        p1 = p2
    out[0] = 2.0 * base * val
    if not want_grad:
        return
    mu = nu + 1.0
    q0 = 1.0
    q1 = 2.0 * mu * cs
    dc = 2.0 * cs * zt[K, 2] * q0 - 2.0 * zt[K, 2] * q1
    dr = q0 * zt[K, 2]
    for n in range(2, _NMAX + 1):
        q2 = (2.0 * cs * (n + mu - 1.0) * q1 - rho2 * (n + 2.0 * mu - 2.0) * q0) / n
        if n % 2 == 0:
            dc += 2.0 * cs * q2 * zt[K, n + 2]
            dr += q2 * zt[K, n + 2]
        else:
            dc -= 2.0 * q2 * zt[K, n + 1]
        q0 = q1
        q1 = q2
    out[1] = -2.0 * nu * base / A * dc
    out[2] = -4.0 * nu * base / (A * A) * dr


@njit(cache=True)
def _green_one(x, y, L, nu2, gam, zt, kmin, want_grad, out, grad):
    d = x.shape[0]
    r2 = 0.0
    for j in range(1, d):
        dz = x[j] - y[j]
        r2 += dz * dz
    a = x[0] - y[0]
    b = x[0] + y[0] - 2.0 * L
    rho = math.sqrt(max(a * a, b * b) + r2)
    K = max(kmin, int(math.ceil(rho / (2.0 * L))))
    if K > _KMAX:
        K = _KMAX
    nu = 0.5 * nu2
    four = 4.0 * L
    val = 0.0
    dc = 0.0
    drr = 0.0
    tb = np.empty(3)
    for side in range(2):
        c = a if side == 0 else b
        sgn = 1.0 if side == 0 else -1.0
        # k = 0 and the symmetric pairs, added pairwise so that x <-> y is exact
        q = c * c + r2
        f = _neg_pow(q, nu2)
        sv = f
        sc = 0.0
        sr = 0.0
        if want_grad:
            sc = -nu2 * c * f / q
            sr = -nu2 * f / q
        for k in range(1, K + 1):
            cm = c - four * k
            cp = c + four * k
            qm = cm * cm + r2
            qp = cp * cp + r2
            fm = _neg_pow(qm, nu2)
            fp = _neg_pow(qp, nu2)
            sv += fm + fp
            if want_grad:
                sc += -nu2 * (cm * fm / qm + cp * fp / qp)
                sr += -nu2 * (fm / qm + fp / qp)
        _tail(c, r2, L, nu2, K, zt, want_grad, tb)
        val += sgn * (sv + tb[0])
        if want_grad:
            dc += sgn * (sc + tb[1])
            drr += sgn * (sr + tb[2])
    out[0] = gam * val
    if want_grad:
        grad[0] = gam * dc
        for j in range(1, d):
            grad[j] = gam * drr * (x[j] - y[j])
    return nu


@njit(cache=True)
def _green_many(X, Y, L, nu2, gam, zt, kmin, want_grad, vals, grads):
    n, d = X.shape
    out = np.empty(1)
    g = np.empty(d)
    for i in range(n):
        _green_one(X[i], Y[i], L, nu2, gam, zt, kmin, want_grad, out, g)
        vals[i] = out[0]
        if want_grad:
            for j in range(d):
                grads[i, j] = g[j]


@njit(cache=True)
def _heat_many(T, X, Y, L, vals):
    n, d = X.shape
    for i in range(n):
        t = T[i]
        r2 = 0.0
        for j in range(1, d):
            dz = X[i, j] - Y[i, j]
            r2 += dz * dz
        a = X[i, 0] - Y[i, 0]
        b = X[i, 0] + Y[i, 0] - 2.0 * L
        reach = math.sqrt(100.0 * t)
        K = int(math.ceil((max(abs(a), abs(b)) + reach) / (4.0 * L))) + 1
        s = 0.0
        for k in range(-K, K + 1):
            ca = a - 4.0 * L * k
            cb = b - 4.0 * L * k
            s += math.exp(-ca * ca / (2.0 * t)) - math.exp(-cb * cb / (2.0 * t))
        norm = (2.0 * math.pi * t) ** (-0.5 * d)
        vals[i] = norm * math.exp(-r2 / (2.0 * t)) * s


@dataclass(frozen=True)
class SlabKernel:
    """Green and heat kernels of the slab of half-width ``L`` in dimension ``d``.

    ``kmin`` is the smallest number of image pairs summed directly; the
    count grows with the distance between the points.  ``tol`` is the
    absolute accuracy asked of every kernel evaluation.
    """

    L: float
    d: int
    tol: float = 1e-10
    kmin: int = 2
    gamma: float = field(init=False)

    def __post_init__(self):
        if not self.L > 0:
            raise SpecError("slab half-width must be positive")
        if self.d < 1:
            raise SpecError("dimension must be positive")
        object.__setattr__(self, "gamma", gamma_d(self.d) if self.d >= 3 else float("nan"))

    def tail_bound(self, K: int, rho: float = 0.0) -> float:
        """Sum over ``|k| > K`` of the monotone image envelope ``(4|k|L - rho)^(2-d)``.

        This is what plain truncation at ``K`` would cost; the Gegenbauer
        tail removes it, leaving only the series remainder below ``tol``.
        """
        nu2 = self.d - 2.0
        start = 4.0 * self.L * (K + 1) - rho
        if start <= 0:
            return float("inf")
        # integral comparison for the decreasing envelope
        s = start ** (-nu2)
        if nu2 > 1:
            s += start ** (1.0 - nu2) / ((nu2 - 1.0) * 4.0 * self.L)
        else:
            return float("inf")
        return 2.0 * self.gamma * s

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.abs(x[..., 0]) <= self.L


def _pairs(kern, *arrays):
    arrs = [np.asarray(a, float) for a in arrays]
    shape = np.broadcast_shapes(*[a.shape for a in arrs])
    if shape[-1] != kern.d:
        raise SpecError(f"points must have last dimension {kern.d}")
    out = [np.ascontiguousarray(np.broadcast_to(a, shape).reshape(-1, kern.d)) for a in arrs]
    return shape[:-1], out


def _check_inside(kern, *pts):
    for p in pts:
        if np.any(np.abs(p[:, 0]) > kern.L * (1 + 1e-12)):
            raise SpecError("points must lie in the closed slab")


def heat_kernel(kern: SlabKernel, t, x, y):
    """Transition density of Brownian motion killed on leaving the slab."""
    shape, (X, Y) = _pairs(kern, x, y)
    _check_inside(kern, X, Y)
    T = np.broadcast_to(np.asarray(t, float), shape).reshape(-1)
    if np.any(T <= 0):
        raise SpecError("time must be positive")
    vals = np.empty(X.shape[0])
    _heat_many(np.ascontiguousarray(T), X, Y, kern.L, vals)
    return vals.reshape(shape) if shape else float(vals[0])


def _green_eval(kern, x, y, want_grad):
    if kern.d < 3:
        raise SpecError("the slab Green function is implemented for d >= 3")
    shape, (X, Y) = _pairs(kern, x, y)
    _check_inside(kern, X, Y)
    if np.any(np.sum((X - Y) ** 2, axis=1) < _GUARD ** 2):
        raise SpecError("x and y coincide: the Green function is singular there")
    vals = np.empty(X.shape[0])
    grads = np.empty_like(X) if want_grad else np.empty((1, kern.d))
    _green_many(X, Y, kern.L, kern.d - 2.0, kern.gamma, _zeta_table(kern.d),
                kern.kmin, want_grad, vals, grads)
    return shape, vals, grads


def green_function(kern: SlabKernel, x, y):
    """g(x, y) for points of the closed slab, broadcasting over leading axes."""
    shape, vals, _ = _green_eval(kern, x, y, False)
    return vals.reshape(shape) if shape else float(vals[0])


def green_gradient(kern: SlabKernel, x, y):
    """Gradient of g in its first argument."""
    shape, _, grads = _green_eval(kern, x, y, True)
    return grads.reshape(shape + (kern.d,)) if shape else grads[0].copy()


def green_by_time_integral(kern: SlabKernel, x, y, T: float = np.inf) -> float:
    """``int_0^T p(t, x, y) dt`` by adaptive quadrature (independent of the image series)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    r2 = float(np.sum((x - y) ** 2))

    def f(t):
        return heat_kernel(kern, t, x, y) if t > 0 else 0.0

    peak = max(r2 / kern.d, 1e-12)
    hi = min(T, 40.0 * kern.L ** 2 + 10.0 * r2)
    pts = sorted({min(peak, hi), min(4 * peak, hi), min(kern.L ** 2, hi)})
    total = 0.0
    lo = 0.0
    for p in pts + [hi]:
        if p > lo:
            v, _ = integrate.quad(f, lo, p, epsabs=0.0, epsrel=1e-10, limit=400)
            total += v
            lo = p
    # past 40 L^2 the killed density is below exp(-49) of its peak
    return total


# ----------------------------------------------------------------------------
# Green operator quadrature

def _sphere_rule(d: int, n_theta: int, n_phi: int):
    """Directions and weights on S^(d-1); weights sum to the sphere area."""
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    w = np.full(n_phi, 2 * np.pi / n_phi)
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    gx, gw = np.polynomial.legendre.leggauss(n_theta)
    for m in range(2, d):
        # polar angle on [0, pi] split at pi/2; weight sin^(m-1)
        th = np.concatenate([(gx + 1) * np.pi / 4, (gx + 3) * np.pi / 4])
        tw = np.concatenate([gw, gw]) * np.pi / 4 * np.sin(th) ** (m - 1)
        new_dirs = np.concatenate(
            [np.cos(th)[:, None, None] * np.ones((1, len(dirs), 1)),
             np.sin(th)[:, None, None] * dirs[None, :, :]], axis=2)
        dirs = new_dirs.reshape(-1, m + 1)
        w = (tw[:, None] * w[None, :]).reshape(-1)
    return dirs, w


def _apply_once(kern, f, x, n_theta, n_phi, n_rad, far):
    d = kern.d
    L = kern.L
    dirs, dw = _sphere_rule(d, n_theta, n_phi)
    bdist = L - abs(x[0])
    r0 = 0.05 * min(L, bdist)
    # distance to the slab boundary along each direction
    u = dirs[:, 0]
    with np.errstate(divide="ignore"):
        exit_r = np.where(u > 0, (L - x[0]) / np.where(u > 0, u, 1),
                          np.where(u < 0, (-L - x[0]) / np.where(u < 0, u, 1), np.inf))
    rend = np.minimum(exit_r, far)
    edges = [0.0, r0]
    while edges[-1] < far:
        edges.append(edges[-1] * 3.0)
    edges = np.array(edges)
    gx, gw = np.polynomial.legendre.leggauss(n_rad)
    total = 0.0
    step = max(1, 200_000 // (len(edges) * n_rad))
    for s0 in range(0, len(dirs), step):
        sl = slice(s0, s0 + step)
        lo = np.minimum(edges[:-1][None, :], rend[sl, None])
        hi = np.minimum(edges[1:][None, :], rend[sl, None])
        half = 0.5 * (hi - lo)
        rad = (0.5 * (hi + lo))[:, :, None] + half[:, :, None] * gx[None, None, :]
        rw = half[:, :, None] * gw[None, None, :] * rad ** (d - 1) * dw[sl, None, None]
        keep = rw.reshape(-1) > 0
        rr = rad.reshape(-1)[keep]
        ww = rw.reshape(-1)[keep]
        dd = np.repeat(dirs[sl], rad.shape[1] * rad.shape[2], axis=0)[keep]
        pts = x[None, :] + rr[:, None] * dd
        pts[:, 0] = np.clip(pts[:, 0], -L, L)
        fv = np.asarray(f(pts), float)
        if fv.shape != (pts.shape[0],):
            raise SpecError("f must map an (n, d) array of points to n values")
        if not np.all(np.isfinite(fv)):
            raise SpecError("f must be bounded")
        gv = green_function(kern, np.broadcast_to(x, pts.shape), pts)
        total += float(np.sum(ww * gv * fv))
    return total


@dataclass(frozen=True)
class ApplyResult:
    value: float
    error: float

    def __float__(self):
        return self.value


def green_apply(kern: SlabKernel, f, x, *, n_theta: int | None = None, n_phi: int = 24,
                n_rad: int = 12, far: float | None = None, estimate_error: bool = True):
    """``int g(x, y) f(y) dy`` by quadrature in polar coordinates about ``x``.

    ``f`` takes an ``(n, d)`` array and returns ``n`` values.  Rays run from
    ``x`` to the slab boundary or to the cutoff ``far`` (default ``20 L``,
    where the kernel has decayed by ``exp(-10 pi)``).  Radial panels grow
    geometrically from ``0.05 min(L, dist(x, boundary))``, which absorbs the
    ``|x - y|^(2-d)`` singularity into the Jacobian.  The error estimate is
    the difference from a coarser rule.
    """
    x = np.asarray(x, float)
    if x.shape != (kern.d,):
        raise SpecError(f"x must have shape ({kern.d},)")
    if not abs(x[0]) < kern.L:
        raise SpecError("x must lie in the open slab")
    far = 20.0 * kern.L if far is None else float(far)
    if n_theta is None:
        n_theta = 12 if kern.d <= 4 else 9
    v = _apply_once(kern, f, x, n_theta, n_phi, n_rad, far)
    err = float("nan")
    if estimate_error:
        vc = _apply_once(kern, f, x, max(2 * n_theta // 3, 2), max(2 * n_phi // 3, 4),
                         max(2 * n_rad // 3, 2), far)
        err = abs(v - vc)
    return ApplyResult(v, err)


# ----------------------------------------------------------------------------
# separable test functions with closed-form Green images

class SeparableBump:
    """``f(y) = h(y1) exp(-|y_perp - c|^2 / (2 s^2))`` with ``h`` a finite sine series.

    ``h(y1) = sum_n coef[n-1] sin(n pi (y1 + L) / (2L))`` vanishes on the
    slab faces, so ``G f`` separates into slab modes times transverse heat
    integrals, which are tabulated once on a radial grid.
    """

    def __init__(self, L: float, coef, s: float, center=None, *, d: int = 4,
                 r_max: float | None = None, n_grid: int = 6001):
        self.L = float(L)
        self.coef = np.asarray(coef, float).ravel()
        self.s = float(s)
        self.d = int(d)
        self.center = np.zeros(self.d - 1) if center is None else np.asarray(center, float)
        if self.center.shape != (self.d - 1,):
            raise SpecError("center must have d - 1 components")
        if self.s <= 0 or self.L <= 0 or self.coef.size == 0:
            raise SpecError("need L > 0, s > 0 and at least one coefficient")
        self.r_max = 12.0 * self.L + 6.0 * self.s if r_max is None else float(r_max)
        self.n_grid = int(n_grid)
        self._tabs = None

    @property
    def modes(self) -> np.ndarray:
        return np.arange(1, self.coef.size + 1)

    @property
    def mu(self) -> np.ndarray:
        return 0.5 * (self.modes * np.pi / (2 * self.L)) ** 2

    @property
    def dr(self) -> float:
        return self.r_max / (self.n_grid - 1)

    def _split(self, y):
        y = np.asarray(y, float)
        arg = np.pi * (y[..., 0] + self.L) / (2 * self.L)
        r = np.sqrt(np.sum((y[..., 1:] - self.center) ** 2, axis=-1))
        return arg, r

    def __call__(self, y):
        arg, r = self._split(y)
        h = np.sin(np.multiply.outer(arg, self.modes)) @ self.coef
        return h * np.exp(-r ** 2 / (2 * self.s ** 2))

    def tables(self):
        """Transverse integrals ``I_n(r)`` and ``J_n(r)`` on the radial grid."""
        if self._tabs is None:
            r = np.linspace(0.0, self.r_max, self.n_grid)
            s2 = self.s ** 2
            m = self.d - 1
            mu = self.mu

            def integrand(u):
                # t = s^2 (e^u - 1) maps (0, inf) onto u in (0, inf) with mild decay
                t = s2 * math.expm1(u)
                jac = s2 * math.exp(u)
                v = s2 + t
                trans = (s2 / v) ** (m / 2) * np.exp(-r ** 2 / (2 * v))
                dec = np.exp(-mu * t)[:, None]
                base = dec * trans[None, :] * jac
                return np.concatenate([base, base / v])

            u_hi = math.log1p(60.0 / (mu[0] * s2))
            val, _ = integrate.quad_vec(integrand, 0.0, u_hi, epsabs=1e-14, epsrel=1e-11,
                                        limit=400)
            n = len(mu)
            self._tabs = (np.ascontiguousarray(val[:n]), np.ascontiguousarray(val[n:]))
        return self._tabs

    def _interp(self, tab, r):
        grid = np.linspace(0.0, self.r_max, self.n_grid)
        return np.stack([np.interp(r, grid, row, right=0.0) for row in tab], axis=-1)

    def green(self, x):
        """``G f(x)``."""
        arg, r = self._split(x)
        ti, _ = self.tables()
        return (np.sin(np.multiply.outer(arg, self.modes)) * self._interp(ti, r)) @ self.coef

    def green_grad(self, x):
        """Gradient of ``G f``."""
        x = np.asarray(x, float)
        arg, r = self._split(x)
        ti, tj = self.tables()
        k = self.modes * np.pi / (2 * self.L)
        g1 = (k * np.cos(np.multiply.outer(arg, self.modes)) * self._interp(ti, r)) @ self.coef
        gj = (np.sin(np.multiply.outer(arg, self.modes)) * self._interp(tj, r)) @ self.coef
        perp = -(x[..., 1:] - self.center) * gj[..., None]
        return np.concatenate([g1[..., None], perp], axis=-1)

    def kernel_args(self, d: int):
        """Flat arrays consumed by the compiled path loop."""
        if d != self.d:
            raise SpecError(f"test function built for d={self.d}, not {d}")
        ti, tj = self.tables()
        sp = np.concatenate([[self.L, self.s, self.dr], self.center])
        return sp, self.coef.copy(), ti, tj


# ----------------------------------------------------------------------------
# envelope constants

@dataclass(frozen=True)
class BoundFit:
    """Fitted envelope constants for the value and gradient bounds."""

    c16: float
    c17: float
    c18: float
    c19: float
    margin: float

    def value_bound(self, L, d, dist, perp):
        return self.c16 * dist ** (2 - d) * np.exp(-self.c17 * perp / L)

    def grad_bound(self, L, d, dist, perp):
        return (self.c18 * dist ** (1 - d) + self.c19 * L ** (1 - d)) * np.exp(-self.c17 * perp / L)


def _geometry(kern, x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    dist = np.sqrt(np.sum((x - y) ** 2, axis=-1))
    perp = np.sqrt(np.sum((x[..., 1:] - y[..., 1:]) ** 2, axis=-1))
    return dist, perp


def fit_green_bounds(kern: SlabKernel, x, y, c17: float = 1.0, margin: float = 1.1) -> BoundFit:
    """Smallest envelope constants valid on the calibration pairs, times ``margin``.

    ``c18`` is fitted on pairs closer than ``L`` and ``c19`` on the remaining
    excess of the gradient over the ``c18`` term.
    """
    L, d = kern.L, kern.d
    dist, perp = _geometry(kern, x, y)
    decay = np.exp(c17 * perp / L)
    g = green_function(kern, x, y)
    gr = np.linalg.norm(green_gradient(kern, x, y), axis=-1)
    c16 = float(np.max(g * dist ** (d - 2) * decay)) * margin
    near = dist < L
    scaled = gr * decay
    c18 = float(np.max(scaled[near] * dist[near] ** (d - 1))) * margin if near.any() else 0.0
    rest = np.maximum(scaled - c18 * dist ** (1 - d), 0.0)
    c19 = float(np.max(rest * L ** (d - 1))) * margin
    return BoundFit(c16, c17, c18, c19, margin)


def check_green_bounds(kern: SlabKernel, fit: BoundFit, x, y) -> dict:
    """Worst ratio of kernel to envelope on a test set (must stay <= 1)."""
    dist, perp = _geometry(kern, x, y)
    g = green_function(kern, x, y)
    gr = np.linalg.norm(green_gradient(kern, x, y), axis=-1)
    rv = g / fit.value_bound(kern.L, kern.d, dist, perp)
    rg = gr / fit.grad_bound(kern.L, kern.d, dist, perp)
    return {"value_ratio": float(np.max(rv)), "grad_ratio": float(np.max(rg)),
            "ok": bool(np.max(rv) <= 1.0 and np.max(rg) <= 1.0), "n": int(np.size(g))}


# ----------------------------------------------------------------------------
# lattice sums of the envelopes

@njit(cache=True)
def _lattice_sums(y, L, R, d, c17, cut, near, parity, out):
    """Sum over centers of one parity class of R-cubes in the slab.

    Centers with transverse distance below ``near`` are summed exactly;
    farther ones are replaced by the radial integral of the same summand
    over the transverse shell (the summand varies on the scale L there).
    """
    # first coordinate layers
    m = int(math.ceil(L / R)) + 1
    spacing = 2.0 * R
    s_g = 0.0
    s_t = 0.0
    dp = d - 1
    nper = int(math.floor(near / spacing)) + 1
    for i1 in range(-m, m + 1):
        if (i1 & 1) != parity[0]:
            continue
        c1 = R * (i1 + 0.5)
        if abs(c1) - 0.5 * R >= L:
            continue
        dz1 = c1 - y[0]
        # exact inner region: transverse indices in a box, restricted to the ball
        idx = np.zeros(dp, dtype=np.int64)
        base = np.empty(dp)
        for j in range(dp):
            # first index of the requested parity at or below -nper
            lo = int(math.floor((y[1 + j] - near) / R - 0.5)) - 1
            if (lo & 1) != parity[1 + j]:
                lo -= 1
            base[j] = lo
            idx[j] = lo
        hi_count = 2 * nper + 4
        total = 1
        for j in range(dp):
            total *= hi_count
        for flat in range(total):
            rem = flat
            perp2 = 0.0
            for j in range(dp):
                kj = base[j] + 2 * (rem % hi_count)
                rem //= hi_count
                cj = R * (kj + 0.5)
                dz = cj - y[1 + j]
                perp2 += dz * dz
            if perp2 >= near * near:
                continue
            perp = math.sqrt(perp2)
            dist = math.sqrt(perp2 + dz1 * dz1)
            e = math.exp(-c17 * perp / L)
            g1 = min(dist ** (1 - d), 1.0) + L ** (1 - d)
            gt = min(dist ** (2 - d), 1.0)
            s_g += (g1 * e / L) ** 2
            s_t += (gt * e / L) ** 2
        # far shell [near, cut] as an integral with density 1 / spacing^(d-1)
        if cut > near:
            area = 2.0 * math.pi ** (0.5 * dp) / math.gamma(0.5 * dp)
            npan = 400
            h = (cut - near) / npan
            acc_g = 0.0
            acc_t = 0.0
            for p in range(npan):
                for q in range(5):
                    # 5-point Gauss-Legendre on each panel
                    if q == 0:
                        xq, wq = -0.9061798459386640, 0.2369268850561891
                    elif q == 1:
                        xq, wq = -0.5384693101056831, 0.4786286704993665
                    elif q == 2:
                        xq, wq = 0.0, 0.5688888888888889
                    elif q == 3:
                        xq, wq = 0.5384693101056831, 0.4786286704993665
                    else:
                        xq, wq = 0.9061798459386640, 0.2369268850561891
                    rr = near + h * (p + 0.5 + 0.5 * xq)
                    dist = math.sqrt(rr * rr + dz1 * dz1)
                    e = math.exp(-c17 * rr / L)
                    g1 = min(dist ** (1 - d), 1.0) + L ** (1 - d)
                    gt = min(dist ** (2 - d), 1.0)
                    jac = area * rr ** (dp - 1) * 0.5 * h * wq
                    acc_g += jac * (g1 * e / L) ** 2
                    acc_t += jac * (gt * e / L) ** 2
            dens = spacing ** (-dp)
            s_g += acc_g * dens
            s_t += acc_t * dens
    out[0] = s_g
    out[1] = s_t


def gamma_terms(kern: SlabKernel, centers, y, c17: float = 1.0):
    """Per-center envelopes ``(gamma, gamma_tilde)`` for cube centers and a probe ``y``."""
    d, L = kern.d, kern.L
    z = np.asarray(centers, float) - np.asarray(y, float)
    dist = np.sqrt(np.sum(z ** 2, axis=-1))
    perp = np.sqrt(np.sum(z[..., 1:] ** 2, axis=-1))
    e = np.exp(-c17 * perp / L)
    with np.errstate(divide="ignore"):
        g = (np.minimum(dist ** (1.0 - d), 1.0) + L ** (1.0 - d)) * e / L
        gt = np.minimum(dist ** (2.0 - d), 1.0) * e / L
    return g, gt


@dataclass(frozen=True)
class GammaSums:
    """Per probe point and parity class: ``L^2 sum gamma^2`` and ``L^2 sum gamma_tilde^2``."""

    L: float
    d: int
    R: float
    c17: float
    sum_gamma: np.ndarray
    sum_gamma_tilde: np.ndarray

    @property
    def worst_gamma(self) -> float:
        return float(self.sum_gamma.max())

    @property
    def worst_gamma_tilde(self) -> float:
        return float(self.sum_gamma_tilde.max())


def gamma_sums(kern: SlabKernel, probe_points, lattice_R: float, *, c17: float = 1.0,
               families=None, tol: float = 1e-12, near: float | None = None) -> GammaSums:
    """Envelope sums over one parity class of the ``lattice_R``-cube lattice.

    For a cube center ``z`` and probe ``y``::

        gamma(z)       = L^-1 (min(|z - y|^(1-d), 1) + L^(1-d)) exp(-c17 |z - y|_perp / L)
        gamma_tilde(z) = L^-1  min(|z - y|^(2-d), 1)            exp(-c17 |z - y|_perp / L)

    Cubes whose exponential factor is below ``tol`` are dropped.  Results are
    multiplied by ``L^2``.  ``families`` lists parity vectors; by default
    the class of the cube containing each probe point is used, which is
    the one holding the nearest center.
    """
    d, L = kern.d, kern.L
    if d < 2:
        raise SpecError("gamma sums need d >= 2")
    R = float(lattice_R)
    if R <= 0:
        raise SpecError("lattice_R must be positive")
    pts = np.atleast_2d(np.asarray(probe_points, float))
    cut = L * math.log(1.0 / tol) / c17
    near_r = min(cut, 3.0 * L) if near is None else float(near)
    if families is None:
        fam_lists = [[tuple(int(math.floor(v / R)) & 1 for v in y)] for y in pts]
    else:
        fam_lists = [list(families)] * len(pts)
    sg = np.empty((len(pts), len(fam_lists[0])))
    st = np.empty_like(sg)
    out = np.empty(2)
    for i, y in enumerate(pts):
        for k, fam in enumerate(fam_lists[i]):
            _lattice_sums(np.ascontiguousarray(y), L, R, d, c17, cut, near_r,
                          np.asarray(fam, np.int64), out)
            sg[i, k] = out[0] * L * L
            st[i, k] = out[1] * L * L
    return GammaSums(L, d, R, c17, sg, st)
