"""Quenched path simulation with exit detection.

Paths follow the Euler-Maruyama scheme ``x' = x + b(x) dt + sigma(x) sqrt(dt) xi``.
Exits through planar faces are detected both at grid times and, between
grid times, by sampling the Brownian-bridge crossing probability
``exp(-2 d1 d2 / (a_n dt))``.

All domains are intersections of half-spaces ``n_k . x < c_k``; each face
carries a label ``+1`` (positive face), ``-1`` (back face) or ``0``
(lateral).
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .env import Environment, SpecError

__all__ = [
    "Domain",
    "ExitRecord",
    "MCEstimate",
    "PathBatch",
    "Observable",
    "EstimatorRefusal",
    "step",
    "simulate",
    "run_until_exit",
    "mean_exit_time",
    "run_to_neighbor_slab",
    "estimate_exit_stats",
    "smoothed_rho",
    "default_dt",
    "TIMEOUT_LIMIT",
]

TIMEOUT_LIMIT = 1e-3
FACE_NAMES = {1: "+", -1: "-", 0: "lateral"}


class EstimatorRefusal(RuntimeError):
    """Raised when simulated data cannot support the requested estimate."""


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_samples(cls, x, **extra) -> "MCEstimate":
        x = np.asarray(x, dtype=float)
        n = x.size
        if n < 1:
            raise EstimatorRefusal("no samples to aggregate")
        sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
        return cls(float(np.mean(x)), sd / math.sqrt(n), int(n), dict(extra))

    def ci(self, z: float = 3.0):
        return self.mean - z * self.stderr, self.mean + z * self.stderr

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, **self.extra}


class Domain:
    """Open polyhedral domain given by half-space faces.

    Use the constructors :meth:`box`, :meth:`slab`, :meth:`tube`,
    :meth:`interval`, :meth:`thresholds` and :meth:`traversal_tube`.
    """

    def __init__(self, variant, normals, offsets, labels, params, widths):
        self.variant = variant
        self.normals = np.ascontiguousarray(normals, dtype=float)
        self.offsets = np.ascontiguousarray(offsets, dtype=float)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.params = dict(params)
        self.widths = widths

    def __repr__(self):
        return f"Domain.{self.variant}({self.params})"

    @property
    def d(self) -> int:
        return self.normals.shape[1]

    @property
    def scale(self) -> float:
        """Smallest finite width; sets default time step and time cap."""
        return float(min(self.widths))

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.all(x @ self.normals.T < self.offsets, axis=1)

    def distance(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        return np.min(self.offsets - x @ self.normals.T, axis=1)

    def shifted(self, center) -> "Domain":
        c = np.asarray(center, float)
        params = dict(self.params, center=c.tolist())
        return Domain(self.variant, self.normals, self.offsets + self.normals @ c,
                      self.labels, params, self.widths)

    @classmethod
    def box(cls, d, depth_neg, depth_pos, halfwidth, rotation=None):
        """``R((-depth_neg, depth_pos) x (-halfwidth, halfwidth)^(d-1))``.

        Columns of ``rotation`` are the images of the unit vectors; the first
        column is the direction ``l`` of the positive face.
        """
        rot = np.eye(d) if rotation is None else np.asarray(rotation, float)
        if not np.allclose(rot.T @ rot, np.eye(d), atol=1e-12):
            raise SpecError("rotation must be orthogonal")
        if depth_neg < 0 or depth_pos <= 0 or halfwidth <= 0:
            raise SpecError("box depths and half-width must be positive")
        normals = [rot[:, 0], -rot[:, 0]]
        offsets = [depth_pos, depth_neg]
        labels = [1, -1]
        for j in range(1, d):
            normals += [rot[:, j], -rot[:, j]]
            offsets += [halfwidth, halfwidth]
            labels += [0, 0]
        widths = [depth_neg + depth_pos] + ([2 * halfwidth] if d > 1 else [])
        return cls("box", normals, offsets, labels,
                   dict(depth_neg=depth_neg, depth_pos=depth_pos, halfwidth=halfwidth,
                        rotation=rot.tolist()), widths)

    @classmethod
    def criterion_box(cls, d, L, Ltilde, R, rotation=None):
        """Box with ``x . l`` in ``(-L + R + 2, L + 2)`` and transverse half-width ``Ltilde``."""
        if L - R - 2 < 0:
            raise SpecError("criterion box needs L >= R + 2")
        return cls.box(d, L - R - 2, L + 2, Ltilde, rotation)

    @classmethod
    def slab(cls, d, L):
        """``{|x . e1| < L}``."""
        e = np.zeros(d)
        e[0] = 1.0
        return cls("slab", [e, -e], [L, L], [1, -1], dict(L=L), [2 * L])

    @classmethod
    def interval(cls, L):
        return cls("interval", [[1.0], [-1.0]], [L, L], [1, -1], dict(L=L), [2 * L])

    @classmethod
    def tube(cls, d, L, h, center=None):
        """Box of half-length ``L`` along ``e1`` and transverse half-width ``h``."""
        dom = cls.box(d, L, L, h)
        dom.variant = "tube"
        dom.params = dict(L=L, h=h)
        return dom if center is None else dom.shifted(center)

    @classmethod
    def traversal_tube(cls, d, L, rotation=None):
        """``{-1/4 < x . l < L, |x . e_j| < L/4}`` used for the ellipticity constant."""
        dom = cls.box(d, 0.25, L, L / 4.0, rotation)
        dom.variant = "traversal_tube"
        dom.params = dict(L=L)
        return dom

    @classmethod
    def thresholds(cls, d, u_lo, u_hi, direction=None):
        """``{u_lo < x . l < u_hi}``: the first hitting of either level."""
        if not u_lo < u_hi:
            raise SpecError("thresholds need u_lo < u_hi")
        if direction is None:
            direction = np.eye(d)[0]
        ell = np.asarray(direction, float)
        ell = ell / np.linalg.norm(ell)
        return cls("thresholds", [ell, -ell], [u_hi, -u_lo], [1, -1],
                   dict(u_lo=u_lo, u_hi=u_hi, direction=ell.tolist()), [u_hi - u_lo])


@dataclass
class Observable:
    """Path functionals accumulated along with the exit.

    ``sep`` is a separable test function from :mod:`rediff.greenslab`
    (anything with a ``kernel_args(d)`` method); ``gradient`` also integrates
    ``b . grad(G f)``.
    """

    sep: object = None
    gradient: bool = False

    def kernel_args(self, d):
        if self.sep is None:
            z = np.zeros((1, 2))
            return K.SEP_NONE, np.zeros(2 + d), np.zeros(1), z, z
        mode = K.SEP_FULL if self.gradient else K.SEP_VALUE
        return (mode,) + tuple(self.sep.kernel_args(d))


@dataclass(frozen=True)
class ExitRecord:
    exit_point: np.ndarray
    exit_time: float
    face: str
    steps: int
    dt: float


@dataclass
class PathBatch:
    """Outcome of a batch of independent paths (arrays indexed by path)."""

    domain: Domain
    dt: float
    exit_point: np.ndarray
    exit_time: np.ndarray
    face_index: np.ndarray
    steps: np.ndarray
    integrals: np.ndarray
    seed: int
    stream: int
    max_time: float

    @property
    def n(self) -> int:
        return self.exit_time.size

    @property
    def timeout(self) -> np.ndarray:
        return self.face_index < 0

    @property
    def label(self) -> np.ndarray:
        lab = np.zeros(self.n, dtype=np.int64)
        ok = ~self.timeout
        lab[ok] = self.domain.labels[self.face_index[ok]]
        return lab

    @property
    def timeout_fraction(self) -> float:
        return float(np.mean(self.timeout))

    def counts(self) -> dict:
        lab = self.label
        to = self.timeout
        return {"+": int(np.sum((lab == 1) & ~to)), "-": int(np.sum((lab == -1) & ~to)),
                "lateral": int(np.sum((lab == 0) & ~to)), "timeout": int(np.sum(to))}

    def check_timeouts(self, limit: float = TIMEOUT_LIMIT) -> None:
        if self.timeout_fraction > limit:
            raise EstimatorRefusal(
                f"timeout fraction {self.timeout_fraction:.2e} exceeds {limit:.0e}; "
                f"raise max_time (currently {self.max_time})")

    def record(self, i: int) -> ExitRecord:
        face = "timeout" if self.face_index[i] < 0 else FACE_NAMES[int(self.label[i])]
        return ExitRecord(self.exit_point[i].copy(), float(self.exit_time[i]), face,
                          int(self.steps[i]), self.dt)

    def records(self):
        return [self.record(i) for i in range(self.n)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.exit_point.shape[1]
        w.writerow(["path"] + [f"x{j + 1}" for j in range(d)] + ["exit_time", "face", "steps", "dt"])
        for i in range(self.n):
            r = self.record(i)
            w.writerow([i] + [repr(float(v)) for v in r.exit_point] + [repr(r.exit_time), r.face, r.steps, repr(r.dt)])
        return buf.getvalue()

    def summary(self) -> dict:
        t = MCEstimate.from_samples(self.exit_time[~self.timeout]) if np.any(~self.timeout) else None
        return {
            "schema": 1,
            "domain": self.domain.variant,
            "domain_params": self.domain.params,
            "n": self.n,
            "dt": self.dt,
            "max_time": self.max_time,
            "seed": self.seed,
            "stream": self.stream,
            "counts": self.counts(),
            "timeout_fraction": self.timeout_fraction,
            "exit_time": t.as_dict() if t else None,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def default_dt(dom: Domain, nu: float = 1.0) -> float:
    L = dom.scale / 2.0
    return 1e-3 * min(1.0, L * L) / nu


def default_max_time(dom: Domain, nu: float = 1.0) -> float:
    return 100.0 * nu * dom.scale ** 2


def simulate(env: Environment, x0, dom: Domain, n: int, dt: float | None = None, *,
             seed: int = 0, stream: int = 0, max_time: float | None = None,
             bridge: bool = True, observable: Observable | None = None,
             workers: int = 1, path_offset: int = 0) -> PathBatch:
    """Run ``n`` independent paths from ``x0`` until they leave ``dom``.

    ``x0`` is a single point or an ``(n, d)`` array of starting points. Path
    ``i`` uses noise counter stream ``(seed, stream, path_offset + i)``, so
    results do not depend on ``workers``.
    """
    d = env.d
    if dom.d != d:
        raise SpecError(f"domain dimension {dom.d} does not match environment dimension {d}")
    if n < 1:
        raise SpecError("n must be positive")
    nu = env.spec.nu if env.spec.diffusion_mode == "generated" else 1.0
    dt = default_dt(dom, nu) if dt is None else float(dt)
    if not dt > 0:
        raise SpecError("dt must be positive")
    max_time = default_max_time(dom, nu) if max_time is None else float(max_time)
    max_steps = int(math.ceil(max_time / dt))
    x0 = np.asarray(x0, float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (n, d))
    x0 = np.ascontiguousarray(x0, dtype=float)
    if x0.shape != (n, d):
        raise SpecError("x0 must be a point or an (n, d) array")
    obs = observable or Observable()
    mode, sp, coef, ti, tj = obs.kernel_args(d)
    out_x = np.empty((n, d))
    out_t = np.empty(n)
    out_face = np.empty(n, dtype=np.int64)
    out_steps = np.empty(n, dtype=np.int64)
    out_int = np.empty((n, 3))
    ids = np.arange(path_offset, path_offset + n, dtype=np.int64)
    useed = np.uint64(seed & ((1 << 64) - 1))
    ustream = np.uint64(stream & ((1 << 64) - 1))

    def work(lo, hi):
        K.run_paths(env.params, env.useed, x0[lo:hi], dom.normals, dom.offsets, dom.labels,
                    dt, max_steps, bridge, useed, ustream, ids[lo:hi], mode, sp, coef, ti, tj,
                    out_x[lo:hi], out_t[lo:hi], out_face[lo:hi], out_steps[lo:hi], out_int[lo:hi])

    _dispatch(work, n, workers)
    return PathBatch(dom, dt, out_x, out_t, out_face, out_steps, out_int, int(seed), int(stream), max_time)


def _dispatch(work, n, workers):
    workers = max(1, int(workers))
    if workers == 1 or n < 2:
        work(0, n)
        return
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(work, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        for f in futs:
            f.result()


def free_positions(env: Environment, x0, n: int, horizon: float, dt: float, *,
                   seed: int = 0, stream: int = 0, path_offset: int = 0, workers: int = 1):
    """Positions at time ``horizon`` of ``n`` unkilled paths."""
    d = env.d
    x0 = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, float), (n, d)))
    out = np.empty((n, d))
    nsteps = int(round(horizon / dt))
    ids = np.arange(path_offset, path_offset + n, dtype=np.int64)

    def work(lo, hi):
        K.free_paths(env.params, env.useed, x0[lo:hi], dt, nsteps, np.uint64(seed),
                     np.uint64(stream), ids[lo:hi], out[lo:hi])

    _dispatch(work, n, workers)
    return out


def step(env: Environment, x, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step from ``x`` with the given standard normal ``noise``."""
    if not dt > 0:
        raise SpecError("dt must be positive")
    x = np.asarray(x, float)
    noise = np.asarray(noise, float)
    b = env.drift(x)
    if env.spec.diffusion_mode == "identity":
        return x + b * dt + math.sqrt(dt) * noise
    a = env.diffusion(x)
    w, v = np.linalg.eigh(a)
    sig = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
    return x + b * dt + math.sqrt(dt) * sig @ noise


def run_until_exit(env: Environment, x0, dom: Domain, dt: float | None = None, *,
                   seed: int = 0, stream: int = 0, path: int = 0,
                   max_time: float | None = None, bridge: bool = True) -> ExitRecord:
    """Single path; ``path`` selects the counter stream."""
    batch = simulate(env, x0, dom, 1, dt, seed=seed, stream=stream, max_time=max_time,
                     bridge=bridge, path_offset=path)
    return batch.record(0)


def mean_exit_time(env: Environment, x0, dom: Domain, n: int, dt: float | None = None, *,
                   seed: int = 0, stream: int = 0, workers: int = 1,
                   max_time: float | None = None, bridge: bool = True) -> MCEstimate:
    """Monte Carlo mean exit time.

    For slabs with ``eps * L <= 1/4`` the estimate carries the bracket
    ``[2/3, 2] * (L^2 - x1^2)`` and whether the 3-sigma interval meets it.
    """
    if n < 1000:
        raise SpecError("mean_exit_time needs n >= 1000")
    batch = simulate(env, x0, dom, n, dt, seed=seed, stream=stream, workers=workers,
                     max_time=max_time, bridge=bridge)
    batch.check_timeouts()
    est = MCEstimate.from_samples(batch.exit_time[~batch.timeout],
                                  dt=batch.dt, timeout_fraction=batch.timeout_fraction)
    if dom.variant == "slab":
        L = dom.params["L"]
        x1 = float(np.asarray(x0, float).reshape(-1, env.d)[0, 0])
        base = L * L - x1 * x1
        if env.spec.eps * L <= 0.25:
            lo, hi = est.ci()
            est.extra["bracket"] = [2.0 * base / 3.0, 2.0 * base]
            est.extra["bracket_ok"] = bool(hi >= 2.0 * base / 3.0 and lo <= 2.0 * base)
    return est


def slab_index(u, L0):
    """Index ``i`` with ``u - i L0`` in ``[-L0/2, L0/2)``."""
    return int(math.floor(u / L0 + 0.5))


def run_to_neighbor_slab(env: Environment, x0, L0: float, n: int = 1, dt: float | None = None, *,
                         seed: int = 0, stream: int = 0, index: int | None = None,
                         direction=None, workers: int = 1, max_time: float | None = None):
    """Embedded slab-to-slab step.

    Slabs of width ``R`` sit at ``i * L0`` along ``direction``. Returns
    ``(side, batch)`` with ``side[p] = +1`` when the next slab up is hit
    first, ``-1`` for the slab below and ``0`` on timeout.
    """
    R = env.spec.R
    if not L0 > R:
        raise SpecError("L0 must exceed R")
    d = env.d
    ell = np.eye(d)[0] if direction is None else np.asarray(direction, float)
    x0 = np.asarray(x0, float).reshape(d)
    u = float(x0 @ ell)
    i = slab_index(u, L0) if index is None else int(index)
    lo = (i - 1) * L0 + R / 2
    hi = (i + 1) * L0 - R / 2
    dom = Domain.thresholds(d, lo, hi, ell)
    batch = simulate(env, x0, dom, n, dt, seed=seed, stream=stream, workers=workers, max_time=max_time)
    side = np.where(batch.timeout, 0, batch.label)
    return side, batch


def smoothed_rho(k_p, k_q, kappa: float = 0.5, L: float | None = None, add: float = 0.5):
    """``(k_q + add) / (k_p + add)``, capped at ``kappa**-(L + 3)`` when ``L`` is given."""
    rho = (np.asarray(k_q, float) + add) / (np.asarray(k_p, float) + add)
    if L is not None:
        rho = np.minimum(rho, kappa ** (-(L + 3.0)))
    return rho


def estimate_exit_stats(env: Environment, x0, box: Domain, n: int, dt: float | None = None, *,
                        seed: int = 0, stream: int = 0, workers: int = 1, kappa: float = 0.5,
                        L: float | None = None, max_time: float | None = None) -> dict:
    """Frequencies of leaving ``box`` through its positive face, and the odds ``rho``.

    ``L`` sets the cap ``kappa**-(L + 3)`` on ``rho``; by default it is read
    off the box depth (``depth_pos - 2``).
    """
    if n < 1000:
        raise SpecError("estimate_exit_stats needs n >= 1000")
    batch = simulate(env, x0, box, n, dt, seed=seed, stream=stream, workers=workers, max_time=max_time)
    return exit_stats_from_batch(batch, kappa=kappa, L=L)


def exit_stats_from_batch(batch: PathBatch, kappa: float = 0.5, L: float | None = None,
                          check: bool = True) -> dict:
    if check:
        batch.check_timeouts()
    c = batch.counts()
    k_p = c["+"]
    k_q = c["-"] + c["lateral"]
    done = k_p + k_q
    if done == 0:
        raise EstimatorRefusal("no completed paths")
    if L is None and "depth_pos" in batch.domain.params:
        L = batch.domain.params["depth_pos"] - 2.0
    p = k_p / done
    q = k_q / done
    se = math.sqrt(p * q / done)
    rho = float(smoothed_rho(k_p, k_q, kappa, L))
    ps = (k_p + 0.5) / (done + 1.0)
    rho_se = rho * math.sqrt(1.0 / (done * ps * (1.0 - ps)))
    return {
        "p": MCEstimate(p, se, done),
        "q": MCEstimate(q, se, done),
        "rho": MCEstimate(rho, rho_se, done),
        "rho_add1": float(smoothed_rho(k_p, k_q, kappa, L, add=1.0)),
        "counts": c,
        "zero_count": k_p == 0 or k_q == 0,
        "timeout_fraction": batch.timeout_fraction,
    }
