"""Compiled inner loops: counter-based hashing, the bump field and the path simulator.

Everything here is a pure function of its arguments. Random numbers are
derived from ``splitmix64`` applied to integer counters, so a given
``(seed, stream, path, step, slot)`` always yields the same value no matter
how paths are distributed across threads.
"""
import math

import numpy as np
from numba import njit

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SHIFT = np.int64(1) << np.int64(40)
_INV53 = 1.0 / 9007199254740992.0

# layout of the float parameter vector describing an environment
EP_EPS = 0
EP_LAM = 1
EP_FLUCT = 2
EP_TSCALE = 3
EP_RPHI = 4
EP_DIFF = 5
EP_NU = 6
EP_ANISO = 7
EP_MIRROR = 8
EP_OFFSET = 9

# observable modes for the separable test function
SEP_NONE = 0
SEP_VALUE = 1
SEP_FULL = 2


@njit(cache=True, inline="always")
def mix64(x):
    z = x + _GOLD
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def unit(h):
    # uniform on [0, 1) with 53 random bits
    return float(h >> np.uint64(11)) * _INV53


@njit(cache=True, inline="always")
def counter_uniform(key, counter):
    return unit(mix64(key + np.uint64(counter) * _GOLD))


def _zig_tables(n=128, r=3.442619855899, v=9.91256303526217e-3):
    x = np.empty(n + 1)
    f = lambda t: math.exp(-0.5 * t * t)
    x[0] = v / f(r)
    x[1] = r
    for i in range(2, n):
        x[i] = math.sqrt(-2.0 * math.log(v / x[i - 1] + f(x[i - 1])))
    x[n] = 0.0
    ratio = x[1:] / x[:-1]
    return x, ratio


_ZX, _ZR = _zig_tables()
_ZIG_R = 3.442619855899
_ZSLOT = np.uint64(32)


@njit(cache=True, inline="always")
def normal(key, slot):
    """Standard normal from the counter block ``slot`` (ziggurat, 128 layers).

    Each call owns counters ``32*slot .. 32*slot + 31``; the rare case that
    exhausts them falls back to Box-Muller on the last two.
    """
    c = np.uint64(slot) * _ZSLOT
    j = np.uint64(0)
    while j < np.uint64(27):
        h = mix64(key + (c + j) * _GOLD)
        j += np.uint64(1)
        i = int(h & np.uint64(127))
        u = 2.0 * unit(h) - 1.0
        if abs(u) < _ZR[i]:
            return u * _ZX[i]
        if i == 0:
            # tail beyond r
            while j < np.uint64(29):
                a = 1.0 - unit(mix64(key + (c + j) * _GOLD))
                b = 1.0 - unit(mix64(key + (c + j + np.uint64(1)) * _GOLD))
                j += np.uint64(2)
                t = math.log(a) / _ZIG_R
                y = math.log(b)
                if -2.0 * y >= t * t:
                    return (t - _ZIG_R) if u < 0.0 else (_ZIG_R - t)
            break
        xx = u * _ZX[i]
        f0 = math.exp(-0.5 * (_ZX[i] * _ZX[i] - xx * xx))
        f1 = math.exp(-0.5 * (_ZX[i + 1] * _ZX[i + 1] - xx * xx))
        w = unit(mix64(key + (c + j) * _GOLD))
        j += np.uint64(1)
        if f1 + w * (f0 - f1) < 1.0:
            return xx
    u1 = 1.0 - unit(mix64(key + (c + np.uint64(30)) * _GOLD))
    u2 = unit(mix64(key + (c + np.uint64(31)) * _GOLD))
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True)
def stream_key(seed, stream, index):
    k = mix64(seed)
    k = mix64(k ^ stream)
    return mix64(k ^ np.uint64(index + _SHIFT))


@njit(cache=True, inline="always")
def site_key(seed, z, salt):
    h = mix64(seed ^ salt)
    for i in range(z.shape[0]):
        h = mix64(h ^ np.uint64(z[i] + _SHIFT))
    return h


@njit(cache=True, inline="always")
def psi(u, r):
    """Left weight of the bump partition on [0, 1); the right weight is 1 - psi."""
    if u <= 1.0 - r:
        return 1.0
    if u >= r:
        return 0.0
    s = (r - u) / (2.0 * r - 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


@njit(cache=True, inline="always")
def site_vector(ep, seed, z, out, row):
    d = z.shape[0]
    eps = ep[EP_EPS]
    lam = ep[EP_LAM]
    fl = ep[EP_FLUCT]
    key = site_key(seed, z, np.uint64(1))
    u0 = counter_uniform(key, 0)
    v1 = lam + fl * (eps - abs(lam)) * (2.0 * u0 - 1.0)
    out[row, 0] = v1
    if d > 1:
        rest = eps * eps - v1 * v1
        if rest < 0.0:
            rest = 0.0
        scale = ep[EP_TSCALE] * fl * math.sqrt(rest) / math.sqrt(d - 1.0)
        for j in range(1, d):
            out[row, j] = scale * (2.0 * counter_uniform(key, j) - 1.0)


@njit(cache=True)
def site_matrix(ep, seed, z, out, row):
    """Symmetric matrix with spectrum in [1 - alpha, 1 + alpha], written to ``out[row]``."""
    d = z.shape[0]
    alpha = ep[EP_ANISO] * (1.0 - 1.0 / ep[EP_NU])
    key = site_key(seed, z, np.uint64(2))
    if d == 1:
        out[row, 0, 0] = 1.0 + alpha * (2.0 * counter_uniform(key, 0) - 1.0)
        return
    c = 1
    fro = 0.0
    for i in range(d):
        for j in range(i, d):
            v = 2.0 * counter_uniform(key, c) - 1.0
            c += 1
            out[row, i, j] = v
            out[row, j, i] = v
            fro += v * v if i == j else 2.0 * v * v
    amp = alpha * counter_uniform(key, 0)
    fro = math.sqrt(fro)
    for i in range(d):
        for j in range(d):
            out[row, i, j] = amp * out[row, i, j] / fro if fro > 0.0 else 0.0
        out[row, i, i] += 1.0


@njit(cache=True)
def refill(ep, seed, cell, vcache, mcache, do_b, do_a, z):
    """Regenerate the 2^d corner sites of lattice cell ``cell``."""
    d = cell.shape[0]
    for c in range(1 << d):
        for i in range(d):
            z[i] = cell[i] + ((c >> i) & 1)
        if do_b:
            site_vector(ep, seed, z, vcache, c)
        if do_a:
            site_matrix(ep, seed, z, mcache, c)


@njit(cache=True)
def shift_refill(ep, seed, cell, vcache, mcache, do_b, do_a, z, axis, up):
    """Cell moved by one along ``axis``: keep the shared face, regenerate the other."""
    d = cell.shape[0]
    bit = 1 << axis
    for c in range(1 << d):
        if c & bit:
            continue
        dst = c if up else c | bit
        src = c | bit if up else c
        if do_b:
            for j in range(d):
                vcache[dst, j] = vcache[src, j]
        if do_a:
            for i in range(d):
                for j in range(d):
                    mcache[dst, i, j] = mcache[src, i, j]
        new = src
        for i in range(d):
            z[i] = cell[i] + ((new >> i) & 1)
        if do_b:
            site_vector(ep, seed, z, vcache, new)
        if do_a:
            site_matrix(ep, seed, z, mcache, new)


# The blend below is written out in the path kernels as well: passing many
# arrays through a call in the inner loop costs more than the arithmetic.
@njit(cache=True)
def field_core(ep, seed, x, cell, vcache, mcache, state, b, a, do_b, do_a, w0, z):
    """Blend the cached corner sites into ``b`` (if ``do_b``) and ``a`` (if ``do_a``).

    ``cell``/``vcache``/``mcache``/``state`` cache the corner sites of the
    current lattice cell; ``state[0]`` is 0 until the cache has been filled.
    """
    d = x.shape[0]
    s = ep[EP_MIRROR]
    r = ep[EP_RPHI]
    fresh = state[0] == 0
    for i in range(d):
        xi = x[i] * s if i == 0 else x[i]
        t = xi + ep[EP_OFFSET + i]
        k = math.floor(t)
        w0[i] = psi(t - k, r)
        if k != cell[i]:
            fresh = True
            cell[i] = k
    if fresh:
        refill(ep, seed, cell, vcache, mcache, do_b, do_a, z)
        state[0] = 1
    if do_b:
        for j in range(d):
            b[j] = 0.0
    if do_a:
        for i in range(d):
            for j in range(d):
                a[i, j] = 0.0
    for c in range(1 << d):
        w = 1.0
        for i in range(d):
            w *= (1.0 - w0[i]) if (c >> i) & 1 else w0[i]
        if w != 0.0:
            if do_b:
                for j in range(d):
                    b[j] += w * vcache[c, j]
            if do_a:
                for i in range(d):
                    for j in range(d):
                        a[i, j] += w * mcache[c, i, j]
    if s < 0.0:
        if do_b:
            b[0] = -b[0]
        if do_a:
            for j in range(1, d):
                a[0, j] = -a[0, j]
                a[j, 0] = -a[j, 0]


@njit(cache=True)
def field_setup(ep, d, b, a):
    """Fill the constant parts of (b, a); returns flags (field drift?, field diffusion?)."""
    eps = ep[EP_EPS]
    do_b = eps != 0.0 and ep[EP_FLUCT] != 0.0
    do_a = ep[EP_DIFF] > 0.5
    for j in range(d):
        b[j] = 0.0
    if eps != 0.0 and not do_b:
        b[0] = ep[EP_MIRROR] * ep[EP_LAM]
    for i in range(d):
        for j in range(d):
            a[i, j] = 1.0 if i == j else 0.0
    return do_b, do_a


@njit(cache=True)
def field_many(ep, seed, pts, need_a):
    n, d = pts.shape
    bout = np.empty((n, d))
    aout = np.empty((n, d, d)) if need_a else np.empty((0, d, d))
    cell = np.zeros(d, dtype=np.int64)
    vcache = np.empty((1 << d, d))
    mcache = np.empty((1 << d, d, d))
    state = np.zeros(1, dtype=np.int64)
    a = np.empty((d, d))
    x = np.empty(d)
    b = np.empty(d)
    w0 = np.empty(d)
    z = np.empty(d, dtype=np.int64)
    do_b, do_a = field_setup(ep, d, b, a)
    do_a = do_a and need_a
    for p in range(n):
        for j in range(d):
            x[j] = pts[p, j]
        if do_b or do_a:
            field_core(ep, seed, x, cell, vcache, mcache, state, b, a, do_b, do_a, w0, z)
        for j in range(d):
            bout[p, j] = b[j]
        if need_a:
            for i in range(d):
                for j in range(d):
                    aout[p, i, j] = a[i, j]
    return bout, aout


@njit(cache=True)
def site_table(ep, seed, zs):
    n, d = zs.shape
    out = np.empty((n, d))
    z = np.empty(d, dtype=np.int64)
    for p in range(n):
        for j in range(d):
            z[j] = zs[p, j]
        site_vector(ep, seed, z, out, p)
    return out


@njit(cache=True)
def sym_sqrt(a, out):
    d = a.shape[0]
    if d == 1:
        out[0, 0] = math.sqrt(a[0, 0])
        return
    w, v = np.linalg.eigh(a)
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += v[i, k] * math.sqrt(max(w[k], 0.0)) * v[j, k]
            out[i, j] = acc


@njit(cache=True, inline="always")
def _interp(table, row, r, dr):
    pos = r / dr
    i = int(pos)
    n = table.shape[1]
    if i >= n - 1:
        return 0.0
    f = pos - i
    return table[row, i] * (1.0 - f) + table[row, i + 1] * f


@njit(cache=True, inline="always")
def sep_eval(x, b, sp, coef, tab_i, tab_j, mode, out):
    """Separable test function h(x1) exp(-|x_perp - c|^2 / 2 s^2) and b . grad of its Green image.

    ``sp = [L, s, dr, c_2, ..., c_d]``; ``h`` is the sine series with
    coefficients ``coef`` on (-L, L).  Writes ``out[0] = f(x)`` and
    ``out[1] = b . grad(G f)(x)``.
    """
    d = x.shape[0]
    L = sp[0]
    s = sp[1]
    dr = sp[2]
    r2 = 0.0
    for j in range(1, d):
        dz = x[j] - sp[2 + j]
        r2 += dz * dz
    r = math.sqrt(r2)
    arg = math.pi * (x[0] + L) / (2.0 * L)
    hval = 0.0
    g_cos = 0.0
    g_j = 0.0
    for m in range(coef.shape[0]):
        n = m + 1
        sn = math.sin(n * arg)
        hval += coef[m] * sn
        if mode == SEP_FULL:
            im = _interp(tab_i, m, r, dr)
            g_cos += coef[m] * (n * math.pi / (2.0 * L)) * math.cos(n * arg) * im
            g_j += coef[m] * sn * _interp(tab_j, m, r, dr)
    out[0] = hval * math.exp(-r2 / (2.0 * s * s))
    if mode == SEP_FULL:
        acc = b[0] * g_cos
        for j in range(1, d):
            acc -= b[j] * (x[j] - sp[2 + j]) * g_j
        out[1] = acc
    else:
        out[1] = 0.0


@njit(cache=True, nogil=True)
def run_paths(ep, env_seed, x0, normals, offsets, labels, dt, max_steps, bridge,
              noise_seed, stream, path_ids, sep_mode, sp, coef, tab_i, tab_j,
              out_x, out_t, out_face, out_steps, out_int):
    """Euler-Maruyama paths until the first exit through a set of half-space faces.

    ``out_face[p]`` is the index of the exit face, or -1 on timeout.
    ``out_int[p]`` holds the left-endpoint integrals of (b_1, f, b . grad G f).
    """
    n, d = x0.shape
    nf = normals.shape[0]
    stride = d + nf
    sqdt = math.sqrt(dt)
    x = np.empty(d)
    xn = np.empty(d)
    b = np.empty(d)
    a = np.empty((d, d))
    sig = np.empty((d, d))
    xi = np.empty(d)
    cell = np.zeros(d, dtype=np.int64)
    vcache = np.empty((1 << d, d))
    mcache = np.empty((1 << d, d, d))
    w0s = np.empty(d)
    zs = np.empty(d, dtype=np.int64)
    do_b, gen = field_setup(ep, d, b, a)
    mir = ep[EP_MIRROR]
    rphi = ep[EP_RPHI]
    ncorner = 1 << d
    obs = np.zeros(2)
    for i in range(d):
        for j in range(d):
            sig[i, j] = 1.0 if i == j else 0.0
    for p in range(n):
        key = stream_key(noise_seed, stream, path_ids[p])
        for j in range(d):
            x[j] = x0[p, j]
        t = 0.0
        i_b1 = 0.0
        i_f = 0.0
        i_g = 0.0
        face = -1
        steps = 0
        # a start on or beyond the boundary exits immediately
        best = 0.0
        for k in range(nf):
            dist = offsets[k]
            for j in range(d):
                dist -= normals[k, j] * x[j]
            if dist <= 0.0:
                if face < 0:
                    face = k
                    best = dist
                elif labels[k] == 0 and labels[face] != 0:
                    face = k
                    best = dist
                elif (labels[k] == 0) == (labels[face] == 0) and dist < best:
                    face = k
                    best = dist
        if face >= 0:
            out_face[p] = face
            out_t[p] = 0.0
            out_steps[p] = 0
            for j in range(d):
                out_x[p, j] = x[j]
            out_int[p, 0] = 0.0
            out_int[p, 1] = 0.0
            out_int[p, 2] = 0.0
            continue
        for step in range(max_steps):
            if do_b or gen:
                moved = 0
                axis = -1
                up = True
                for i in range(d):
                    xv = x[i] * mir if i == 0 else x[i]
                    tt = xv + ep[EP_OFFSET + i]
                    kk = math.floor(tt)
                    w0s[i] = psi(tt - kk, rphi)
                    if kk != cell[i]:
                        moved += 1
                        axis = i
                        up = kk == cell[i] + 1
                        if not up and kk != cell[i] - 1:
                            moved += d
                        cell[i] = kk
                if step == 0 or moved > 1:
                    refill(ep, env_seed, cell, vcache, mcache, do_b, gen, zs)
                elif moved == 1:
                    shift_refill(ep, env_seed, cell, vcache, mcache, do_b, gen, zs, axis, up)
                if do_b:
                    for j in range(d):
                        b[j] = 0.0
                if gen:
                    for i in range(d):
                        for j in range(d):
                            a[i, j] = 0.0
                for c in range(ncorner):
                    w = 1.0
                    for i in range(d):
                        w *= (1.0 - w0s[i]) if (c >> i) & 1 else w0s[i]
                    if w != 0.0:
                        if do_b:
                            for j in range(d):
                                b[j] += w * vcache[c, j]
                        if gen:
                            for i in range(d):
                                for j in range(d):
                                    a[i, j] += w * mcache[c, i, j]
                if mir < 0.0:
                    if do_b:
                        b[0] = -b[0]
                    if gen:
                        for j in range(1, d):
                            a[0, j] = -a[0, j]
                            a[j, 0] = -a[j, 0]
            if gen:
                sym_sqrt(a, sig)
            if sep_mode != SEP_NONE:
                sep_eval(x, b, sp, coef, tab_i, tab_j, sep_mode, obs)
            base = np.uint64(step) * np.uint64(stride)
            for q in range(d):
                xi[q] = normal(key, base + np.uint64(q))
            if gen:
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += sig[i, j] * xi[j]
                    xn[i] = x[i] + b[i] * dt + sqdt * acc
            else:
                for i in range(d):
                    xn[i] = x[i] + b[i] * dt + sqdt * xi[i]
            hit = -1
            frac = 2.0
            for k in range(nf):
                d1 = offsets[k]
                d2 = offsets[k]
                for j in range(d):
                    d1 -= normals[k, j] * x[j]
                    d2 -= normals[k, j] * xn[j]
                sk = 2.0
                if d2 <= 0.0:
                    den = d1 - d2
                    sk = d1 / den if den > 0.0 else 0.0
                elif bridge:
                    an = 1.0
                    if gen:
                        an = 0.0
                        for i in range(d):
                            for j in range(d):
                                an += normals[k, i] * a[i, j] * normals[k, j]
                    expo = 2.0 * d1 * d2 / (an * dt)
                    if expo < 700.0:
                        u = counter_uniform(key, (base + np.uint64(d + k)) * _ZSLOT)
                        if u < math.exp(-expo):
                            sk = 0.5
                if sk <= 1.0:
                    if hit < 0:
                        hit = k
                        frac = sk
                    else:
                        tie = abs(sk - frac) <= 1e-12
                        if (tie and labels[k] == 0 and labels[hit] != 0) or (sk < frac and not tie):
                            hit = k
                            frac = sk
            if hit >= 0:
                tau = frac * dt
                i_b1 += b[0] * tau
                if sep_mode != SEP_NONE:
                    i_f += obs[0] * tau
                    i_g += obs[1] * tau
                t += tau
                proj = offsets[hit]
                for j in range(d):
                    xn[j] = x[j] + frac * (xn[j] - x[j])
                    proj -= normals[hit, j] * xn[j]
                for j in range(d):
                    x[j] = xn[j] + proj * normals[hit, j]
                face = hit
                steps = step + 1
                break
            i_b1 += b[0] * dt
            if sep_mode != SEP_NONE:
                i_f += obs[0] * dt
                i_g += obs[1] * dt
            t += dt
            for j in range(d):
                x[j] = xn[j]
            steps = step + 1
        out_face[p] = face
        out_t[p] = t
        out_steps[p] = steps
        for j in range(d):
            out_x[p, j] = x[j]
        out_int[p, 0] = i_b1
        out_int[p, 1] = i_f
        out_int[p, 2] = i_g


@njit(cache=True, nogil=True)
def free_paths(ep, env_seed, x0, dt, nsteps, noise_seed, stream, path_ids, out_x):
    """Paths run for a fixed number of steps with no killing (long-horizon runs)."""
    n, d = x0.shape
    stride = d
    sqdt = math.sqrt(dt)
    x = np.empty(d)
    b = np.empty(d)
    a = np.empty((d, d))
    sig = np.empty((d, d))
    xi = np.empty(d)
    cell = np.zeros(d, dtype=np.int64)
    vcache = np.empty((1 << d, d))
    mcache = np.empty((1 << d, d, d))
    w0s = np.empty(d)
    zs = np.empty(d, dtype=np.int64)
    do_b, gen = field_setup(ep, d, b, a)
    mir = ep[EP_MIRROR]
    rphi = ep[EP_RPHI]
    ncorner = 1 << d
    for p in range(n):
        key = stream_key(noise_seed, stream, path_ids[p])
        for j in range(d):
            x[j] = x0[p, j]
        for step in range(nsteps):
            if do_b or gen:
                moved = 0
                axis = -1
                up = True
                for i in range(d):
                    xv = x[i] * mir if i == 0 else x[i]
                    tt = xv + ep[EP_OFFSET + i]
                    kk = math.floor(tt)
                    w0s[i] = psi(tt - kk, rphi)
                    if kk != cell[i]:
                        moved += 1
                        axis = i
                        up = kk == cell[i] + 1
                        if not up and kk != cell[i] - 1:
                            moved += d
                        cell[i] = kk
                if step == 0 or moved > 1:
                    refill(ep, env_seed, cell, vcache, mcache, do_b, gen, zs)
                elif moved == 1:
                    shift_refill(ep, env_seed, cell, vcache, mcache, do_b, gen, zs, axis, up)
                if do_b:
                    for j in range(d):
                        b[j] = 0.0
                if gen:
                    for i in range(d):
                        for j in range(d):
                            a[i, j] = 0.0
                for c in range(ncorner):
                    w = 1.0
                    for i in range(d):
                        w *= (1.0 - w0s[i]) if (c >> i) & 1 else w0s[i]
                    if w != 0.0:
                        if do_b:
                            for j in range(d):
                                b[j] += w * vcache[c, j]
                        if gen:
                            for i in range(d):
                                for j in range(d):
                                    a[i, j] += w * mcache[c, i, j]
                if mir < 0.0:
                    if do_b:
                        b[0] = -b[0]
                    if gen:
                        for j in range(1, d):
                            a[0, j] = -a[0, j]
                            a[j, 0] = -a[j, 0]
            base = np.uint64(step) * np.uint64(stride)
            for q in range(d):
                xi[q] = normal(key, base + np.uint64(q))
            if gen:
                sym_sqrt(a, sig)
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += sig[i, j] * xi[j]
                    x[i] = x[i] + b[i] * dt + sqdt * acc
            else:
                for i in range(d):
                    x[i] = x[i] + b[i] * dt + sqdt * xi[i]
        for j in range(d):
            out_x[p, j] = x[j]


@njit(cache=True)
def normals_block(seed, stream, index, count):
    """``count`` standard normals from one counter stream (for the python-level step)."""
    key = stream_key(seed, stream, index)
    out = np.empty(count)
    for q in range(count):
        out[q] = normal(key, q)
    return out


@njit(cache=True)
def uniforms_block(seed, stream, index, count):
    key = stream_key(seed, stream, index)
    out = np.empty(count)
    for i in range(count):
        out[i] = counter_uniform(key, i)
    return out
