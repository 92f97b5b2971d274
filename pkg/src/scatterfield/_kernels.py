"""Compiled Monte Carlo kernels shared by the reference solver and renderers.

Random numbers come from a counter-based splitmix64 stream keyed by
``(seed, item, sample)``, so results never depend on thread scheduling.
Distances are sampled against the piecewise-constant density seen by the
midpoint ray marcher, which keeps every estimator consistent with
``volume_grid.optical_depth``.
"""

import math

import numba
import numpy as np
from numba import njit, prange

# the system TBB is often too old for numba; prefer OpenMP, then the builtin pool
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_C1 = np.uint64(0xD1B54A32D192ED03)
_C2 = np.uint64(0xABC98388FB8FAC03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
FOUR_PI = 4.0 * math.pi
INV_4PI = 1.0 / FOUR_PI
# share of uniform directions in the Neumann walks' direction mixture
MIX_UNIFORM = 0.1


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def rng_init(seed, item, sample):
    k = _mix(np.uint64(seed) * _GOLDEN + np.uint64(1))
    k = _mix(k ^ (np.uint64(item) * _C1))
    return _mix(k ^ (np.uint64(sample) * _C2 + _GOLDEN))


@njit(cache=True, inline="always")
def rng_next(state):
    state = state + _GOLDEN
    return state, (_mix(state) >> _S11) * _INV53


@njit(cache=True)
def trilinear(dens, ox, oy, oz, vs, x, y, z):
    nx, ny, nz = dens.shape
    ux = (x - ox) / vs
    uy = (y - oy) / vs
    uz = (z - oz) / vs
    if ux < 0.0 or uy < 0.0 or uz < 0.0 or ux > nx or uy > ny or uz > nz:
        return 0.0
    cx = ux - 0.5
    cy = uy - 0.5
    cz = uz - 0.5
    fx = math.floor(cx)
    fy = math.floor(cy)
    fz = math.floor(cz)
    tx = cx - fx
    ty = cy - fy
    tz = cz - fz
    x0 = int(fx)
    y0 = int(fy)
    z0 = int(fz)
    x1 = min(x0 + 1, nx - 1)
    y1 = min(y0 + 1, ny - 1)
    z1 = min(z0 + 1, nz - 1)
    x0 = min(max(x0, 0), nx - 1)
    y0 = min(max(y0, 0), ny - 1)
    z0 = min(max(z0, 0), nz - 1)
    x1 = max(x1, 0)
    y1 = max(y1, 0)
    z1 = max(z1, 0)
    c00 = dens[x0, y0, z0] * (1 - tx) + dens[x1, y0, z0] * tx
    c10 = dens[x0, y1, z0] * (1 - tx) + dens[x1, y1, z0] * tx
    c01 = dens[x0, y0, z1] * (1 - tx) + dens[x1, y0, z1] * tx
    c11 = dens[x0, y1, z1] * (1 - tx) + dens[x1, y1, z1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


@njit(cache=True)
def ray_box(px, py, pz, dx, dy, dz, bmin, bmax):
    t0 = -np.inf
    t1 = np.inf
    o = (px, py, pz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] != 0.0:
            inv = 1.0 / d[a]
            ta = (bmin[a] - o[a]) * inv
            tb = (bmax[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif o[a] < bmin[a] or o[a] > bmax[a]:
            return 1.0, -1.0
    return t0, t1


@njit(cache=True)
def segment_depth(dens, origin, vs, px, py, pz, dx, dy, dz, ta, tb, step):
    """Midpoint-rule integral of density over ``p + t d`` for ``t`` in [ta, tb]."""
    length = tb - ta
    if length <= 0.0:
        return 0.0
    n = max(1, int(math.ceil(length / step - 1e-9)))
    h = length / n
    acc = 0.0
    for k in range(n):
        t = ta + (k + 0.5) * h
        acc += trilinear(dens, origin[0], origin[1], origin[2], vs,
                         px + t * dx, py + t * dy, pz + t * dz)
    return acc * h


@njit(cache=True)
def depth_to_boundary(dens, origin, vs, bmin, bmax, px, py, pz, dx, dy, dz, step):
    """Density integral from p along d until the bounding box is left."""
    t0, t1 = ray_box(px, py, pz, dx, dy, dz, bmin, bmax)
    ta = max(t0, 0.0)
    if t1 <= ta:
        return 0.0
    return segment_depth(dens, origin, vs, px, py, pz, dx, dy, dz, ta, t1, step)


@njit(cache=True)
def free_flight(dens, origin, vs, bmin, bmax, px, py, pz, dx, dy, dz, step, target):
    """Walk along ``p + t d`` until the density integral reaches ``target``.

    Returns ``(hit, t, depth)`` where ``depth`` is the density integral up to
    ``t`` (equal to ``target`` on a hit, the full boundary depth otherwise).
    """
    t0, t1 = ray_box(px, py, pz, dx, dy, dz, bmin, bmax)
    ta = max(t0, 0.0)
    if t1 <= ta:
        return False, 0.0, 0.0
    length = t1 - ta
    n = max(1, int(math.ceil(length / step - 1e-9)))
    h = length / n
    cum = 0.0
    for k in range(n):
        t = ta + (k + 0.5) * h
        rho = trilinear(dens, origin[0], origin[1], origin[2], vs,
                        px + t * dx, py + t * dy, pz + t * dz)
        seg = rho * h
        if rho > 0.0 and cum + seg >= target:
            return True, ta + k * h + (target - cum) / rho, target
        cum += seg
    return False, t1, cum


@njit(cache=True)
def hg_eval(c, g):
    d = 1.0 + g * g - 2.0 * g * c
    return INV_4PI * (1.0 - g * g) / (d * math.sqrt(d))


@njit(cache=True)
def phase_eval(lobe_w, lobe_g, c):
    out = 0.0
    for i in range(lobe_w.shape[0]):
        out += lobe_w[i] * hg_eval(c, lobe_g[i])
    return out


@njit(cache=True)
def frame(ax, ay, az):
    if abs(ax) < 0.9:
        rx, ry, rz = 1.0, 0.0, 0.0
    else:
        rx, ry, rz = 0.0, 1.0, 0.0
    # e1 = normalize(cross(a, r)), e2 = cross(a, e1)
    e1x = ay * rz - az * ry
    e1y = az * rx - ax * rz
    e1z = ax * ry - ay * rx
    n = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x /= n
    e1y /= n
    e1z /= n
    e2x = ay * e1z - az * e1y
    e2y = az * e1x - ax * e1z
    e2z = ax * e1y - ay * e1x
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(cache=True)
def around(ax, ay, az, cos_t, phi):
    e1x, e1y, e1z, e2x, e2y, e2z = frame(ax, ay, az)
    s = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi) * s
    sp = math.sin(phi) * s
    return (cos_t * ax + cp * e1x + sp * e2x,
            cos_t * ay + cp * e1y + sp * e2y,
            cos_t * az + cp * e1z + sp * e2z)


@njit(cache=True)
def sample_phase(lobe_w, lobe_g, ax, ay, az, state):
    """Sample a travel direction whose cosine with ``a`` follows the phase mixture."""
    state, u = rng_next(state)
    k = lobe_w.shape[0] - 1
    acc = 0.0
    for i in range(lobe_w.shape[0]):
        acc += lobe_w[i]
        if u < acc:
            k = i
            break
    g = lobe_g[k]
    state, u1 = rng_next(state)
    state, u2 = rng_next(state)
    if abs(g) < 1e-3:
        c = 1.0 - 2.0 * u1
    else:
        sq = (1.0 - g * g) / (1.0 - g + 2.0 * g * u1)
        c = (1.0 + g * g - sq * sq) / (2.0 * g)
    c = min(1.0, max(-1.0, c))
    dx, dy, dz = around(ax, ay, az, c, 2.0 * math.pi * u2)
    return state, dx, dy, dz


@njit(cache=True)
def sample_sphere(state):
    state, u1 = rng_next(state)
    state, u2 = rng_next(state)
    z = 1.0 - 2.0 * u1
    r = math.sqrt(max(0.0, 1.0 - z * z))
    phi = 2.0 * math.pi * u2
    return state, r * math.cos(phi), r * math.sin(phi), z


@njit(cache=True)
def direct_light(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, light, intensity,
                 px, py, pz, vx, vy, vz, step, out, scale):
    """Add ``scale * f(cos(-l, v)) * T(p -> light) * I`` to ``out``."""
    c = -(light[0] * vx + light[1] * vy + light[2] * vz)
    f = phase_eval(lobe_w, lobe_g, min(1.0, max(-1.0, c)))
    tau = depth_to_boundary(dens, origin, vs, bmin, bmax, px, py, pz,
                            -light[0], -light[1], -light[2], step)
    for ch in range(3):
        out[ch] += scale[ch] * f * math.exp(-sigma[ch] * tau) * intensity[ch]


@njit(cache=True)
def trace_one(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
              px, py, pz, vx, vy, vz, step, max_depth, rr_depth, state, out):
    """One random-walk sample of the in-scatter F(p, v); adds into ``out``.

    ``v`` is the view direction at p (light leaves p travelling ``-v``).
    """
    sig_ref = min(sigma[0], min(sigma[1], sigma[2]))
    beta = np.ones(3)
    survive = min(0.99, max(0.05, max(albedo[0], max(albedo[1], albedo[2]))))
    for depth in range(max_depth + 1):
        direct_light(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, light, intensity,
                     px, py, pz, vx, vy, vz, step, out, beta)
        if depth == max_depth:
            break
        # incoming travel direction d about the outgoing travel direction -v
        state, dx, dy, dz = sample_phase(lobe_w, lobe_g, -vx, -vy, -vz, state)
        state, u = rng_next(state)
        target = -math.log(1.0 - u) / sig_ref
        hit, t, tau = free_flight(dens, origin, vs, bmin, bmax, px, py, pz, -dx, -dy, -dz, step, target)
        if not hit:
            break
        px -= t * dx
        py -= t * dy
        pz -= t * dz
        vx, vy, vz = -dx, -dy, -dz
        for ch in range(3):
            beta[ch] *= albedo[ch] * (sigma[ch] / sig_ref) * math.exp(-(sigma[ch] - sig_ref) * tau)
        if depth + 1 >= rr_depth:
            state, u = rng_next(state)
            if u >= survive:
                break
            for ch in range(3):
                beta[ch] /= survive
    return state


@njit(cache=True, parallel=True)
def path_trace_batch(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
                     points, views, step, spp, max_depth, rr_depth, seed, item_offset, mean, var):
    n = points.shape[0]
    for i in prange(n):
        s1 = np.zeros(3)
        s2 = np.zeros(3)
        acc = np.zeros(3)
        for s in range(spp):
            state = rng_init(seed, item_offset + i, s)
            acc[:] = 0.0
            trace_one(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
                      points[i, 0], points[i, 1], points[i, 2], views[i, 0], views[i, 1], views[i, 2],
                      step, max_depth, rr_depth, state, acc)
            for ch in range(3):
                s1[ch] += acc[ch]
                s2[ch] += acc[ch] * acc[ch]
        for ch in range(3):
            m = s1[ch] / spp
            mean[i, ch] = m
            var[i, ch] = max(0.0, s2[ch] / spp - m * m) * spp / max(1, spp - 1)


@njit(cache=True, parallel=True)
def single_scatter_batch(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, light, intensity,
                         points, views, step, out):
    one = np.ones(3)
    for i in prange(points.shape[0]):
        acc = np.zeros(3)
        direct_light(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, light, intensity,
                     points[i, 0], points[i, 1], points[i, 2], views[i, 0], views[i, 1], views[i, 2],
                     step, acc, one)
        out[i, 0] = acc[0]
        out[i, 1] = acc[1]
        out[i, 2] = acc[2]


@njit(cache=True, parallel=True)
def scatter_sources(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, p, view, step,
                    samples, seed, out_points, out_views, out_weight):
    """Samples for one application of the transport operator at ``p``.

    Direction: uniform sphere.  Distance: free flight at the smallest
    channel extinction.  ``out_weight`` is zero for escaped samples.
    """
    sig_ref = min(sigma[0], min(sigma[1], sigma[2]))
    for s in prange(samples):
        state = rng_init(seed, 0, s)
        state, dx, dy, dz = sample_sphere(state)
        state, u = rng_next(state)
        target = -math.log(1.0 - u) / sig_ref
        hit, t, tau = free_flight(dens, origin, vs, bmin, bmax, p[0], p[1], p[2], -dx, -dy, -dz, step, target)
        out_points[s, 0] = p[0] - t * dx
        out_points[s, 1] = p[1] - t * dy
        out_points[s, 2] = p[2] - t * dz
        out_views[s, 0] = -dx
        out_views[s, 1] = -dy
        out_views[s, 2] = -dz
        if not hit:
            for ch in range(3):
                out_weight[s, ch] = 0.0
            continue
        c = -(dx * view[0] + dy * view[1] + dz * view[2])
        f = phase_eval(lobe_w, lobe_g, min(1.0, max(-1.0, c)))
        for ch in range(3):
            out_weight[s, ch] = FOUR_PI * f * (sigma[ch] / sig_ref) * math.exp(-(sigma[ch] - sig_ref) * tau)


@njit(cache=True, parallel=True)
def neumann_batch(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
                  points, views, step, order, samples, seed, codirectional,
                  term_mean, term_var, sum_mean, sum_var):
    """Truncated Neumann series by random walks.

    Walk directions come from a defensive mixture: the uniform sphere with
    probability ``MIX_UNIFORM``, the phase function otherwise, which bounds
    the per-bounce weight by ``1 / (1 - MIX_UNIFORM)``.

    Every walk of ``order`` steps yields one estimate of each term
    ``F_0 .. F_order``.  In co-directional mode the phase function is
    replaced by the constant 1/(4 pi) inside the walk and the per-order
    constant ``(1/(4 pi))^(j+1)`` multiplies term ``j``.
    """
    sig_ref = min(sigma[0], min(sigma[1], sigma[2]))
    n = points.shape[0]
    for i in prange(n):
        t1 = np.zeros((order + 1, 3))
        t2 = np.zeros((order + 1, 3))
        p1 = np.zeros((order + 1, 3))
        p2 = np.zeros((order + 1, 3))
        w = np.zeros(3)
        term = np.zeros(3)
        run = np.zeros(3)
        for s in range(samples):
            state = rng_init(seed, i, s)
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            vx, vy, vz = views[i, 0], views[i, 1], views[i, 2]
            w[:] = 1.0
            run[:] = 0.0
            alive = True
            for j in range(order + 1):
                term[:] = 0.0
                if alive:
                    if codirectional:
                        tau = depth_to_boundary(dens, origin, vs, bmin, bmax, px, py, pz,
                                                -light[0], -light[1], -light[2], step)
                        cst = INV_4PI ** (j + 1)
                        for ch in range(3):
                            term[ch] = w[ch] * cst * math.exp(-sigma[ch] * tau) * intensity[ch]
                    else:
                        direct_light(dens, origin, vs, bmin, bmax, sigma, lobe_w, lobe_g, light,
                                     intensity, px, py, pz, vx, vy, vz, step, term, w)
                for ch in range(3):
                    run[ch] += albedo[ch] ** j * term[ch]
                    t1[j, ch] += term[ch]
                    t2[j, ch] += term[ch] * term[ch]
                    p1[j, ch] += run[ch]
                    p2[j, ch] += run[ch] * run[ch]
                if not alive or j == order:
                    continue
                if codirectional:
                    state, dx, dy, dz = sample_sphere(state)
                else:
                    state, u = rng_next(state)
                    if u < MIX_UNIFORM:
                        state, dx, dy, dz = sample_sphere(state)
                    else:
                        state, dx, dy, dz = sample_phase(lobe_w, lobe_g, -vx, -vy, -vz, state)
                state, u = rng_next(state)
                target = -math.log(1.0 - u) / sig_ref
                hit, t, tau = free_flight(dens, origin, vs, bmin, bmax, px, py, pz, -dx, -dy, -dz, step, target)
                if not hit:
                    alive = False
                    continue
                if codirectional:
                    f4 = 1.0
                else:
                    c = -(dx * vx + dy * vy + dz * vz)
                    f = phase_eval(lobe_w, lobe_g, min(1.0, max(-1.0, c)))
                    f4 = f / (MIX_UNIFORM * INV_4PI + (1.0 - MIX_UNIFORM) * f)
                for ch in range(3):
                    w[ch] *= f4 * (sigma[ch] / sig_ref) * math.exp(-(sigma[ch] - sig_ref) * tau)
                px -= t * dx
                py -= t * dy
                pz -= t * dz
                vx, vy, vz = -dx, -dy, -dz
        for j in range(order + 1):
            for ch in range(3):
                m = t1[j, ch] / samples
                term_mean[i, j, ch] = m
                term_var[i, j, ch] = max(0.0, t2[j, ch] / samples - m * m) * samples / max(1, samples - 1)
                m = p1[j, ch] / samples
                sum_mean[i, j, ch] = m
                sum_var[i, j, ch] = max(0.0, p2[j, ch] / samples - m * m) * samples / max(1, samples - 1)


@njit(cache=True, parallel=True)
def march_reference(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
                    offsets, pts, weights, pix_views, step, spp, max_depth, rr_depth, seed,
                    out_mean, out_var):
    """Per-pixel in-scatter integral over precomputed march samples.

    Pixel ``i`` owns march samples ``offsets[i]:offsets[i+1]`` with
    quadrature weights ``weights`` (per channel, transmittance times
    scattering coefficient times step).  Each of ``spp`` samples picks one
    march sample with probability proportional to its channel-mean weight
    and traces one in-scatter path from it.
    """
    n = offsets.shape[0] - 1
    for i in prange(n):
        a = offsets[i]
        b = offsets[i + 1]
        total = 0.0
        for k in range(a, b):
            total += (weights[k, 0] + weights[k, 1] + weights[k, 2]) / 3.0
        if total <= 0.0:
            for ch in range(3):
                out_mean[i, ch] = 0.0
                out_var[i, ch] = 0.0
            continue
        s1 = np.zeros(3)
        s2 = np.zeros(3)
        acc = np.zeros(3)
        for s in range(spp):
            state = rng_init(seed, i, s)
            state, u = rng_next(state)
            target = u * total
            k = b - 1
            c = 0.0
            for kk in range(a, b):
                c += (weights[kk, 0] + weights[kk, 1] + weights[kk, 2]) / 3.0
                if target < c:
                    k = kk
                    break
            pk = (weights[k, 0] + weights[k, 1] + weights[k, 2]) / 3.0 / total
            acc[:] = 0.0
            trace_one(dens, origin, vs, bmin, bmax, sigma, albedo, lobe_w, lobe_g, light, intensity,
                      pts[k, 0], pts[k, 1], pts[k, 2], pix_views[i, 0], pix_views[i, 1], pix_views[i, 2],
                      step, max_depth, rr_depth, state, acc)
            for ch in range(3):
                v = weights[k, ch] / pk * acc[ch]
                s1[ch] += v
                s2[ch] += v * v
        for ch in range(3):
            m = s1[ch] / spp
            out_mean[i, ch] = m
            out_var[i, ch] = max(0.0, s2[ch] / spp - m * m) / max(1, spp - 1)


@njit(cache=True, parallel=True)
def boundary_depth_batch(dens, origin, vs, bmin, bmax, points, direction, step, out):
    """Density integral from each point along ``direction`` to the bounding box."""
    for i in prange(points.shape[0]):
        out[i] = depth_to_boundary(dens, origin, vs, bmin, bmax, points[i, 0], points[i, 1], points[i, 2],
                                   direction[0], direction[1], direction[2], step)


@njit(cache=True, parallel=True)
def occupied_entry_batch(dens, origin, vs, bmin, bmax, points, toward, step, min_dist, out):
    """Farthest occupied march sample from each point along ``toward``.

    ``out`` receives the distance; rays that meet no density get ``min_dist``.
    """
    for i in prange(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        t0, t1 = ray_box(px, py, pz, toward[0], toward[1], toward[2], bmin, bmax)
        ta = max(t0, 0.0)
        best = 0.0
        if t1 > ta:
            length = t1 - ta
            n = max(1, int(math.ceil(length / step - 1e-9)))
            h = length / n
            for k in range(n):
                t = ta + (k + 0.5) * h
                rho = trilinear(dens, origin[0], origin[1], origin[2], vs,
                                px + t * toward[0], py + t * toward[1], pz + t * toward[2])
                if rho > 0.0:
                    best = ta + (k + 1.0) * h
        out[i] = max(best, min_dist)


@njit(cache=True)
def table_lookup(table, g_lo, g_hi, h_max, g, angle, half):
    """Cap integral of one HG lobe from the cap-average table (matches ``VolumePhaseTable.lookup_hg``)."""
    n_g, n_a, n_h = table.shape
    ug = min(max((g - g_lo) / (g_hi - g_lo) * (n_g - 1), 0.0), n_g - 1.0)
    ua = min(max(angle / math.pi * (n_a - 1), 0.0), n_a - 1.0)
    uh = min(max(half / h_max * (n_h - 1), 0.0), n_h - 1.0)
    i0 = min(int(math.floor(ug)), n_g - 2)
    j0 = min(int(math.floor(ua)), n_a - 2)
    k0 = min(int(math.floor(uh)), n_h - 2)
    tu = ug - i0
    tv = ua - j0
    tw = uh - k0
    c00 = table[i0, j0, k0] * (1 - tu) + table[i0 + 1, j0, k0] * tu
    c10 = table[i0, j0 + 1, k0] * (1 - tu) + table[i0 + 1, j0 + 1, k0] * tu
    c01 = table[i0, j0, k0 + 1] * (1 - tu) + table[i0 + 1, j0, k0 + 1] * tu
    c11 = table[i0, j0 + 1, k0 + 1] * (1 - tu) + table[i0 + 1, j0 + 1, k0 + 1] * tu
    avg = (c00 * (1 - tv) + c10 * tv) * (1 - tw) + (c01 * (1 - tv) + c11 * tv) * tw
    h = min(max(half, 0.0), math.pi)
    return avg * 2.0 * math.pi * (1.0 - math.cos(h))


@njit(cache=True, parallel=True)
def feature_points_batch(dens, origin, vs, tvol, table, g_lo, g_hi, h_max, lobe_w, lobe_g,
                         centers, omegas, light, pts, apertures, out):
    """Density, transmittance feature and phase feature at placed template points.

    ``pts`` is (N, P, 3) and ``apertures`` (N, P); ``out`` receives (N, P, 3).
    Transmittance outside the grid is 1.
    """
    nx, ny, nz = dens.shape
    for i in prange(pts.shape[0]):
        px, py, pz = centers[i, 0], centers[i, 1], centers[i, 2]
        for j in range(pts.shape[1]):
            x, y, z = pts[i, j, 0], pts[i, j, 1], pts[i, j, 2]
            out[i, j, 0] = trilinear(dens, origin[0], origin[1], origin[2], vs, x, y, z)
            ux = (x - origin[0]) / vs
            uy = (y - origin[1]) / vs
            uz = (z - origin[2]) / vs
            if ux < 0.0 or uy < 0.0 or uz < 0.0 or ux > nx or uy > ny or uz > nz:
                out[i, j, 1] = 1.0
            else:
                out[i, j, 1] = trilinear(tvol, origin[0], origin[1], origin[2], vs, x, y, z)
            dx, dy, dz = x - px, y - py, z - pz
            dist = math.sqrt(dx * dx + dy * dy + dz * dz)
            if dist > 0.0:
                ax, ay, az = dx / dist, dy / dist, dz / dist
            else:
                ax, ay, az = omegas[i, 0], omegas[i, 1], omegas[i, 2]
            r = apertures[i, j]
            if dist <= 0.0 or r >= dist:
                half = math.pi
            else:
                half = math.asin(r / dist)
            cc = min(1.0, max(-1.0, ax * omegas[i, 0] + ay * omegas[i, 1] + az * omegas[i, 2]))
            cl = min(1.0, max(-1.0, -(ax * light[0] + ay * light[1] + az * light[2])))
            a_cam = math.acos(cc)
            a_light = math.acos(cl)
            f_cam = 0.0
            f_light = 0.0
            for k in range(lobe_w.shape[0]):
                if lobe_g[k] == 0.0:
                    iso = lobe_w[k] * 0.5 * (1.0 - math.cos(half))
                    f_cam += iso
                    f_light += iso
                else:
                    f_cam += lobe_w[k] * table_lookup(table, g_lo, g_hi, h_max, lobe_g[k], a_cam, half)
                    f_light += lobe_w[k] * table_lookup(table, g_lo, g_hi, h_max, lobe_g[k], a_light, half)
            out[i, j, 2] = f_cam * f_light
