"""Hot loops: per-cell exponential moments, table inversion and Euler steps.

Inside one table cell ``[y_k, y_k + u]`` the log-density is
``q_k + c_k*u + (a/2)*u**2`` and the quadratic term is handled by the
expansion ``exp(b*u**2) = 1 + b*u**2 + (b*u**2)**2/2`` (the neglected
remainder is below 1e-16 relative for the cell widths in use). Every integral
then reduces to the moments ``M_j(v) = int_0^v u**j exp(c*u) du`` which are
evaluated by their power series for ``|c*v| <= 1`` and by the standard
recursion otherwise.

Each kernel exists twice: a scalar loop compiled with numba and a
vectorised numpy version, selected by :mod:`renv._accel`.
"""

import math

import numpy as np

from ._accel import njit, pick
from .rng import TAG_NOISE, normal_pair_numpy, normal_pair_scalar

N_MOMENTS = 7
SERIES_TERMS = 24


# moments ---------------------------------------------------------------------


RECIPROCALS = 1.0 / np.arange(1, SERIES_TERMS + N_MOMENTS + 2)


@njit
def moments_scalar(c, v, out):
    """Fill ``out[j] = int_0^v u**j exp(c u) du`` for ``j < out.shape[0]``."""
    n = out.shape[0]
    z = c * v
    if abs(z) <= 1.0:
        for j in range(n):
            out[j] = 0.0
        term = 1.0
        for m in range(SERIES_TERMS):
            for j in range(n):
                out[j] += term * RECIPROCALS[j + m]
            term *= z * RECIPROCALS[m]
            if abs(term) < 1e-18:
                break
        power = v
        for j in range(n):
            out[j] *= power
            power *= v
    else:
        ez = math.exp(z)
        out[0] = v * math.expm1(z) / z
        power = v
        for j in range(1, n):
            power *= v
            out[j] = (power * ez - j * v * out[j - 1]) / z


@njit
def cell_mass(c, v, b):
    """``int_0^v exp(c u) (1 + b u^2 + b^2 u^4 / 2) du`` (the density without its cell prefactor)."""
    z = c * v
    if z == 0.0:
        m0 = v
    else:
        m0 = v * math.expm1(z) / z
    if abs(z) <= 1.0:
        # the correction terms are ~1e-6 of m0, so a short series is plenty
        s2 = 0.0
        s4 = 0.0
        term = 1.0
        for m in range(SERIES_TERMS):
            s2 += term * RECIPROCALS[m + 2]
            s4 += term * RECIPROCALS[m + 4]
            term *= z * RECIPROCALS[m]
            if abs(term) < 1e-13:
                break
        v3 = v * v * v
        return m0 + b * v3 * (s2 + 0.5 * b * v * v * s4)
    ez = math.exp(z)
    m1 = (v * ez - v * m0) / z
    m2 = (v * v * ez - 2.0 * v * m1) / z
    m3 = (v * v * v * ez - 3.0 * v * m2) / z
    m4 = (v * v * v * v * ez - 4.0 * v * m3) / z
    return m0 + b * m2 + 0.5 * b * b * m4


def moments_numpy(c, v, count=N_MOMENTS):
    """Vectorised moments; returns an array of shape ``(count,) + c.shape``."""
    c = np.asarray(c, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), c.shape)
    z = c * v
    out = np.zeros((count,) + c.shape)
    small = np.abs(z) <= 1.0
    if small.any():
        zs = z[small]
        acc = np.zeros((count, zs.size))
        term = np.ones(zs.size)
        for m in range(SERIES_TERMS):
            for j in range(count):
                acc[j] += term / (j + m + 1)
            term = term * zs / (m + 1)
            if np.max(np.abs(term)) < 1e-18:
                break
        vs = v[small]
        power = vs.copy()
        for j in range(count):
            out[j][small] = acc[j] * power
            power = power * vs
    big = ~small
    if big.any():
        zb, vb = z[big], v[big]
        ez = np.exp(zb)
        prev = vb * np.expm1(zb) / zb
        out[0][big] = prev
        power = vb.copy()
        for j in range(1, count):
            power = power * vb
            prev = (power * ez - j * vb * prev) / zb
            out[j][big] = prev
    return out


# cell integrals ---------------------------------------------------------------


def cell_integrals_numpy(c, width, half_a, w0, w1, w2):
    """Integrals of the density and of ``density * (w0 + w1 u + w2 u^2)`` over each cell.

    Both are returned without the ``exp(q_k)`` prefactor.
    """
    m = moments_numpy(c, width)
    b, b2 = half_a, 0.5 * half_a * half_a
    mass = m[0] + b * m[2] + b2 * m[4]
    weighted = (
        w0 * (m[0] + b * m[2] + b2 * m[4])
        + w1 * (m[1] + b * m[3] + b2 * m[5])
        + w2 * (m[2] + b * m[4] + b2 * m[6])
    )
    return mass, weighted


@njit
def _cell_integrals_loop(c, width, half_a, w0, w1, w2, mass, weighted):
    m = np.empty(N_MOMENTS)
    b = half_a
    b2 = 0.5 * half_a * half_a
    for i in range(c.shape[0]):
        moments_scalar(c[i], width, m)
        mass[i] = m[0] + b * m[2] + b2 * m[4]
        weighted[i] = (
            w0[i] * (m[0] + b * m[2] + b2 * m[4])
            + w1[i] * (m[1] + b * m[3] + b2 * m[5])
            + w2 * (m[2] + b * m[4] + b2 * m[6])
        )


def cell_integrals_compiled(c, width, half_a, w0, w1, w2):
    c = np.ascontiguousarray(c, dtype=float)
    w0 = np.ascontiguousarray(np.broadcast_to(w0, c.shape), dtype=float)
    w1 = np.ascontiguousarray(np.broadcast_to(w1, c.shape), dtype=float)
    mass = np.empty(c.shape[0])
    weighted = np.empty(c.shape[0])
    _cell_integrals_loop(c, float(width), float(half_a), w0, w1, float(w2), mass, weighted)
    return mass, weighted


cell_integrals = pick(cell_integrals_compiled, cell_integrals_numpy)


# inversion ------------------------------------------------------------------------


@njit
def _locate(nodes, value):
    lo = 0
    hi = nodes.shape[0] - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if nodes[mid] <= value:
            lo = mid
        else:
            hi = mid
    return lo


@njit
def invert_one(xt, width, half_a, q, eq_values, c, w0, w1, w2, s_nodes, j_nodes, with_drift, m):
    """Return ``(cell index, offset in cell, sigma, J)`` for one tilde-space value.

    ``J`` is the weighted integral entering the drift (zero unless ``with_drift``).
    """
    k = _locate(s_nodes, xt)
    if k >= q.shape[0]:
        k = q.shape[0] - 1
    b = half_a
    b2 = 0.5 * half_a * half_a
    eq = eq_values[k]
    g = (xt - s_nodes[k]) / eq
    ck = c[k]
    arg = ck * g
    if abs(arg) > 1e-12:
        if arg <= -1.0:
            u = width
        else:
            u = math.log1p(arg) / ck
    else:
        u = g
    if u < 0.0:
        u = 0.0
    elif u > width:
        u = width
    # Newton; the guess ignores only the tiny quadratic term, so two rounds suffice
    for _ in range(8):
        uu = u * u
        slope = math.exp(ck * u) * (1.0 + b * uu + b2 * uu * uu)
        step = (cell_mass(ck, u, b) - g) / slope
        u -= step
        if u < 0.0:
            u = 0.0
        elif u > width:
            u = width
        if abs(step) <= 1e-8 * width:
            break
    uu = u * u
    sigma = eq * math.exp(ck * u) * (1.0 + b * uu + b2 * uu * uu)
    if not with_drift:
        return k, u, sigma, 0.0
    moments_scalar(ck, u, m)
    partial = (
        w0[k] * (m[0] + b * m[2] + b2 * m[4])
        + w1[k] * (m[1] + b * m[3] + b2 * m[5])
        + w2 * (m[2] + b * m[4] + b2 * m[6])
    )
    return k, u, sigma, j_nodes[k] + eq * partial


@njit
def _invert_loop(xt, y0, width, half_a, q, eq_values, c, w0, w1, w2, s_nodes, j_nodes, with_drift, h, sigma, drift):
    m = np.empty(N_MOMENTS)
    for i in range(xt.shape[0]):
        k, u, s, weighted = invert_one(xt[i], width, half_a, q, eq_values, c, w0, w1, w2, s_nodes, j_nodes, with_drift, m)
        y = y0 + k * width + u
        h[i] = y
        sigma[i] = s
        drift[i] = 0.5 * y * s - 0.5 * xt[i] - weighted if with_drift else 0.0


def invert_compiled(table, xt, with_drift=True):
    xt = np.ascontiguousarray(xt, dtype=float)
    n = xt.shape[0]
    h = np.empty(n)
    sigma = np.empty(n)
    drift = np.empty(n)
    _invert_loop(
        xt, table.y0, table.width, table.half_a, table.q, table.eq, table.c, table.w0, table.w1, table.w2,
        table.s_nodes, table.j_nodes, with_drift and table.with_drift, h, sigma, drift,
    )
    return h, sigma, drift


def invert_numpy(table, xt, with_drift=True):
    xt = np.asarray(xt, dtype=float)
    k = np.searchsorted(table.s_nodes, xt, side="right") - 1
    k = np.clip(k, 0, table.q.size - 1)
    b = table.half_a
    b2 = 0.5 * b * b
    eq = table.eq[k]
    g = (xt - table.s_nodes[k]) / eq
    ck = table.c[k]
    arg = ck * g
    with np.errstate(divide="ignore", invalid="ignore"):
        guess = np.where(arg > -1.0, np.log1p(np.maximum(arg, -1.0 + 1e-300)) / ck, table.width)
    u = np.where(np.abs(arg) > 1e-12, guess, g)
    u = np.clip(u, 0.0, table.width)
    for _ in range(6):
        m = moments_numpy(ck, u, 5)
        value = m[0] + b * m[2] + b2 * m[4] - g
        uu = u * u
        slope = np.exp(ck * u) * (1.0 + b * uu + b2 * uu * uu)
        step = value / slope
        u = np.clip(u - step, 0.0, table.width)
        if np.all(np.abs(step) <= 1e-8 * table.width):
            break
    uu = u * u
    sigma = eq * np.exp(ck * u) * (1.0 + b * uu + b2 * uu * uu)
    y = table.y0 + k * table.width + u
    if not (with_drift and table.with_drift):
        return y, sigma, np.zeros_like(y)
    m = moments_numpy(ck, u)
    partial = (
        table.w0[k] * (m[0] + b * m[2] + b2 * m[4])
        + table.w1[k] * (m[1] + b * m[3] + b2 * m[5])
        + table.w2 * (m[2] + b * m[4] + b2 * m[6])
    )
    drift = 0.5 * y * sigma - 0.5 * xt - eq * partial - table.j_nodes[k]
    return y, sigma, drift


invert = pick(invert_compiled, invert_numpy)


# forward evaluation ---------------------------------------------------------------


def forward_numpy(table, x, with_drift=True):
    """``(S(x), sigma(x), d(x))`` at original coordinates ``x``."""
    x = np.asarray(x, dtype=float)
    k = np.floor((x - table.y0) / table.width).astype(np.int64)
    k = np.clip(k, 0, table.q.size - 1)
    u = np.clip(x - (table.y0 + k * table.width), 0.0, table.width)
    b = table.half_a
    b2 = 0.5 * b * b
    eq = np.exp(table.q[k])
    ck = table.c[k]
    m = moments_numpy(ck, u)
    s = table.s_nodes[k] + eq * (m[0] + b * m[2] + b2 * m[4])
    uu = u * u
    sigma = eq * np.exp(ck * u) * (1.0 + b * uu + b2 * uu * uu)
    if not (with_drift and table.with_drift):
        return s, sigma, np.zeros_like(s)
    partial = (
        table.w0[k] * (m[0] + b * m[2] + b2 * m[4])
        + table.w1[k] * (m[1] + b * m[3] + b2 * m[5])
        + table.w2 * (m[2] + b * m[4] + b2 * m[6])
    )
    drift = 0.5 * x * sigma - 0.5 * s - eq * partial - table.j_nodes[k]
    return s, sigma, drift


# Euler-Maruyama steps ------------------------------------------------------------


@njit
def _equivalent_step_loop(
    xt, alive, replica, step, key0, key1, sqrt_dt, dt, y0, width, half_a, q, eq_values, c, w0, w1, w2,
    s_nodes, j_nodes, with_drift, positions,
):
    m = np.empty(N_MOMENTS)
    lo = s_nodes[0]
    hi = s_nodes[s_nodes.shape[0] - 1]
    block = step >> 1
    use_sin = step & 1
    for i in range(xt.shape[0]):
        if not alive[i]:
            continue
        x = xt[i]
        if x <= lo or x >= hi:
            alive[i] = False
            continue
        k, u, sigma, weighted = invert_one(x, width, half_a, q, eq_values, c, w0, w1, w2, s_nodes, j_nodes, with_drift, m)
        y = y0 + k * width + u
        positions[i] = y
        drift = 0.5 * y * sigma - 0.5 * x - weighted if with_drift else 0.0
        g0, g1 = normal_pair_scalar(key0, key1, block, replica[i], TAG_NOISE)
        noise = g1 if use_sin else g0
        xt[i] = x + drift * dt + sigma * sqrt_dt * noise


def equivalent_step_compiled(table, xt, alive, replica, step, key, dt, positions):
    """Advance every live replica by one Euler step in tilde space (in place).

    ``positions`` receives the original-coordinate position at the start of
    the step. Replicas whose value leaves the table are marked dead and left
    untouched so the caller can extend the table and retry.
    """
    _equivalent_step_loop(
        xt, alive, replica, np.int64(step), key[0], key[1], math.sqrt(dt), dt, table.y0, table.width,
        table.half_a, table.q, table.eq, table.c, table.w0, table.w1, table.w2, table.s_nodes, table.j_nodes,
        table.with_drift, positions,
    )


def step_noise_numpy(key, replica, step):
    g0, g1 = normal_pair_numpy(key, np.full(replica.shape, step >> 1, dtype=np.int64), replica, TAG_NOISE)
    return g1 if step & 1 else g0


def equivalent_step_numpy(table, xt, alive, replica, step, key, dt, positions):
    inside = alive & (xt > table.s_nodes[0]) & (xt < table.s_nodes[-1])
    alive &= inside
    idx = np.flatnonzero(alive)
    if idx.size == 0:
        return
    x = xt[idx]
    y, sigma, drift = invert_numpy(table, x)
    positions[idx] = y
    noise = step_noise_numpy(key, replica[idx], step)
    xt[idx] = x + drift * dt + sigma * math.sqrt(dt) * noise


equivalent_step = pick(equivalent_step_compiled, equivalent_step_numpy)


@njit
def locate_piece(breakpoints, starts, z):
    """Index of the piece containing ``z`` (right-continuous) or -1 outside.

    Pieces are uniform inside each unit cell, so the index is guessed from
    the cell and then corrected by a short walk.
    """
    last = breakpoints.shape[0] - 2
    if z < breakpoints[0] or z >= breakpoints[last + 1]:
        return -1
    origin = last // 2 + (last & 1)
    az = abs(z)
    n = int(az)
    if n >= starts.shape[0] - 1:
        n = starts.shape[0] - 2
    m = starts[n + 1] - starts[n]
    i = starts[n] + int((az - n) * m)
    j = origin + i if z >= 0.0 else origin - i - 1
    if j < 0:
        j = 0
    elif j > last:
        j = last
    while j > 0 and breakpoints[j] > z:
        j -= 1
    while j < last and breakpoints[j + 1] <= z:
        j += 1
    return j


@njit
def _direct_step_loop(
    x, alive, replica, step, key0, key1, dt, a, amplitude, factor, breakpoints, slopes, starts, analytic, slope_const,
):
    sqrt_dt = math.sqrt(dt)
    block = step >> 1
    use_sin = step & 1
    for i in range(x.shape[0]):
        if not alive[i]:
            continue
        z = factor * x[i]
        if analytic == 0:
            env_slope = 0.0
        elif analytic == 1:
            env_slope = slope_const
        elif analytic == 2:
            if z == 0.0:
                env_slope = 0.0
            else:
                env_slope = math.copysign(0.5 / math.sqrt(abs(z)), z)
        else:
            j = locate_piece(breakpoints, starts, z)
            if j < 0:
                alive[i] = False
                continue
            env_slope = slopes[j]
        drift = -0.5 * (a * x[i] + amplitude * factor * env_slope)
        g0, g1 = normal_pair_scalar(key0, key1, block, replica[i], TAG_NOISE)
        noise = g1 if use_sin else g0
        x[i] = x[i] + drift * dt + sqrt_dt * noise


def direct_step_compiled(x, alive, replica, step, key, dt, a, amplitude, factor, slope_source):
    """One explicit Euler step of ``dZ = dB - (a Z + amplitude*factor*w'(factor Z))/2 dt``."""
    analytic, breakpoints, slopes, starts, slope_const = slope_source
    _direct_step_loop(
        x, alive, replica, np.int64(step), key[0], key[1], dt, a, amplitude, factor, breakpoints, slopes, starts,
        analytic, slope_const,
    )


def direct_step_numpy(x, alive, replica, step, key, dt, a, amplitude, factor, slope_source):
    analytic, breakpoints, slopes, _, slope_const = slope_source
    idx = np.flatnonzero(alive)
    if idx.size == 0:
        return
    xi = x[idx]
    z = factor * xi
    if analytic == 0:
        env_slope = np.zeros_like(z)
    elif analytic == 1:
        env_slope = np.full_like(z, slope_const)
    elif analytic == 2:
        with np.errstate(divide="ignore"):
            env_slope = np.where(z == 0.0, 0.0, np.copysign(0.5 / np.sqrt(np.abs(z)), z))
    else:
        outside = (z < breakpoints[0]) | (z >= breakpoints[-1])
        if outside.any():
            alive[idx[outside]] = False
            keep = ~outside
            idx, xi, z = idx[keep], xi[keep], z[keep]
        j = np.searchsorted(breakpoints, z, side="right") - 1
        env_slope = slopes[np.clip(j, 0, slopes.size - 1)]
    drift = -0.5 * (a * xi + amplitude * factor * env_slope)
    noise = step_noise_numpy(key, replica[idx], step)
    x[idx] = xi + drift * dt + math.sqrt(dt) * noise


direct_step = pick(direct_step_compiled, direct_step_numpy)
