"""Compiled path kernels shared by the simulators.

A scene/field pair is flattened into a ``model`` tuple ``(cx, cy, R, coeffs, beta)``;
``coeffs[k, p]`` is the degree-``p`` coefficient of ``G`` for trap ``k`` (0-based here).
Every kernel loops over paths with ``prange`` and writes only to its own output slot,
so results are independent of the thread count.

Step-size rule: with ``d`` the distance to the nearest critical surface,
``dt = min(cap, max(dt_min, (kappa d)^2))``; ``cap`` is the region's step.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .rng import draw

TWO_PI = 2.0 * math.pi
INF = np.inf


def model_arrays(scene, spec=None):
    n = scene.n
    cx = np.array([t.center.x for t in scene.traps], dtype=np.float64)
    cy = np.array([t.center.y for t in scene.traps], dtype=np.float64)
    R = scene.radii.astype(np.float64)
    if spec is None:
        coeffs = np.zeros((max(n, 1), 3))
        beta = np.zeros(max(n, 1))
    else:
        deg = max(len(p.G) for p in spec.profiles) + 2 if n else 3
        coeffs = np.zeros((max(n, 1), deg))
        beta = np.zeros(max(n, 1))
        for k, p in enumerate(spec.profiles):
            c = p.coeffs()
            coeffs[k, :c.size] = c
            beta[k] = p.beta
    return (cx, cy, R, coeffs, beta)


def measure_arrays(measures, n):
    """Pack normalized boundary measures as ``(is_uniform, counts, theta, cdf)``."""
    amax = max([1] + [0 if m is None or m.is_uniform else m.theta.size for m in measures])
    uni = np.ones(max(n, 1), dtype=np.int64)
    cnt = np.zeros(max(n, 1), dtype=np.int64)
    th = np.zeros((max(n, 1), amax))
    cdf = np.ones((max(n, 1), amax))
    for k, m in enumerate(measures):
        if m is None or m.is_uniform:
            continue
        w = m.weights / m.weights.sum()
        uni[k] = 0
        cnt[k] = w.size
        th[k, :w.size] = m.theta
        c = np.cumsum(w)
        c[-1] = 1.0
        cdf[k, :w.size] = c
    return (uni, cnt, th, cdf)


@nb.njit(inline="always", cache=True)
def wrap1(x):
    w = x - math.floor(x)
    if w >= 1.0:
        w = 0.0
    return w


@nb.njit(inline="always", cache=True)
def mi(d):
    return d - math.floor(d + 0.5)


@nb.njit(cache=True)
def nearest(x, y, model):
    """0-based index of the trap with the nearest boundary and its signed distance."""
    cx, cy, R = model[0], model[1], model[2]
    best = -1
    bd = INF
    for k in range(cx.size):
        dx = mi(x - cx[k])
        dy = mi(y - cy[k])
        d = math.sqrt(dx * dx + dy * dy) - R[k]
        if d < bd:
            bd = d
            best = k
    return best, bd


@nb.njit(cache=True)
def sdist_k(x, y, k, model):
    dx = mi(x - model[0][k])
    dy = mi(y - model[1][k])
    return math.sqrt(dx * dx + dy * dy) - model[2][k]


@nb.njit(cache=True)
def angle_k(x, y, k, model):
    dx = mi(x - model[0][k])
    dy = mi(y - model[1][k])
    a = math.atan2(dy, dx)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:
        a = 0.0
    return a


@nb.njit(cache=True)
def field_k(x, y, k, model):
    """``-grad U`` of trap ``k`` at a point (no inside/outside test)."""
    coeffs, beta = model[3], model[4]
    dx = mi(x - model[0][k])
    dy = mi(y - model[1][k])
    r = math.sqrt(dx * dx + dy * dy)
    if r == 0.0:
        return 0.0, 0.0
    P = coeffs.shape[1]
    g = 0.0
    dg = 0.0
    rp = 1.0
    for p in range(P):
        g += coeffs[k, p] * rp
        if p + 1 < P:
            dg += (p + 1) * coeffs[k, p + 1] * rp
        rp *= r
    c = dx / r
    s = dy / r
    b = beta[k]
    gr = dg * (1.0 + b * c)
    gt = -g * b * s / r
    return -(gr * c - gt * s), -(gr * s + gt * c)


@nb.njit(cache=True)
def drift(x, y, model):
    k, d = nearest(x, y, model)
    if k >= 0 and d <= 0.0:
        return field_k(x, y, k, model)
    return 0.0, 0.0


@nb.njit(inline="always", cache=True)
def pick_dt(d_crit, cap, dt_min, kappa):
    s = kappa * d_crit
    dt = s * s
    if dt < dt_min:
        dt = dt_min
    if dt > cap:
        dt = cap
    return dt


@nb.njit(cache=True)
def eps_move(x, y, eps, dt, z0, z1, model):
    """Euler-Maruyama increment of ``dX = v/eps dt + dW`` (unwrapped).

    When the predicted step crosses a trap boundary, the drift is applied only for the
    fraction of the segment inside the trap (linear interpolation of the signed distance).
    """
    sq = math.sqrt(dt)
    k, d = nearest(x, y, model)
    if k < 0:
        return sq * z0, sq * z1
    vx = 0.0
    vy = 0.0
    if d <= 0.0:
        vx, vy = field_k(x, y, k, model)
    ex = vx / eps * dt + sq * z0
    ey = vy / eps * dt + sq * z1
    dn = sdist_k(x + ex, y + ey, k, model)
    if (d <= 0.0) == (dn <= 0.0):
        return ex, ey
    if d <= 0.0:
        frac = -d / (dn - d)
    else:
        frac = -dn / (d - dn)
        vx, vy = field_k(x + ex, y + ey, k, model)
    return vx / eps * dt * frac + sq * z0, vy / eps * dt * frac + sq * z1


@nb.njit(inline="always", cache=True)
def eps_dt(d, dt_U, dt_trap, dt_zero, kappa):
    """Step for the epsilon process at signed distance ``d`` from the nearest boundary."""
    if d <= 0.0:
        return pick_dt(-d, dt_trap, dt_zero, kappa)
    return pick_dt(d, dt_U, dt_zero, kappa)


@nb.njit(cache=True)
def region_code(x, y, model, tol):
    k, d = nearest(x, y, model)
    if k < 0:
        return 0
    if abs(d) <= tol:
        return -(k + 1)
    if d < 0.0:
        return k + 1
    return 0


@nb.njit(cache=True)
def bisect_level(x, y, ex, ey, k, level, model, tol):
    """Point on the segment ``(x, y) + s (ex, ey)`` where ``sdist_k`` crosses ``level``.

    The start is on one side of the level and ``s = 1`` on the other.
    """
    lo = 0.0
    hi = 1.0
    f_lo = sdist_k(x, y, k, model) - level
    length = math.sqrt(ex * ex + ey * ey)
    for _ in range(200):
        if (hi - lo) * length <= tol:
            break
        mid = 0.5 * (lo + hi)
        f = sdist_k(x + mid * ex, y + mid * ey, k, model) - level
        if (f < 0.0) == (f_lo < 0.0):
            lo = mid
            f_lo = f
        else:
            hi = mid
    return wrap1(x + hi * ex), wrap1(y + hi * ey), hi


@nb.njit(cache=True)
def sample_measure(k, u, meas):
    uni, cnt, th, cdf = meas
    if uni[k] == 1:
        return TWO_PI * u
    n = cnt[k]
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[k, mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return th[k, lo]


# -- epsilon process ----------------------------------------------------------

@nb.njit(parallel=True, cache=True)
def k_exit(model, k, x0, y0, eps, dt_trap, dt_min, kappa, tol, max_time, seed, tag,
           out_t, out_th, out_ok):
    """Run from ``(x0[i], y0[i])`` inside trap ``k`` until its boundary is reached."""
    for i in nb.prange(x0.size):
        x = x0[i]
        y = y0[i]
        t = 0.0
        j = 0
        out_ok[i] = 0
        out_t[i] = max_time
        out_th[i] = -1.0
        while t < max_time:
            d = sdist_k(x, y, k, model)
            dt = pick_dt(-d, dt_trap, dt_min, kappa)
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            vx, vy = field_k(x, y, k, model)
            sq = math.sqrt(dt)
            ex = vx / eps * dt + sq * z0
            ey = vy / eps * dt + sq * z1
            xn = wrap1(x + ex)
            yn = wrap1(y + ey)
            if sdist_k(xn, yn, k, model) >= 0.0:
                bx, by, s = bisect_level(x, y, ex, ey, k, 0.0, model, tol)
                out_t[i] = t + s * dt
                out_th[i] = angle_k(bx, by, k, model)
                out_ok[i] = 1
                break
            x = xn
            y = yn
            t += dt


@nb.njit(parallel=True, cache=True)
def k_split(model, k, theta, eps, delta, dt_trap, dt_zero, dt_min, kappa, tol, max_steps, seed,
            tag, out_hit, out_d, out_steps):
    """Start on the boundary of trap ``k``; 1 if ``sdist = eps`` is reached before ``-delta``.

    Steps shrink toward both stopping levels (floor ``dt_min``) and toward the boundary
    itself, where the drift switches off (floor ``dt_zero``).
    """
    cx, cy, R = model[0], model[1], model[2]
    for i in nb.prange(theta.size):
        x = wrap1(cx[k] + R[k] * math.cos(theta[i]))
        y = wrap1(cy[k] + R[k] * math.sin(theta[i]))
        j = 0
        out_hit[i] = -1
        out_d[i] = 0.0
        while j < max_steps:
            d = sdist_k(x, y, k, model)
            dt = pick_dt(min(abs(d - eps), abs(d + delta)), dt_trap, dt_min, kappa)
            dt = min(dt, pick_dt(abs(d), dt_trap, dt_zero, kappa))
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            ex, ey = eps_move(x, y, eps, dt, z0, z1, model)
            dn = sdist_k(x + ex, y + ey, k, model)
            if dn >= eps:
                bx, by, s = bisect_level(x, y, ex, ey, k, eps, model, tol)
                out_hit[i] = 1
                out_d[i] = sdist_k(bx, by, k, model)
                break
            if dn <= -delta:
                bx, by, s = bisect_level(x, y, ex, ey, k, -delta, model, tol)
                out_hit[i] = 0
                out_d[i] = sdist_k(bx, by, k, model)
                break
            x = wrap1(x + ex)
            y = wrap1(y + ey)
        out_steps[i] = j


@nb.njit(parallel=True, cache=True)
def k_aux1d(v, z0, n, dt_max, dt_zero, dt_min, kappa, max_steps, seed, tag, out_hit, out_steps):
    """``dZ = dB - v 1{Z<0} dt`` from 0; 1 if level 1 is reached before ``z0``.

    Steps shrink toward the absorbing levels (floor ``dt_min``) and toward the drift
    switch at 0 (floor ``dt_zero``).  A step that straddles 0 applies the drift for the
    fraction of the predicted segment that lies below 0.
    """
    for i in nb.prange(n):
        z = 0.0
        j = 0
        out_hit[i] = -1
        while j < max_steps:
            dt = pick_dt(min(1.0 - z, z - z0), dt_max, dt_min, kappa)
            dt = min(dt, pick_dt(abs(z), dt_max, dt_zero, kappa))
            g0, g1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            dw = math.sqrt(dt) * g0
            zp = z + (-v * dt if z < 0.0 else 0.0) + dw
            if (z < 0.0) == (zp < 0.0):
                frac = 1.0 if z < 0.0 else 0.0
            else:
                frac = (-z if z < 0.0 else -zp) / abs(zp - z)
            z = z - v * frac * dt + dw
            if z >= 1.0:
                out_hit[i] = 1
                break
            if z <= z0:
                out_hit[i] = 0
                break
        out_steps[i] = j


@nb.njit(parallel=True, cache=True)
def k_trace(model, x0, y0, start, eps, dt_U, dt_trap, dt_zero, kappa, tol, max_time,
            trace_times, m, seed, tag, out_seq, out_y, out_clock, out_status):
    """Epsilon process with a trace clock that runs only while ``sdist >= -tol``.

    Records the first ``m`` boundary bands reached that differ from the current trap
    (``start[i]`` is the 1-based starting trap or 0) and the trace-time marginals
    ``Y(trace_times)``.  ``out_clock[i] = (real time, trace time)``.
    """
    nT = trace_times.size
    t_stop = trace_times[nT - 1] if nT > 0 else -INF
    for i in nb.prange(x0.size):
        x = x0[i]
        y = y0[i]
        cur = start[i]
        t = 0.0
        s = 0.0
        j = 0
        nseq = 0
        it = 0
        for q in range(m):
            out_seq[i, q] = 0
        for q in range(nT):
            out_y[i, q, 0] = np.nan
            out_y[i, q, 1] = np.nan
        out_status[i] = 0
        while True:
            k, d = nearest(x, y, model)
            if k >= 0 and d <= tol:
                if k + 1 != cur:
                    cur = k + 1
                    if nseq < m:
                        out_seq[i, nseq] = cur
                        nseq += 1
            in_ubar = k < 0 or d >= -tol
            if in_ubar:
                while it < nT and trace_times[it] <= s:
                    out_y[i, it, 0] = x
                    out_y[i, it, 1] = y
                    it += 1
            if nseq >= m and s >= t_stop:
                out_status[i] = 1
                break
            if t >= max_time:
                break
            dt = dt_U if k < 0 else eps_dt(d, dt_U, dt_trap, dt_zero, kappa)
            if in_ubar and it < nT and trace_times[it] - s < dt:
                # land the trace clock exactly on the next requested trace time
                dt = trace_times[it] - s
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            ex, ey = eps_move(x, y, eps, dt, z0, z1, model)
            if in_ubar:
                s += dt
            t += dt
            x = wrap1(x + ex)
            y = wrap1(y + ey)
        out_clock[i, 0] = t
        out_clock[i, 1] = s


# -- glued limit process ---------------------------------------------------------

@nb.njit(cache=True)
def _glue_reinject(k, u, model, meas, delta):
    th = sample_measure(k, u, meas)
    r = model[2][k] + delta
    return wrap1(model[0][k] + r * math.cos(th)), wrap1(model[1][k] + r * math.sin(th)), th


@nb.njit(parallel=True, cache=True)
def k_glue_seq(model, meas, x0, y0, start, delta, dt_U, kappa, tol, m, max_time, seed, tag,
               out_seq, out_hits, out_time):
    """First ``m`` distinct traps visited by the delta-reinjection process."""
    for i in nb.prange(x0.size):
        cur = start[i]
        x = x0[i]
        y = y0[i]
        t = 0.0
        j = 0
        nseq = 0
        hits = 0
        for q in range(m):
            out_seq[i, q] = 0
        if cur > 0:
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            x, y, th = _glue_reinject(cur - 1, u0, model, meas, delta)
        while nseq < m and t < max_time:
            k, d = nearest(x, y, model)
            if k >= 0 and d <= tol:
                hits += 1
                if k + 1 != cur:
                    cur = k + 1
                    out_seq[i, nseq] = cur
                    nseq += 1
                    if nseq >= m:
                        break
                z0, z1, u0, u1 = draw(seed, tag, i, j)
                j += 1
                x, y, th = _glue_reinject(k, u0, model, meas, delta)
                continue
            dt = dt_U if k < 0 else pick_dt(d, dt_U, 0.0, kappa)
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            sq = math.sqrt(dt)
            x = wrap1(x + sq * z0)
            y = wrap1(y + sq * z1)
            t += dt
        out_hits[i] = hits
        out_time[i] = t


@nb.njit(cache=True)
def psi_eval(x, y, psi):
    """``psi = (const, bumps)`` with rows ``(cx, cy, width, amplitude)`` of C-infinity bumps."""
    const, bumps = psi
    val = const
    for b in range(bumps.shape[0]):
        dx = mi(x - bumps[b, 0])
        dy = mi(y - bumps[b, 1])
        q = (dx * dx + dy * dy) / (bumps[b, 2] * bumps[b, 2])
        if q < 1.0:
            val += bumps[b, 3] * math.exp(1.0 - 1.0 / (1.0 - q))
    return val


@nb.njit(parallel=True, cache=True)
def k_glue_resolvent(model, meas, x0, y0, lam, psi, delta, dt_U, kappa, tol, t_max, seed, tag,
                     out_val, out_hits):
    """Discounted path integral ``int_0^t_max exp(-lam t) psi(X_t) dt`` per path."""
    for i in nb.prange(x0.size):
        x = x0[i]
        y = y0[i]
        t = 0.0
        j = 0
        acc = 0.0
        hits = 0
        p_cur = psi_eval(x, y, psi)
        disc = 1.0
        while t < t_max:
            k, d = nearest(x, y, model)
            if k >= 0 and d <= tol:
                hits += 1
                z0, z1, u0, u1 = draw(seed, tag, i, j)
                j += 1
                x, y, th = _glue_reinject(k, u0, model, meas, delta)
                p_cur = psi_eval(x, y, psi)
                continue
            dt = dt_U if k < 0 else pick_dt(d, dt_U, 0.0, kappa)
            if t + dt > t_max:
                dt = t_max - t
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            sq = math.sqrt(dt)
            x = wrap1(x + sq * z0)
            y = wrap1(y + sq * z1)
            p_new = psi_eval(x, y, psi)
            disc_new = math.exp(-lam * (t + dt))
            acc += 0.5 * (p_cur + p_new) * (disc - disc_new) / lam
            p_cur = p_new
            disc = disc_new
            t += dt
        out_val[i] = acc
        out_hits[i] = hits


@nb.njit(cache=True)
def k_glue_record(model, meas, x, y, start, delta, dt_U, kappa, tol, t_end, grid_dt, seed, tag,
                  path, out_grid, out_hit_t, out_hit_k, out_hit_th):
    """Single glue path sampled on a uniform time grid.  Returns (grid count, hit count)."""
    cap_g = out_grid.shape[0]
    cap_h = out_hit_t.size
    ng = 0
    nh = 0
    t = 0.0
    j = 0
    if start > 0:
        z0, z1, u0, u1 = draw(seed, tag, path, j)
        j += 1
        x, y, th = _glue_reinject(start - 1, u0, model, meas, delta)
        if nh < cap_h:
            out_hit_t[nh] = 0.0
            out_hit_k[nh] = start
            out_hit_th[nh] = th
        nh += 1
    while True:
        while ng < cap_g and ng * grid_dt <= t:
            out_grid[ng, 0] = x
            out_grid[ng, 1] = y
            ng += 1
        if t >= t_end or ng >= cap_g:
            break
        k, d = nearest(x, y, model)
        if k >= 0 and d <= tol:
            z0, z1, u0, u1 = draw(seed, tag, path, j)
            j += 1
            x, y, th = _glue_reinject(k, u0, model, meas, delta)
            if nh < cap_h:
                out_hit_t[nh] = t
                out_hit_k[nh] = k + 1
                out_hit_th[nh] = th
            nh += 1
            continue
        dt = dt_U if k < 0 else pick_dt(d, dt_U, 0.0, kappa)
        if ng * grid_dt - t < dt:
            # land exactly on the next grid time
            dt = ng * grid_dt - t
        z0, z1, u0, u1 = draw(seed, tag, path, j)
        j += 1
        sq = math.sqrt(dt)
        x = wrap1(x + sq * z0)
        y = wrap1(y + sq * z1)
        t += dt
    return ng, nh


# -- coarse metastable simulator ------------------------------------------------

@nb.njit(parallel=True, cache=True)
def k_coarse(model, meas, x0, y0, start, depth, eps_model, prefactor, t_horizon, delta, dt_U,
             kappa, tol, seed, tag, out_where, out_visits):
    """Brownian motion in U, exponential sojourns ``prefactor exp(V_k/eps) Exp(1)`` in traps.

    ``out_where[i]`` is the 1-based trap occupied at the horizon, or 0 for U.
    """
    for i in nb.prange(x0.size):
        x = x0[i]
        y = y0[i]
        t = 0.0
        j = 0
        visits = 0
        where = 0
        pending = start[i]
        while True:
            if pending > 0:
                k = pending - 1
                pending = 0
                visits += 1
                z0, z1, u0, u1 = draw(seed, tag, i, j)
                j += 1
                t += prefactor * math.exp(depth[k] / eps_model) * (-math.log1p(-u0))
                if t >= t_horizon:
                    where = k + 1
                    break
                x, y, th = _glue_reinject(k, u1, model, meas, delta)
                continue
            k, d = nearest(x, y, model)
            if k >= 0 and d <= tol:
                pending = k + 1
                continue
            dt = dt_U if k < 0 else pick_dt(d, dt_U, 0.0, kappa)
            z0, z1, u0, u1 = draw(seed, tag, i, j)
            j += 1
            sq = math.sqrt(dt)
            x = wrap1(x + sq * z0)
            y = wrap1(y + sq * z1)
            t += dt
            if t >= t_horizon:
                where = 0
                break
        out_where[i] = where
        out_visits[i] = visits
