"""Numba kernels for path simulation with an occupation clock.

All kernels share one stopping rule. A path stops at the first time ``s`` with
``occupation(s) >= occ_stop``, ``s >= time_stop`` and ``X_s`` in C. Separately
they report the first time the occupation reaches ``clock``, and optionally
the maximal intervals spent inside C. Chain paths use one uniform pair per
sojourn (holding time, next state); diffusion paths use one normal per Euler
step.

Each path is simulated by a function writing its in-C intervals into a fixed
buffer. On overflow the driver grows the buffer and replays the path, which
reproduces it exactly because the random numbers are counter-based. Keeping
array reallocation out of the inner loop matters: loop-carried array
reassignment costs numba roughly a factor of three per step.
"""

import math

import numba as nb
import numpy as np

from ._rng import normal_pair, uniform_pair

_STREAM_PATH = 0
_OVERFLOW = -1


@nb.njit(cache=True, nogil=True)
def _next_state(indptr, indices, cumprob, x, u):
    lo = indptr[x]
    hi = indptr[x + 1]
    j = lo + np.searchsorted(cumprob[lo:hi], u, side="right")
    if j >= hi:
        j = hi - 1
    return indices[j]


@nb.njit(cache=True, nogil=True)
def _grow(buf, nrec):
    out = np.empty((2 * buf.shape[0], 2))
    out[:nrec] = buf[:nrec]
    return out


@nb.njit(cache=True, nogil=True)
def _chain_path(indptr, indices, cumprob, exit_rate, in_c, x0, seed, path, thr, ostop, time_stop, horizon,
                keep, buf, nrec):
    """One chain path. Returns (clock time, stop time, censored, new record count or _OVERFLOW)."""
    cap = buf.shape[0]
    x = x0
    t = 0.0
    occ = 0.0
    draw = 0
    clock_time = np.inf
    open_a = -1.0
    open_b = -1.0
    while True:
        rate = exit_rate[x]
        u1, u2 = uniform_pair(seed, _STREAM_PATH, path, draw)
        draw += 1
        if rate > 0.0:
            t_next = t - math.log1p(-u1) / rate
        else:
            t_next = np.inf
        seg_end = min(t_next, horizon)
        if in_c[x]:
            if clock_time == np.inf:
                cross = t + max(thr - occ, 0.0)
                if cross <= seg_end:
                    clock_time = cross
            s_star = max(t + max(ostop - occ, 0.0), time_stop)
            stopping = s_star <= seg_end
            end = s_star if stopping else seg_end
            if keep and end > t:
                if open_b == t:
                    open_b = end
                else:
                    if open_b > open_a:
                        if nrec == cap:
                            return clock_time, np.inf, False, _OVERFLOW
                        buf[nrec, 0] = open_a
                        buf[nrec, 1] = open_b
                        nrec += 1
                    open_a = t
                    open_b = end
            occ += end - t
            if stopping:
                if keep and open_b > open_a:
                    if nrec == cap:
                        return clock_time, np.inf, False, _OVERFLOW
                    buf[nrec, 0] = open_a
                    buf[nrec, 1] = open_b
                    nrec += 1
                return clock_time, s_star, False, nrec
        if t_next >= horizon:
            if keep and open_b > open_a:
                if nrec == cap:
                    return clock_time, np.inf, True, _OVERFLOW
                buf[nrec, 0] = open_a
                buf[nrec, 1] = open_b
                nrec += 1
            return clock_time, np.inf, True, nrec
        t = t_next
        x = _next_state(indptr, indices, cumprob, x, u2)


@nb.njit(cache=True, nogil=True)
def chain_occupation(indptr, indices, cumprob, exit_rate, in_c, x0, seed, first_path, n,
                     clock, occ_stop, time_stop, horizon, keep):
    clock_time = np.full(n, np.inf)
    stop_time = np.full(n, np.inf)
    censored = np.zeros(n, np.bool_)
    buf = np.empty((1024, 2))
    owner = np.empty(1024, np.int64)
    nrec = 0
    for i in range(n):
        while True:
            ct, st, cens, new = _chain_path(indptr, indices, cumprob, exit_rate, in_c, x0, seed, first_path + i,
                                            clock[i], occ_stop[i], time_stop, horizon, keep, buf, nrec)
            if new != _OVERFLOW:
                break
            buf = _grow(buf, nrec)
        if new > owner.shape[0]:
            grown = np.empty(buf.shape[0], np.int64)
            grown[:nrec] = owner[:nrec]
            owner = grown
        owner[nrec:new] = i
        nrec = new
        clock_time[i] = ct
        stop_time[i] = st
        censored[i] = cens
    return clock_time, stop_time, censored, owner[:nrec].copy(), buf[:nrec, 0].copy(), buf[:nrec, 1].copy()


@nb.njit(cache=True, nogil=True)
def chain_full_path(indptr, indices, cumprob, exit_rate, x0, seed, path, horizon):
    times = np.empty(64)
    states = np.empty(64, np.int64)
    times[0] = 0.0
    states[0] = x0
    k = 1
    x = x0
    t = 0.0
    draw = 0
    while True:
        rate = exit_rate[x]
        u1, u2 = uniform_pair(seed, _STREAM_PATH, path, draw)
        draw += 1
        if rate <= 0.0:
            break
        t = t - math.log1p(-u1) / rate
        if t >= horizon:
            break
        x = _next_state(indptr, indices, cumprob, x, u2)
        if k == times.shape[0]:
            t2 = np.empty(2 * k)
            s2 = np.empty(2 * k, np.int64)
            t2[:k] = times
            s2[:k] = states
            times, states = t2, s2
        times[k] = t
        states[k] = x
        k += 1
    return times[:k], states[:k]


@nb.njit(cache=True, nogil=True)
def chain_states_at(indptr, indices, cumprob, exit_rate, x0, seed, first_path, n, t_obs):
    out = np.empty(n, np.int64)
    for i in range(n):
        path = first_path + i
        x = x0
        t = 0.0
        draw = 0
        while True:
            rate = exit_rate[x]
            u1, u2 = uniform_pair(seed, _STREAM_PATH, path, draw)
            draw += 1
            if rate <= 0.0:
                break
            t = t - math.log1p(-u1) / rate
            if t > t_obs:
                break
            x = _next_state(indptr, indices, cumprob, x, u2)
        out[i] = x
    return out


_DIFFUSION_KERNELS = {}


def diffusion_kernels(drift, sigma):
    """Occupation and full-path kernels specialised to one drift/sigma pair."""
    key = (drift, sigma)
    if key in _DIFFUSION_KERNELS:
        return _DIFFUSION_KERNELS[key]

    @nb.njit(nogil=True)
    def step(x, dt, sqdt, z, lo, hi):
        y = x + drift(x) * dt + sigma(x) * sqdt * z
        for _ in range(64):
            if y > hi:
                y = 2.0 * hi - y
            elif y < lo:
                y = 2.0 * lo - y
            else:
                break
        return min(max(y, lo), hi)

    @nb.njit(nogil=True)
    def one_path(x0, dt, lo, hi, c_lo, c_hi, seed, path, thr, ostop, time_stop, horizon, keep, buf, nrec):
        cap = buf.shape[0]
        sqdt = math.sqrt(dt)
        x = x0
        occ = 0.0
        clock_time = np.inf
        open_a = -1.0
        open_b = -1.0
        k = 0
        z1 = 0.0
        while True:
            t = k * dt
            t_next = (k + 1) * dt
            seg_end = min(t_next, horizon)
            if c_lo <= x <= c_hi:
                if clock_time == np.inf:
                    cross = t + max(thr - occ, 0.0)
                    if cross <= seg_end:
                        clock_time = cross
                s_star = max(t + max(ostop - occ, 0.0), time_stop)
                stopping = s_star <= seg_end
                end = s_star if stopping else seg_end
                if keep and end > t:
                    if open_b == t:
                        open_b = end
                    else:
                        if open_b > open_a:
                            if nrec == cap:
                                return clock_time, np.inf, False, _OVERFLOW
                            buf[nrec, 0] = open_a
                            buf[nrec, 1] = open_b
                            nrec += 1
                        open_a = t
                        open_b = end
                occ += end - t
                if stopping:
                    if keep and open_b > open_a:
                        if nrec == cap:
                            return clock_time, np.inf, False, _OVERFLOW
                        buf[nrec, 0] = open_a
                        buf[nrec, 1] = open_b
                        nrec += 1
                    return clock_time, s_star, False, nrec
            if t_next >= horizon:
                if keep and open_b > open_a:
                    if nrec == cap:
                        return clock_time, np.inf, True, _OVERFLOW
                    buf[nrec, 0] = open_a
                    buf[nrec, 1] = open_b
                    nrec += 1
                return clock_time, np.inf, True, nrec
            if k % 2 == 0:
                z0, z1 = normal_pair(seed, _STREAM_PATH, path, k // 2)
                z = z0
            else:
                z = z1
            x = step(x, dt, sqdt, z, lo, hi)
            k += 1

    @nb.njit(nogil=True)
    def occupation(x0, dt, lo, hi, c_lo, c_hi, seed, first_path, n, clock, occ_stop, time_stop, horizon, keep):
        clock_time = np.full(n, np.inf)
        stop_time = np.full(n, np.inf)
        censored = np.zeros(n, np.bool_)
        buf = np.empty((1024, 2))
        owner = np.empty(1024, np.int64)
        nrec = 0
        for i in range(n):
            while True:
                ct, st, cens, new = one_path(x0, dt, lo, hi, c_lo, c_hi, seed, first_path + i, clock[i],
                                             occ_stop[i], time_stop, horizon, keep, buf, nrec)
                if new != _OVERFLOW:
                    break
                buf = _grow(buf, nrec)
            if new > owner.shape[0]:
                grown = np.empty(buf.shape[0], np.int64)
                grown[:nrec] = owner[:nrec]
                owner = grown
            owner[nrec:new] = i
            nrec = new
            clock_time[i] = ct
            stop_time[i] = st
            censored[i] = cens
        return clock_time, stop_time, censored, owner[:nrec].copy(), buf[:nrec, 0].copy(), buf[:nrec, 1].copy()

    @nb.njit(nogil=True)
    def full_path(x0, dt, lo, hi, seed, path, n_steps):
        xs = np.empty(n_steps + 1)
        xs[0] = x0
        sqdt = math.sqrt(dt)
        z1 = 0.0
        for k in range(n_steps):
            if k % 2 == 0:
                z0, z1 = normal_pair(seed, _STREAM_PATH, path, k // 2)
                z = z0
            else:
                z = z1
            xs[k + 1] = step(xs[k], dt, sqdt, z, lo, hi)
        return xs

    _DIFFUSION_KERNELS[key] = (occupation, full_path)
    return occupation, full_path
