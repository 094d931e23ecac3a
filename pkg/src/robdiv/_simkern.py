"""Numba path kernel with counter-based per-path random streams.

Each path's normals are a pure function of (seed, path index, draw counter):
a SplitMix64 output function keyed per path feeds a Marsaglia polar
transform.  Every path is reproducible in isolation, so results are
bit-identical for any thread count or batching provided the reduction
order is fixed (the reducers in sim.py aggregate in path order).

Per-x coefficients arrive as one packed table; row j holds
(drift*dt, sigma*sqrt(dt), exp(tilt_rate*dt)) at x_j so one interpolation
touches adjacent memory.  tilt_rate itself is only needed at ruin and
rides in its own array.
"""

import numpy as np
from numba import njit, prange

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def _path_key(seed, idx):
    return _mix64(np.uint64(seed) ^ _mix64(np.uint64(idx) + _GOLDEN))


@njit(inline="always")
def _uniform(key, counter):
    # in (0, 1]
    bits = _mix64(key + np.uint64(counter) * _GOLDEN)
    return (np.float64(bits >> np.uint64(11)) + 1.0) * _U53


@njit(inline="always")
def _normal_pair(key, counter):
    """Marsaglia polar transform; returns (z1, z2, counter consumed)."""
    while True:
        u = 2.0 * _uniform(key, counter) - 1.0
        v = 2.0 * _uniform(key, counter + 1) - 1.0
        counter += 2
        s = u * u + v * v
        if 0.0 < s < 1.0:
            f = np.sqrt(-2.0 * np.log(s) / s)
            return u * f, v * f, counter


@njit(cache=True)
def _one_path(idx, seed, x0, b, dt, n_steps, rho,
              dx_inv, tab, tiltrate, theta_grid, shift_measure):
    """Simulate one path.

    Returns (ruin_time, div_plain, div_tilted, w_end, x_end, censored,
    anomaly, rn_weight).  div_plain accumulates exp(-rho t) dD, div_tilted
    accumulates exp(tilt - rho t) dD; w_end is exp(tilt - rho t) at the
    path's end (ruin or censoring).  tab rows include the sigma*theta
    drift shift only when shift_measure is True; otherwise the path runs
    under the reference measure and the Girsanov log-likelihood
    accumulates into rn_weight.
    """
    if x0 <= 0.0:
        return 0.0, 0.0, 0.0, 1.0, 0.0, False, False, 1.0

    key = _path_key(seed, idx)
    div_plain = 0.0
    div_tilted = 0.0
    x = x0
    if x0 > b:
        pay0 = x0 - b
        div_plain += pay0
        div_tilted += pay0
        x = b

    w = 1.0            # running exp(tilt)
    df = 1.0           # running exp(-rho t)
    loglik = 0.0
    df_step = np.exp(-rho * dt)
    sq_dt = np.sqrt(dt)
    counter = 0
    spare = 0.0
    have_spare = False

    for k in range(n_steps):
        if have_spare:
            z = spare
            have_spare = False
        else:
            z, spare, counter = _normal_pair(key, counter)
            have_spare = True

        pos = x * dx_inv
        j = int(pos)
        wt = pos - j
        d_dt = tab[j, 0] + wt * (tab[j + 1, 0] - tab[j, 0])
        s_sq = tab[j, 1] + wt * (tab[j + 1, 1] - tab[j, 1])
        wfac = tab[j, 2] + wt * (tab[j + 1, 2] - tab[j, 2])
        x_new = x + d_dt + s_sq * z
        if not np.isfinite(x_new):
            return np.nan, div_plain, div_tilted, w * df, x, True, True, np.exp(loglik)

        if not shift_measure:
            th = theta_grid[j] + wt * (theta_grid[j + 1] - theta_grid[j])
            loglik += th * sq_dt * z - 0.5 * th * th * dt

        if x_new <= 0.0:
            frac = x / (x - x_new)
            tau = (k + frac) * dt
            rate = tiltrate[j] + wt * (tiltrate[j + 1] - tiltrate[j])
            w_tau = w * df * np.exp((rate - rho) * frac * dt)
            return tau, div_plain, div_tilted, w_tau, 0.0, False, False, np.exp(loglik)

        w = w * wfac
        df = df * df_step
        if x_new > b:
            pay = x_new - b
            div_plain += df * pay
            div_tilted += w * df * pay
            x = b
        else:
            x = x_new

    return np.nan, div_plain, div_tilted, w * df, x, True, False, np.exp(loglik)


@njit(parallel=True, cache=True)
def run_paths(n_paths, seed, x0, b, dt, n_steps, rho,
              dx_inv, tab, tiltrate, theta_grid, shift_measure,
              ruin_time, div_plain, div_tilted, w_end, x_end,
              censored, anomaly, rn_weight):
    for i in prange(n_paths):
        (ruin_time[i], div_plain[i], div_tilted[i], w_end[i], x_end[i],
         censored[i], anomaly[i], rn_weight[i]) = _one_path(
            i, seed, x0, b, dt, n_steps, rho,
            dx_inv, tab, tiltrate, theta_grid, shift_measure)
