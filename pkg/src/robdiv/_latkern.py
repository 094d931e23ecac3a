"""Numba kernels for the backward lattice recursions.

All value arrays are stored in time-0 discounted units: absorbing at ruin
pays exp(-rho t) xi0, the terminal layer is the ruin proxy
exp(-rho t_max) xi0, interior steps are plain conditional expectations.
The classical (K), lower-envelope (u, linear aggregator) and recursive
(V, power aggregator) solves run in one backward pass so the recursive
iterates can be checked against the [u, K^(1-R)] sandwich slice by slice.
"""

import numpy as np
from numba import njit

PICARD_MAX = 200


@njit(inline="always")
def _expect(vals, pu, pm, pd, i):
    return pu[i] * vals[i + 1] + pm[i] * vals[i] + pd[i] * vals[i - 1]


@njit(inline="always")
def _expect_top(vals, pu, pm, pd, n):
    # reflecting top node: the up branch stays put
    return (pu[n] + pm[n]) * vals[n] + pd[n] * vals[n - 1]


@njit(cache=True)
def backward_joint(pu, pm, pd, dd_top, rho, xi0, one_m_r, dt, n_steps,
                   tol, checkpoint_every,
                   k_out, u_out, v_out, picard_iters,
                   k_checks, u_checks, v_checks,
                   stats):
    """Backward pass computing K (classical), u (linear-aggregator lower
    envelope) and V (recursive utility) together.

    stats[0] = worst (u - V) violation, stats[1] = worst (V - K^(1-R)) node
    violation, stats[2] = worst iterate excursion below u at the reflecting
    node, stats[3] = worst iterate excursion above K^(1-R) at the reflecting
    node, stats[4] = max Picard residual at convergence, stats[5] = number
    of slices where damping engaged.
    """
    n = pu.shape[0] - 1          # top node index
    n_nodes = pu.shape[0]
    r_coef = 1.0 - one_m_r       # R

    k_cur = np.empty(n_nodes)
    u_cur = np.empty(n_nodes)
    v_cur = np.empty(n_nodes)
    k_new = np.empty(n_nodes)
    u_new = np.empty(n_nodes)
    v_new = np.empty(n_nodes)

    term = np.exp(-rho * dt * n_steps) * xi0
    for i in range(n_nodes):
        k_cur[i] = term
        u_cur[i] = term ** one_m_r
        v_cur[i] = term ** one_m_r

    n_checks = k_checks.shape[0]

    for step in range(n_steps - 1, -1, -1):
        t = step * dt
        disc = np.exp(-rho * t)
        payout = disc * xi0
        pay_pow = payout ** one_m_r

        k_new[0] = payout
        u_new[0] = pay_pow
        v_new[0] = pay_pow
        for i in range(1, n):
            k_new[i] = _expect(k_cur, pu, pm, pd, i)
            u_new[i] = _expect(u_cur, pu, pm, pd, i)
            v_new[i] = _expect(v_cur, pu, pm, pd, i)

        dd = disc * dd_top
        # classical: linear in dD
        a_k = _expect_top(k_cur, pu, pm, pd, n)
        k_new[n] = a_k + dd

        # lower envelope: aggregator disc*(1 - R*u) gives a closed form
        a_u = _expect_top(u_cur, pu, pm, pd, n)
        u_new[n] = (a_u + dd * 1.0) / (1.0 + r_coef * dd)

        # recursive utility: damped Picard from the lower envelope
        a_v = _expect_top(v_cur, pu, pm, pd, n)
        upper = k_new[n] ** one_m_r
        lower = u_new[n]
        v = lower
        damped = False
        prev_delta = 0.0
        it = 0
        resid = 0.0
        for it in range(1, PICARD_MAX + 1):
            # aggregator disc*(1-R)*v^(-R/(1-R)) against the physical
            # dividend dd_top; dd already carries the disc factor
            phi = a_v + one_m_r * v ** (-r_coef / one_m_r) * dd
            delta = phi - v
            resid = abs(delta)
            if damped:
                v_next = v + 0.5 * delta
            else:
                v_next = phi
            if it >= 2 and delta * prev_delta < 0.0 and not damped:
                damped = True
                stats[5] += 1.0
                v_next = v + 0.5 * delta
            prev_delta = delta
            # sandwich bookkeeping for every iterate
            if v_next < lower:
                exc = lower - v_next
                if exc > stats[2]:
                    stats[2] = exc
            if v_next > upper:
                exc = v_next - upper
                if exc > stats[3]:
                    stats[3] = exc
            if resid <= tol * max(1.0, abs(v)):
                v = v_next
                break
            v = v_next
        picard_iters[step] = it
        if resid > stats[4]:
            stats[4] = resid
        v_new[n] = v

        # node-wise bound bookkeeping
        for i in range(n_nodes):
            du = u_new[i] - v_new[i]
            if du > stats[0]:
                stats[0] = du
            dk = v_new[i] - k_new[i] ** one_m_r
            if dk > stats[1]:
                stats[1] = dk

        for i in range(n_nodes):
            k_cur[i] = k_new[i]
            u_cur[i] = u_new[i]
            v_cur[i] = v_new[i]

        if checkpoint_every > 0 and step % checkpoint_every == 0:
            ci = step // checkpoint_every
            if ci < n_checks:
                for i in range(n_nodes):
                    k_checks[ci, i] = k_cur[i]
                    u_checks[ci, i] = u_cur[i]
                    v_checks[ci, i] = v_cur[i]

    for i in range(n_nodes):
        k_out[i] = k_cur[i]
        u_out[i] = u_cur[i]
        v_out[i] = v_cur[i]


@njit(cache=True)
def backward_robust(pu, pm, pd, dd_top, sig_nodes, dx, rho, xi0, r_coef,
                    dt, n_steps, checkpoint_every,
                    v_out, theta_out, v_checks, stats):
    """Backward pass for the ambiguity-penalized value.

    The inner minimization over the drift tilt is closed-form through the
    martingale-difference coefficient Z: the node update solves
        V = C - dt * R * Z^2 / (2 V)
    whose unique positive fixed point is the larger quadratic root.  The
    implied tilt theta* = -R Z / V is recorded at time 0 and checked
    against the probability box; stats[0] counts nodes where it would have
    to be clamped, stats[1] tracks the worst |theta| / theta_box ratio.
    """
    n = pu.shape[0] - 1
    n_nodes = pu.shape[0]

    v_cur = np.empty(n_nodes)
    v_new = np.empty(n_nodes)
    z_loc = np.empty(n_nodes)

    term = np.exp(-rho * dt * n_steps) * xi0
    for i in range(n_nodes):
        v_cur[i] = term

    n_checks = v_checks.shape[0]

    for step in range(n_steps - 1, -1, -1):
        t = step * dt
        disc = np.exp(-rho * t)
        payout = disc * xi0
        v_new[0] = payout
        dd = disc * dd_top

        # martingale-difference coefficient from the next slice
        for i in range(1, n):
            z_loc[i] = sig_nodes[i] * (v_cur[i + 1] - v_cur[i - 1]) / (2.0 * dx)
        z_loc[n] = sig_nodes[n] * ((v_cur[n] + disc * dx) - v_cur[n - 1]) / (2.0 * dx)
        z_loc[0] = 0.0

        for i in range(1, n_nodes):
            if i < n:
                c = _expect(v_cur, pu, pm, pd, i)
            else:
                c = _expect_top(v_cur, pu, pm, pd, n) + dd
            a = 0.5 * dt * r_coef * z_loc[i] * z_loc[i]
            disc_quad = c * c - 4.0 * a
            if disc_quad < 0.0:
                disc_quad = 0.0
            v_new[i] = 0.5 * (c + np.sqrt(disc_quad))

        for i in range(n_nodes):
            v_cur[i] = v_new[i]

        if checkpoint_every > 0 and step % checkpoint_every == 0:
            ci = step // checkpoint_every
            if ci < n_checks:
                for i in range(n_nodes):
                    v_checks[ci, i] = v_cur[i]

        if step == 0:
            for i in range(n_nodes):
                if v_cur[i] > 0.0:
                    theta_out[i] = -r_coef * z_loc[i] / v_cur[i]
                else:
                    theta_out[i] = 0.0
                box = pu[i] if pu[i] < pd[i] else pd[i]
                theta_box = 2.0 * dx * box / (sig_nodes[i] * dt) if sig_nodes[i] > 0 else np.inf
                if theta_box > 0:
                    ratio = abs(theta_out[i]) / theta_box
                    if ratio > stats[1]:
                        stats[1] = ratio
                    if ratio > 1.0:
                        stats[0] += 1.0

    for i in range(n_nodes):
        v_out[i] = v_cur[i]
