"""Free-boundary solver: backward Riccati integration of the log-derivative,
shooting on the dividend threshold, value-function assembly, and variational
inequality verification.

The working object is g = v'/v, which solves
    sigma^2/2 * g' + mu * g + (1-R)/2 * sigma^2 * g^2 = rho + gamma,
    g(b) = 1/psi_plus(b),
integrated backward from the candidate threshold b to 0.  The same pass
co-integrates the linear equation for h = v^(1-R),
    sigma^2/2 * h'' + mu * h' = (1-R)(rho+gamma) * h,
so every run carries two independent routes to the same value function;
their pointwise consistency is a standing diagnostic.  v itself is
recovered from the exponential representation v(x) = psi_plus(b) *
exp(int_b^x g), with the integral carried as an extra state so it shares
the integrator's error control instead of a grid quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DivergedError, SolvabilityError, SolverError
from .model import AssumptionReport, SurplusModel, check_assumptions, psi_roots

DEFAULT_RTOL = 1e-12
DEFAULT_ATOL = 1e-14
G_CAP = 1e7               # |g| above this means v has effectively hit zero
DEFAULT_TOL_B = 1e-12
DEFAULT_TOL_VALUE = 1e-8
TOL_PDE = 1e-6            # interior residual tolerance, relative to rho*v
TOL_SIGN = 1e-8           # exterior sign tolerance, absolute


@dataclass(frozen=True)
class StepStats:
    accepted: int
    rejected: int
    min_step: float

    def to_dict(self):
        return {"accepted": self.accepted, "rejected": self.rejected,
                "min_step": self.min_step}


@dataclass(frozen=True)
class OdeRun:
    """One backward integration from x = b toward 0.

    States on the descending grid: g (log-derivative route), h and hp
    (linear route), and the running integral of g from b.  The dense
    interpolant is kept for later evaluation at arbitrary points.
    """

    b: float
    gamma: float
    x_grid: np.ndarray
    g_values: np.ndarray
    h_values: np.ndarray
    hp_values: np.ndarray
    integral_values: np.ndarray   # int_b^x g(u) du on x_grid
    psi_plus_b: float
    step_stats: StepStats
    reached_zero: bool
    _dense: object = field(repr=False, compare=False, default=None)

    def dense_eval(self, x):
        """(g, h, hp, integral) from the integrator's own interpolant."""
        y = self._dense(np.asarray(x, dtype=float))
        return y[0], y[1], y[2], y[3]

    def value(self, x):
        """v_{b,gamma}(x) via the exponential representation."""
        _, _, _, integ = self.dense_eval(x)
        return self.psi_plus_b * np.exp(integ)

    def to_header(self):
        return {"b": self.b, "gamma": self.gamma,
                "step_stats": self.step_stats.to_dict()}


def _coeff_funcs(model: SurplusModel):
    """Scalar-fast (mu, sigma^2) evaluators for the integrator hot loop."""
    from .model import OrnsteinUhlenbeck

    fam = model.family
    if isinstance(fam, OrnsteinUhlenbeck):
        kappa, m, s2 = fam.kappa, fam.m, fam.sigma_bar ** 2
        return (lambda x: kappa * (m - x)), (lambda x: s2)
    mu_itp, sig_itp = fam._mu_itp, fam._sigma_itp
    return (lambda x: float(mu_itp(x))), (lambda x: float(sig_itp(x)) ** 2)


def _riccati_rhs(model: SurplusModel, gamma: float):
    rho_g = model.rho + gamma
    one_m_r = 1.0 - model.R
    mu_f, s2_f = _coeff_funcs(model)

    def rhs(x, y):
        g, h, hp, _ = y
        mu = mu_f(x)
        s2 = s2_f(x)
        dg = (rho_g - mu * g - 0.5 * one_m_r * s2 * g * g) * 2.0 / s2
        dhp = (one_m_r * rho_g * h - mu * hp) * 2.0 / s2
        return (dg, hp, dhp, g)

    return rhs


def integrate_g(model: SurplusModel, b: float, gamma: float = 0.0,
                x_eval: Optional[np.ndarray] = None,
                rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> OdeRun:
    """Integrate the coupled (g, h, h', int g) system backward from b to 0.

    Raises DivergedError when g crosses the blow-up cap before reaching 0,
    which is how a candidate threshold with v hitting zero announces itself.
    """
    if b <= 0:
        raise SolverError("threshold b must be positive")
    pp = psi_roots(model, b).psi_plus
    y0 = (1.0 / pp, pp ** (1.0 - model.R), (1.0 - model.R) * pp ** (-model.R), 0.0)

    def blow_up(x, y):
        return G_CAP - abs(y[0])

    blow_up.terminal = True

    if x_eval is None:
        x_eval = np.linspace(b, 0.0, 257)
    sol = solve_ivp(
        _riccati_rhs(model, gamma), (b, 0.0), y0, method="DOP853",
        rtol=rtol, atol=atol, dense_output=True, events=blow_up, t_eval=x_eval,
    )
    reached_zero = sol.status == 0
    if sol.status == 1:
        last_x = float(sol.t_events[0][0]) if sol.t_events[0].size else float(sol.t[-1])
        raise DivergedError(b, last_x)
    if not sol.success:
        raise SolverError(f"integration failed at b={b!r}: {sol.message}")

    steps = sol.sol.ts if hasattr(sol.sol, "ts") else sol.t
    accepted = int(len(steps) - 1)
    # DOP853 uses 12 rhs calls per attempted step plus the initial evaluation
    attempted = max(accepted, (sol.nfev - 1) // 12)
    dsteps = np.abs(np.diff(steps))
    return OdeRun(
        b=float(b), gamma=float(gamma),
        x_grid=sol.t, g_values=sol.y[0], h_values=sol.y[1],
        hp_values=sol.y[2], integral_values=sol.y[3],
        psi_plus_b=pp,
        step_stats=StepStats(accepted, int(attempted - accepted),
                             float(dsteps.min()) if dsteps.size else 0.0),
        reached_zero=reached_zero,
        _dense=sol.sol,
    )


def route_gap(model: SurplusModel, run: OdeRun) -> float:
    """sup_x |g - h'/((1-R)h)| / max(|g|, 1) over the run's grid."""
    q = run.hp_values / ((1.0 - model.R) * run.h_values)
    return float(np.max(np.abs(run.g_values - q) / np.maximum(np.abs(run.g_values), 1.0)))


def value_at_zero(model: SurplusModel, run: OdeRun) -> float:
    """psi_plus(b) * exp(int_b^0 g), the shooting target quantity."""
    if not run.reached_zero:
        raise SolverError("run did not reach x = 0")
    return float(run.psi_plus_b * math.exp(float(run.integral_values[-1])))


def shooting_residual(model: SurplusModel, b: float, gamma: float = 0.0,
                      rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> float:
    """v_{b,gamma}(0) - xi0, with blow-up mapped to -xi0 (v hit zero first)."""
    try:
        run = integrate_g(model, b, gamma, x_eval=np.array([b, 0.0]),
                          rtol=rtol, atol=atol)
    except DivergedError:
        return -model.xi0
    return value_at_zero(model, run) - model.xi0


def shoot(model: SurplusModel, tol_b: float = DEFAULT_TOL_B,
          tol_value: float = DEFAULT_TOL_VALUE,
          report: Optional[AssumptionReport] = None,
          rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> float:
    """Bisect the threshold on (b_lower + eps, b_hat) at gamma = 0.

    Returns b_star with |v_{b*}(0) - xi0| <= tol_value and final bracket
    width <= tol_b.
    """
    if report is None:
        report = check_assumptions(model)
    report.require()
    b_hat = report.b_hat
    eps0 = max(1e-6 * b_hat, 1e-9)
    lo = report.b_lower + eps0
    hi = b_hat - 1e-13 * b_hat
    f_lo = shooting_residual(model, lo, 0.0, rtol, atol)
    f_hi = shooting_residual(model, hi, 0.0, rtol, atol)
    if not (f_lo > 0.0 >= f_hi):
        raise SolvabilityError(lo, f_lo, hi, f_hi)

    f_mid = f_lo
    mid = lo
    while hi - lo > tol_b or abs(f_mid) > tol_value:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:   # float resolution floor
            break
        f_mid = shooting_residual(model, mid, 0.0, rtol, atol)
        if f_mid > 0.0:
            lo = mid
        else:
            hi = mid
    if abs(f_mid) > tol_value:
        raise SolverError(
            f"bisection stalled: |residual|={abs(f_mid):.3e} > tol_value={tol_value:.1e}"
        )
    return mid


def continuation_diagnostic(model: SurplusModel, n_levels: int = 3,
                            report: Optional[AssumptionReport] = None) -> list:
    """Thresholds b*(gamma) for gamma = -rho/2, -rho/4, ... (diagnostic only).

    The sequence should increase toward the gamma = 0 threshold; the main
    solve does not need it, the existence argument does.
    """
    if report is None:
        report = check_assumptions(model)
    report.require()
    out = []
    for k in range(1, n_levels + 1):
        gamma = -model.rho / (2.0 ** k)
        b_g = _bisect_at_gamma(model, gamma, report)
        out.append((gamma, b_g))
    return out


def _bisect_at_gamma(model, gamma, report, tol_b=1e-10):
    eps0 = max(1e-6 * report.b_hat, 1e-9)
    lo, hi = report.b_lower + eps0, report.b_hat * (1 - 1e-13)
    f_lo = shooting_residual(model, lo, gamma)
    f_hi = shooting_residual(model, hi, gamma)
    if not (f_lo > 0.0 >= f_hi):
        raise SolvabilityError(lo, f_lo, hi, f_hi)
    while hi - lo > tol_b:
        mid = 0.5 * (lo + hi)
        if shooting_residual(model, mid, gamma) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class FreeBoundarySolution:
    b_star: float
    x_grid: np.ndarray
    v: np.ndarray
    v_prime: np.ndarray
    v_double_prime: np.ndarray
    residual_interior: np.ndarray   # L v on (0, b*], cross-route evaluation
    residual_exterior: np.ndarray   # L v on (b*, x_max]
    smooth_fit_gap: float           # |v''(b*)|
    shooting_residual: float        # |v_{b*}(0) - xi0|
    route_gap: float
    mu_bar: float
    step_stats: StepStats
    rho: float
    R: float
    xi0: float

    def interior_mask(self):
        return (self.x_grid > 0.0) & (self.x_grid <= self.b_star)

    def exterior_mask(self):
        return self.x_grid > self.b_star

    def value_at(self, x):
        """Cubic Hermite evaluation off the stored grid (v and v' are exact
        grid data, so the interpolant is O(dx^4) accurate)."""
        from scipy.interpolate import CubicHermiteSpline

        itp = CubicHermiteSpline(self.x_grid, self.v, self.v_prime)
        return itp(x)

    def to_header(self):
        return {
            "b_star": self.b_star,
            "smooth_fit_gap": self.smooth_fit_gap,
            "shooting_residual": self.shooting_residual,
            "route_gap": self.route_gap,
            "mu_bar": self.mu_bar,
            "rho": self.rho,
            "R": self.R,
            "xi0": self.xi0,
            "x_max": float(self.x_grid[-1]),
            "n_grid": int(self.x_grid.size),
            "step_stats": self.step_stats.to_dict(),
        }


def nonlinear_operator(model: SurplusModel, x, v, vp, vpp):
    """L v = sigma^2/2 v'' + mu v' - R sigma^2/2 (v')^2/v - rho v."""
    mu = model.mu(x)
    s2 = model.sigma(x) ** 2
    return 0.5 * s2 * vpp + mu * vp - 0.5 * model.R * s2 * vp * vp / v - model.rho * v


def build_value_function(model: SurplusModel, b_star: float,
                         x_max: Optional[float] = None, n_grid: int = 2001,
                         report: Optional[AssumptionReport] = None,
                         rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL
                         ) -> FreeBoundarySolution:
    """Assemble v on [0, x_max]: converged run below b*, linear continuation
    x - b* + psi_plus(b*) above.

    v' = g*v on the interior.  v'' is reconstructed from the linear-route
    states (v''/v = q' + q^2 with q = h'/((1-R)h)), never from finite
    differences; because that reconstruction is independent of the Riccati
    identity, the interior residual L v is a real cross-route consistency
    diagnostic rather than zero by construction.
    """
    if report is None:
        report = check_assumptions(model)
    if x_max is None:
        b_hat = report.b_hat if report.b_hat is not None else 3.0 * b_star
        x_max = 3.0 * b_hat
    if x_max <= b_star:
        raise SolverError("x_max must exceed b_star")

    x_grid = np.linspace(0.0, float(x_max), int(n_grid))
    inner = x_grid[x_grid <= b_star]
    run = integrate_g(model, b_star, 0.0,
                      x_eval=np.concatenate(([b_star], inner[::-1])),
                      rtol=rtol, atol=atol)

    g, h, hp, integ = run.dense_eval(inner)
    pp = run.psi_plus_b
    v_in = pp * np.exp(integ)
    vp_in = g * v_in

    # linear-route second derivative: q = h'/((1-R)h), q' from the h-ODE
    one_m_r = 1.0 - model.R
    mu_in = model.mu(inner)
    s2_in = model.sigma(inner) ** 2
    hpp = (one_m_r * model.rho * h - mu_in * hp) * 2.0 / s2_in
    q = hp / (one_m_r * h)
    qp = (hpp * h - hp * hp) / (one_m_r * h * h)
    vpp_in = v_in * (qp + q * q)

    outer = x_grid[x_grid > b_star]
    v_out = outer - b_star + pp
    vp_out = np.ones_like(outer)
    vpp_out = np.zeros_like(outer)

    v = np.concatenate([v_in, v_out])
    vp = np.concatenate([vp_in, vp_out])
    vpp = np.concatenate([vpp_in, vpp_out])

    lv = nonlinear_operator(model, x_grid, v, vp, vpp)
    in_mask = x_grid <= b_star
    residual_interior = lv[in_mask]
    residual_exterior = lv[~in_mask]

    g_b, h_b, hp_b, _ = run.dense_eval(b_star)
    q_b = hp_b / (one_m_r * h_b)
    hpp_b = (one_m_r * model.rho * h_b - float(model.mu(b_star)) * hp_b) \
        * 2.0 / float(model.sigma(b_star)) ** 2
    qp_b = (hpp_b * h_b - hp_b * hp_b) / (one_m_r * h_b * h_b)
    smooth_fit_gap = abs(float(pp * (qp_b + q_b * q_b)))

    return FreeBoundarySolution(
        b_star=float(b_star),
        x_grid=x_grid, v=v, v_prime=vp, v_double_prime=vpp,
        residual_interior=residual_interior,
        residual_exterior=residual_exterior,
        smooth_fit_gap=smooth_fit_gap,
        shooting_residual=abs(float(v_in[0]) - model.xi0),
        route_gap=route_gap(model, run),
        mu_bar=report.mu_bar,
        step_stats=run.step_stats,
        rho=model.rho, R=model.R, xi0=model.xi0,
    )


@dataclass(frozen=True)
class ViReport:
    passed: bool
    worst_interior_residual: float      # max |L v| / (rho v) on (0, b*]
    worst_interior_residual_at: float
    worst_exterior_sign: float          # max L v on (b*, x_max]
    worst_exterior_sign_at: float
    min_v_prime_interior: float
    boundary_gap: float                 # |v(0) - xi0|
    lower_bound_gap: float              # min(v - (x + xi0))
    upper_bound_gap: float              # max(v - (x + xi0 + mu_bar/rho))
    route_gap: float
    checks: dict

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "passed", "worst_interior_residual", "worst_interior_residual_at",
            "worst_exterior_sign", "worst_exterior_sign_at",
            "min_v_prime_interior", "boundary_gap",
            "lower_bound_gap", "upper_bound_gap", "route_gap")}
        d["checks"] = self.checks
        return d


def verify_vi(sol: FreeBoundarySolution, model: SurplusModel,
              tol_pde: float = TOL_PDE, tol_sign: float = TOL_SIGN) -> ViReport:
    """Check the variational inequality max(L v, 1 - v') = 0 piece by piece."""
    in_mask = sol.interior_mask()
    ex_mask = sol.exterior_mask()
    x_in = sol.x_grid[in_mask]
    x_ex = sol.x_grid[ex_mask]

    rel_res = np.abs(sol.residual_interior[1:]) / (model.rho * sol.v[in_mask])
    i_worst = int(np.argmax(rel_res)) if rel_res.size else 0
    worst_int = float(rel_res[i_worst]) if rel_res.size else 0.0
    worst_int_at = float(x_in[i_worst]) if rel_res.size else 0.0

    j_worst = int(np.argmax(sol.residual_exterior)) if x_ex.size else 0
    worst_ext = float(np.max(sol.residual_exterior)) if x_ex.size else -np.inf
    worst_ext_at = float(x_ex[j_worst]) if x_ex.size else float("nan")

    vp_in = sol.v_prime[in_mask]
    min_vp = float(np.min(vp_in)) if vp_in.size else 1.0
    boundary_gap = abs(float(sol.v[0]) - model.xi0)

    floor = sol.x_grid + model.xi0
    ceil = floor + sol.mu_bar / model.rho
    lower_gap = float(np.min(sol.v - floor))
    upper_gap = float(np.max(sol.v - ceil))

    checks = {
        "interior_pde": worst_int <= tol_pde,
        "exterior_sign": worst_ext <= tol_sign,
        "v_prime_interior": min_vp >= 1.0 - 1e-9,
        "v_prime_exterior": bool(np.all(sol.v_prime[ex_mask] == 1.0)),
        "boundary_value": boundary_gap <= 10.0 * DEFAULT_TOL_VALUE,
        "value_floor": lower_gap >= -1e-7,
        "value_ceiling": upper_gap <= 1e-7,
    }
    return ViReport(
        passed=all(checks.values()),
        worst_interior_residual=worst_int,
        worst_interior_residual_at=worst_int_at,
        worst_exterior_sign=worst_ext,
        worst_exterior_sign_at=worst_ext_at,
        min_v_prime_interior=min_vp,
        boundary_gap=boundary_gap,
        lower_bound_gap=lower_gap,
        upper_bound_gap=upper_gap,
        route_gap=sol.route_gap,
        checks=checks,
    )


def classical_solve(model: SurplusModel, x_max: Optional[float] = None,
                    n_grid: int = 2001, tol_b: float = DEFAULT_TOL_B,
                    tol_value: float = DEFAULT_TOL_VALUE) -> FreeBoundarySolution:
    """R = 0 limit: same pipeline, linear equation throughout."""
    if model.R != 0.0:
        raise SolverError("classical_solve requires R = 0")
    report = check_assumptions(model)
    b0 = shoot(model, tol_b=tol_b, tol_value=tol_value, report=report)
    return build_value_function(model, b0, x_max=x_max, n_grid=n_grid, report=report)


def solve(model: SurplusModel, x_max: Optional[float] = None, n_grid: int = 2001,
          tol_b: float = DEFAULT_TOL_B, tol_value: float = DEFAULT_TOL_VALUE
          ) -> FreeBoundarySolution:
    """check -> shoot -> build, the standard pipeline for any R in [0, 1)."""
    report = check_assumptions(model)
    b_star = shoot(model, tol_b=tol_b, tol_value=tol_value, report=report)
    return build_value_function(model, b_star, x_max=x_max, n_grid=n_grid, report=report)
