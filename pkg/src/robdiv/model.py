"""Surplus-model layer: drift/volatility families, quadratic root structure,
and the solvability landmarks (b_lower, b_upper, b_hat, mu_bar) with their
pass/fail report.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import AssumptionError, BeyondUpperBoundError, ConfigError

ROOT_TOL = 1e-10          # bisection tolerance in x for all landmark roots
MONOTONE_SLACK = 1e-9     # finite-difference slack when testing monotonicity


@dataclass(frozen=True)
class OrnsteinUhlenbeck:
    """mu(x) = kappa*(m - x), sigma(x) = sigma_bar."""

    kappa: float
    m: float
    sigma_bar: float

    def __post_init__(self):
        if self.kappa <= 0 or self.m <= 0 or self.sigma_bar <= 0:
            raise ConfigError("OU family needs kappa, m, sigma_bar > 0")

    def mu(self, x):
        return self.kappa * (self.m - np.asarray(x, dtype=float))

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, self.sigma_bar)

    def to_dict(self):
        return {"kappa": self.kappa, "m": self.m, "sigma_bar": self.sigma_bar}


@dataclass(frozen=True)
class TabulatedC1:
    """Drift and volatility given on a grid, interpolated with a monotone
    cubic (PCHIP), which is C1 as the regularity conditions require; linear
    interpolation would only be C0 and is not used.
    """

    x_grid: tuple
    mu_values: tuple
    sigma_values: tuple
    _mu_itp: PchipInterpolator = field(init=False, repr=False, compare=False)
    _sigma_itp: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xg = np.asarray(self.x_grid, dtype=float)
        mg = np.asarray(self.mu_values, dtype=float)
        sg = np.asarray(self.sigma_values, dtype=float)
        if xg.ndim != 1 or xg.size < 4:
            raise ConfigError("tabulated family needs at least 4 grid points")
        if not (np.all(np.diff(xg) > 0) and xg[0] <= 0.0):
            raise ConfigError("x grid must be strictly increasing and start at <= 0")
        if mg.shape != xg.shape or sg.shape != xg.shape:
            raise ConfigError("mu/sigma tables must match the x grid")
        if np.any(sg <= 0):
            raise ConfigError("sigma must be nonzero (positive) on the grid")
        if np.any(np.diff(sg) < -MONOTONE_SLACK):
            raise ConfigError("sigma table must be nondecreasing")
        object.__setattr__(self, "x_grid", tuple(xg))
        object.__setattr__(self, "mu_values", tuple(mg))
        object.__setattr__(self, "sigma_values", tuple(sg))
        object.__setattr__(self, "_mu_itp", PchipInterpolator(xg, mg, extrapolate=False))
        object.__setattr__(self, "_sigma_itp", PchipInterpolator(xg, sg, extrapolate=False))

    @property
    def x_max(self):
        return self.x_grid[-1]

    def _check_range(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.x_grid[0]) or np.any(x > self.x_grid[-1]):
            raise ConfigError(
                f"x outside tabulated hull [{self.x_grid[0]}, {self.x_grid[-1]}]"
            )
        return x

    def mu(self, x):
        return self._mu_itp(self._check_range(x))

    def sigma(self, x):
        return self._sigma_itp(self._check_range(x))

    def to_dict(self):
        return {
            "x_grid": list(self.x_grid),
            "mu_values": list(self.mu_values),
            "sigma_values": list(self.sigma_values),
        }


Family = Union[OrnsteinUhlenbeck, TabulatedC1]


@dataclass(frozen=True)
class SurplusModel:
    """Reference surplus dynamics plus preference parameters.

    rho: discount rate (> 0); R: risk/ambiguity aversion in [0, 1); xi0:
    bankruptcy payout level (> 0).  R = 0 selects the classical branch
    everywhere; no expression dividing by R is ever evaluated at R = 0.
    """

    family: Family
    rho: float
    R: float
    xi0: float

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("rho must be > 0")
        if self.xi0 <= 0:
            raise ConfigError("xi0 must be > 0")
        if not (0.0 <= self.R < 1.0):
            raise ConfigError("R must lie in [0, 1)")

    def mu(self, x):
        return self.family.mu(x)

    def sigma(self, x):
        return self.family.sigma(x)

    def with_r(self, r: float) -> "SurplusModel":
        return replace(self, R=r)

    def scan_upper(self) -> float:
        """Natural upper end of the evaluation range for landmark scans."""
        if isinstance(self.family, OrnsteinUhlenbeck):
            return 2.0 * self.family.m
        return self.family.x_max

    def to_dict(self):
        fam = "ou" if isinstance(self.family, OrnsteinUhlenbeck) else "tabulated"
        return {
            "family": fam,
            "params": self.family.to_dict(),
            "rho": self.rho,
            "R": self.R,
            "xi0": self.xi0,
        }

    @staticmethod
    def from_dict(d: dict) -> "SurplusModel":
        try:
            fam = d["family"]
            params = d["params"]
            if fam == "ou":
                family = OrnsteinUhlenbeck(**params)
            elif fam == "tabulated":
                family = TabulatedC1(
                    tuple(params["x_grid"]),
                    tuple(params["mu_values"]),
                    tuple(params["sigma_values"]),
                )
            else:
                raise ConfigError(f"unknown family {fam!r}")
            return SurplusModel(family, float(d["rho"]), float(d["R"]), float(d["xi0"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model dictionary: {exc}") from exc

    @staticmethod
    def from_json(path) -> "SurplusModel":
        with open(path) as fh:
            return SurplusModel.from_dict(json.load(fh))


def eval_mu_sigma(model: SurplusModel, x):
    """(mu(x), sigma(x)); scalar in, scalar out; arrays pass through."""
    scalar = np.isscalar(x)
    if scalar and x < 0:
        raise ConfigError("surplus model is only evaluated on x >= 0")
    mu = model.mu(x)
    s = model.sigma(x)
    if scalar:
        return float(mu), float(s)
    return mu, s


@dataclass(frozen=True)
class PsiRoots:
    psi_minus: float
    psi_plus: float
    discriminant: float
    at_x: float


def discriminant(model: SurplusModel, x):
    mu = model.mu(x)
    sig = model.sigma(x)
    return mu * mu - 2.0 * model.R * model.rho * sig * sig


def q_poly(model: SurplusModel, psi, x):
    """Q(psi; x) = rho*psi^2 - mu(x)*psi + (R/2)*sigma(x)^2."""
    return (
        model.rho * psi * psi
        - model.mu(x) * psi
        + 0.5 * model.R * model.sigma(x) ** 2
    )


def psi_roots(model: SurplusModel, x: float) -> PsiRoots:
    d = float(discriminant(model, x))
    if d < 0.0:
        raise BeyondUpperBoundError(x, d)
    mu = float(model.mu(x))
    root = math.sqrt(d)
    return PsiRoots(
        psi_minus=(mu - root) / (2.0 * model.rho),
        psi_plus=(mu + root) / (2.0 * model.rho),
        discriminant=d,
        at_x=float(x),
    )


def psi_plus_arr(model: SurplusModel, x):
    """Vectorized psi_plus; NaN where the discriminant is negative."""
    d = discriminant(model, x)
    return np.where(d >= 0, (model.mu(x) + np.sqrt(np.maximum(d, 0.0))) / (2 * model.rho), np.nan)


def psi_minus_arr(model: SurplusModel, x):
    d = discriminant(model, x)
    return np.where(d >= 0, (model.mu(x) - np.sqrt(np.maximum(d, 0.0))) / (2 * model.rho), np.nan)


@dataclass(frozen=True)
class ConditionResult:
    passed: bool
    message: str


@dataclass(frozen=True)
class AssumptionReport:
    b_lower: float
    b_upper: float          # math.inf when no root on the scan range
    b_hat: Optional[float]  # None when cond_iv fails
    mu_bar: float
    cond_i: ConditionResult
    cond_ii: ConditionResult
    cond_iii: ConditionResult
    cond_iv: ConditionResult
    payout_convention: str
    grid_used: np.ndarray

    @property
    def all_pass(self) -> bool:
        return all(
            c.passed for c in (self.cond_i, self.cond_ii, self.cond_iii, self.cond_iv)
        )

    def require(self):
        if not self.all_pass:
            failing = [
                name
                for name, c in zip(
                    ("cond_i", "cond_ii", "cond_iii", "cond_iv"),
                    (self.cond_i, self.cond_ii, self.cond_iii, self.cond_iv),
                )
                if not c.passed
            ]
            raise AssumptionError(f"solvability conditions failed: {', '.join(failing)}")
        return self

    def to_dict(self):
        def cond(c):
            return {"passed": c.passed, "message": c.message}

        return {
            "b_lower": self.b_lower,
            "b_upper": self.b_upper if math.isfinite(self.b_upper) else "inf",
            "b_hat": self.b_hat,
            "mu_bar": self.mu_bar,
            "cond_i": cond(self.cond_i),
            "cond_ii": cond(self.cond_ii),
            "cond_iii": cond(self.cond_iii),
            "cond_iv": cond(self.cond_iv),
            "all_pass": self.all_pass,
            "payout_convention": self.payout_convention,
            "grid_n": int(self.grid_used.size),
            "grid_x_max": float(self.grid_used[-1]),
        }


def _first_sign_change(f, grid):
    """Index i with f[i] > 0 >= f[i+1] (first + -> - crossing), or None."""
    for i in range(len(grid) - 1):
        if f[i] > 0.0 >= f[i + 1]:
            return i
    return None


def _psi_plus_minus_x_slope(model, x, h):
    lo = max(x - h, 0.0)
    plo = psi_plus_arr(model, lo) - lo
    phi = psi_plus_arr(model, x + h) - (x + h)
    return (phi - plo) / (x + h - lo)


def check_assumptions(model: SurplusModel, x_max: Optional[float] = None,
                      n_points: int = 2001,
                      b_lower_override: Optional[float] = None) -> AssumptionReport:
    """Scan-and-bisect evaluation of every solvability landmark.

    b_lower is the supremum of the maximal initial interval on which both
    mu^2 >= 3*R*rho*sigma^2 holds and psi_plus(x) - x is nondecreasing
    (for mean-reverting drifts the slope is negative from the start, so
    b_lower = 0).  A caller who wants a different split point can pass
    b_lower_override.  Deterministic: same inputs, bit-identical report.
    """
    if n_points < 100:
        raise ConfigError("n_points must be >= 100")
    if x_max is None:
        x_max = model.scan_upper()
    grid = np.linspace(0.0, float(x_max), int(n_points))
    h = grid[1] - grid[0]

    mu = model.mu(grid)
    sig = model.sigma(grid)
    disc = mu * mu - 2.0 * model.R * model.rho * sig * sig
    cond1_fn = mu * mu - 3.0 * model.R * model.rho * sig * sig

    mu_bar = float(np.max(mu - model.rho * grid))

    # ---- b_upper: first root of the discriminant above b_lower ------------
    i_up = _first_sign_change(disc, grid)
    if i_up is None:
        b_upper = math.inf
    else:
        b_upper = brentq(
            lambda x: float(discriminant(model, x)),
            grid[i_up], grid[i_up + 1], xtol=ROOT_TOL,
        )

    # ---- b_lower -----------------------------------------------------------
    if b_lower_override is not None:
        b_lower = float(b_lower_override)
    else:
        sub = grid[grid <= min(b_upper, grid[-1])]
        phi = psi_plus_arr(model, sub) - sub
        dphi = np.diff(phi)
        bad = None
        for i in range(len(sub) - 1):
            if cond1_fn[i] < 0.0 or dphi[i] < -MONOTONE_SLACK:
                bad = i
                break
        if bad is None:
            b_lower = float(sub[-1])
        elif bad == 0:
            b_lower = 0.0
        else:
            # refine on whichever continuous criterion failed first
            if cond1_fn[bad] < 0.0:
                b_lower = brentq(
                    lambda x: float(model.mu(x) ** 2
                                    - 3 * model.R * model.rho * model.sigma(x) ** 2),
                    sub[bad - 1], sub[bad], xtol=ROOT_TOL)
            else:
                b_lower = brentq(
                    lambda x: _psi_plus_minus_x_slope(model, x, 0.25 * h),
                    sub[bad - 1], sub[bad], xtol=ROOT_TOL)

    # ---- cond_i ------------------------------------------------------------
    mu0 = float(model.mu(0.0))
    on_lower = grid[grid <= b_lower + 1e-15]
    c1_vals = (model.mu(on_lower) ** 2
               - 3 * model.R * model.rho * model.sigma(on_lower) ** 2)
    c1_ok = mu0 > 0.0 and bool(np.all(c1_vals >= -MONOTONE_SLACK))
    cond_i = ConditionResult(
        c1_ok,
        f"mu(0)={mu0:.6g}; min(mu^2 - 3 R rho sigma^2)={float(np.min(c1_vals)):.6g} "
        f"on [0, b_lower]; b_upper={b_upper:.6g}",
    )

    # ---- cond_ii: psi_plus(x) - x monotone up then down --------------------
    hi = min(b_upper, grid[-1])
    sub = grid[grid <= hi]
    phi = psi_plus_arr(model, sub) - sub
    dphi = np.diff(phi)
    inc_part = dphi[sub[:-1] < b_lower - h]
    dec_part = dphi[(sub[:-1] >= b_lower) & (sub[1:] < hi)]
    inc_ok = bool(np.all(inc_part >= -MONOTONE_SLACK)) if inc_part.size else True
    dec_ok = bool(np.all(dec_part <= MONOTONE_SLACK)) if dec_part.size else True
    cond_ii = ConditionResult(
        inc_ok and dec_ok,
        f"psi_plus - x increasing on [0, b_lower]: {inc_ok}; "
        f"decreasing on (b_lower, b_upper): {dec_ok}",
    )

    # ---- cond_iii: payout window -------------------------------------------
    pm = psi_minus_arr(model, sub) - sub
    lower_bound = float(np.nanmax(pm))
    if isinstance(model.family, OrnsteinUhlenbeck) and model.R > 0:
        # tighter OU-specific lower bound on the payout level
        lower_bound = max(lower_bound, math.sqrt(model.R / (2.0 * model.rho)))
    pr_low = psi_roots(model, b_lower)
    upper_bound = pr_low.psi_plus - b_lower
    c3_ok = lower_bound < model.xi0 < upper_bound
    cond_iii = ConditionResult(
        c3_ok,
        f"need {lower_bound:.6g} < xi0={model.xi0:.6g} < {upper_bound:.6g}",
    )

    # ---- cond_iv: b_hat = smallest root of psi_plus(b) - b - xi0 -----------
    f_hat = phi - model.xi0
    mask = sub > b_lower
    idx = np.where(mask[:-1])[0]
    i_cross = None
    for i in idx:
        if f_hat[i] > 0.0 >= f_hat[i + 1]:
            i_cross = i
            break
    if i_cross is None:
        b_hat = None
        cond_iv = ConditionResult(
            False,
            f"no root of psi_plus(b) - b - xi0 on ({b_lower:.6g}, {hi:.6g}); "
            f"endpoint values {float(f_hat[mask][0]) if mask.any() else float('nan'):.6g} "
            f"and {float(f_hat[-1]):.6g}",
        )
    else:
        b_hat = brentq(
            lambda b: psi_roots(model, b).psi_plus - b - model.xi0,
            sub[i_cross], sub[i_cross + 1], xtol=ROOT_TOL,
        )
        inside = b_lower < b_hat < b_upper
        cond_iv = ConditionResult(
            inside, f"b_hat={b_hat:.12g} in (b_lower, b_upper): {inside}"
        )

    return AssumptionReport(
        b_lower=float(b_lower),
        b_upper=float(b_upper),
        b_hat=b_hat,
        mu_bar=mu_bar,
        cond_i=cond_i,
        cond_ii=cond_ii,
        cond_iii=cond_iii,
        cond_iv=cond_iv,
        payout_convention="xi_tau = exp(-rho*tau) * xi0",
        grid_used=grid,
    )
