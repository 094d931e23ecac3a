"""Markov-chain approximation of the reflected surplus on [0, b]: trinomial
transitions with local moment matching, absorption at 0, dividend payment at
the reflecting top node, and three backward solvers (classical, recursive
utility, ambiguity-penalized) whose time-0 slices feed the equivalence and
bound checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _latkern
from .errors import CflError, ConfigError, PicardError
from .model import SurplusModel

PICARD_TOL = 1e-12


@dataclass(frozen=True)
class LatticeSpec:
    model: SurplusModel
    b: float
    n_space: int
    dt: float
    t_max: float
    x_nodes: np.ndarray
    p_up: np.ndarray
    p_mid: np.ndarray
    p_down: np.ndarray
    dividend_top: float                  # expected overshoot paid per step at the top
    mean_error: float                    # max |local mean - mu dt|
    var_error: float                     # max |local variance - sigma^2 dt|

    @property
    def dx(self) -> float:
        return self.x_nodes[1] - self.x_nodes[0]

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def dividend_increment(self) -> np.ndarray:
        out = np.zeros(self.n_space)
        out[-1] = self.dividend_top
        return out


def cfl_dt(model: SurplusModel, b: float, n_space: int, safety: float = 1.0) -> float:
    """Largest dt keeping the middle probability nonnegative everywhere."""
    xs = np.linspace(0.0, b, n_space)
    dx = xs[1] - xs[0]
    s2 = np.asarray(model.sigma(xs), dtype=float) ** 2
    return float(safety * dx * dx / np.max(s2))


def build_lattice(model: SurplusModel, b: float, n_space: int, dt: float,
                  t_max: float) -> LatticeSpec:
    """Trinomial chain with exact local mean and O(dt^2) variance match."""
    if b <= 0:
        raise ConfigError("b must be > 0")
    if n_space < 50:
        raise ConfigError("n_space must be >= 50")
    if dt <= 0 or t_max <= dt:
        raise ConfigError("need 0 < dt < t_max")

    xs = np.linspace(0.0, b, int(n_space))
    dx = xs[1] - xs[0]
    mu = np.asarray(model.mu(xs), dtype=float)
    s2 = np.asarray(model.sigma(xs), dtype=float) ** 2

    diff = s2 * dt / (dx * dx)
    adv = mu * dt / dx
    p_up = 0.5 * (diff + adv)
    p_down = 0.5 * (diff - adv)
    p_mid = 1.0 - diff

    bad = (p_up < 0) | (p_down < 0) | (p_mid < 0) | (p_up > 1) | (p_down > 1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise CflError(
            f"transition probability outside [0,1] at node x={xs[i]:.6g} "
            f"(p_up={p_up[i]:.4g}, p_mid={p_mid[i]:.4g}, p_down={p_down[i]:.4g}); "
            f"decrease dt below {cfl_dt(model, b, n_space):.3e} "
            f"or refine the grid if the drift bound binds"
        )

    mean_err = float(np.max(np.abs((p_up - p_down) * dx - mu * dt)))
    second = (p_up + p_down) * dx * dx
    var_err = float(np.max(np.abs(second - (mu * dt) ** 2 - s2 * dt)))

    return LatticeSpec(
        model=model, b=float(b), n_space=int(n_space), dt=float(dt),
        t_max=float(t_max), x_nodes=xs,
        p_up=p_up, p_mid=p_mid, p_down=p_down,
        dividend_top=float(p_up[-1] * dx),
        mean_error=mean_err, var_error=var_err,
    )


@dataclass(frozen=True)
class JointSolution:
    """Time-0 slices of the classical value K, the linear-aggregator lower
    envelope u, and the recursive utility V, plus iteration/bound stats."""

    k_classical: np.ndarray
    u_lower: np.ndarray
    v_ez: np.ndarray
    picard_iters: np.ndarray
    worst_u_violation: float             # max (u - V) over all slices/nodes
    worst_k_violation: float             # max (V - K^(1-R)) over all slices/nodes
    iterate_below_lower: float           # worst Picard-iterate excursion below u
    iterate_above_upper: float           # worst excursion above K^(1-R)
    max_residual: float
    damped_slices: int
    checkpoint_times: np.ndarray
    k_checkpoints: np.ndarray
    u_checkpoints: np.ndarray
    v_checkpoints: np.ndarray


def solve_classical(lat: LatticeSpec, n_checkpoints: int = 8) -> np.ndarray:
    """Backward classical value; thin wrapper over the joint solve."""
    return solve_joint(lat, n_checkpoints).k_classical


def solve_joint(lat: LatticeSpec, n_checkpoints: int = 8,
                tol: float = PICARD_TOL, max_iters: int = _latkern.PICARD_MAX
                ) -> JointSolution:
    """At R = 0 all three recursions coincide with the classical value."""
    model = lat.model
    if not (0.0 <= model.R < 1.0):
        raise ConfigError("solve needs R in [0, 1)")
    n_steps = lat.n_steps
    ce = max(1, n_steps // max(n_checkpoints, 1))
    n_checks = (n_steps - 1) // ce + 1

    k0 = np.empty(lat.n_space)
    u0 = np.empty(lat.n_space)
    v0 = np.empty(lat.n_space)
    iters = np.zeros(n_steps, dtype=np.int64)
    kc = np.empty((n_checks, lat.n_space))
    uc = np.empty((n_checks, lat.n_space))
    vc = np.empty((n_checks, lat.n_space))
    stats = np.zeros(6)

    _latkern.backward_joint(
        lat.p_up, lat.p_mid, lat.p_down, lat.dividend_top,
        model.rho, model.xi0, 1.0 - model.R, lat.dt, n_steps,
        tol, ce, k0, u0, v0, iters, kc, uc, vc, stats)

    if int(np.max(iters)) >= max_iters:
        worst = np.argmax(iters)
        raise PicardError(
            f"aggregator fixed point hit the iteration cap at slice {int(worst)}",
            [stats[4]])

    return JointSolution(
        k_classical=k0, u_lower=u0, v_ez=v0, picard_iters=iters,
        worst_u_violation=float(stats[0]), worst_k_violation=float(stats[1]),
        iterate_below_lower=float(stats[2]), iterate_above_upper=float(stats[3]),
        max_residual=float(stats[4]), damped_slices=int(stats[5]),
        checkpoint_times=np.arange(n_checks) * ce * lat.dt,
        k_checkpoints=kc, u_checkpoints=uc, v_checkpoints=vc,
    )


def solve_ez(lat: LatticeSpec, tol: float = PICARD_TOL,
             max_iters: int = _latkern.PICARD_MAX) -> JointSolution:
    if lat.model.R <= 0.0:
        raise ConfigError("recursive-utility solve needs R in (0, 1)")
    return solve_joint(lat, tol=tol, max_iters=max_iters)


@dataclass(frozen=True)
class RobustSolution:
    v_rob: np.ndarray
    theta_star: np.ndarray
    clamp_count: int
    worst_tilt_ratio: float              # max |theta*| relative to the probability box
    checkpoint_times: np.ndarray
    v_checkpoints: np.ndarray


def solve_robust(lat: LatticeSpec, n_checkpoints: int = 8) -> RobustSolution:
    model = lat.model
    n_steps = lat.n_steps
    ce = max(1, n_steps // max(n_checkpoints, 1))
    n_checks = (n_steps - 1) // ce + 1

    v0 = np.empty(lat.n_space)
    theta0 = np.empty(lat.n_space)
    vc = np.empty((n_checks, lat.n_space))
    stats = np.zeros(2)
    sig = np.asarray(model.sigma(lat.x_nodes), dtype=float)

    _latkern.backward_robust(
        lat.p_up, lat.p_mid, lat.p_down, lat.dividend_top, sig, lat.dx,
        model.rho, model.xi0, model.R, lat.dt, n_steps, ce,
        v0, theta0, vc, stats)

    return RobustSolution(
        v_rob=v0, theta_star=theta0,
        clamp_count=int(stats[0]), worst_tilt_ratio=float(stats[1]),
        checkpoint_times=np.arange(n_checks) * ce * lat.dt,
        v_checkpoints=vc,
    )


def check_equivalence(lat: LatticeSpec, v_ez: np.ndarray, v_rob: np.ndarray) -> float:
    """max over time-0 nodes of |V_EZ^(1/(1-R)) - V_rob|."""
    if v_ez.shape != v_rob.shape:
        raise ConfigError("solutions come from different lattices")
    r = lat.model.R
    return float(np.max(np.abs(v_ez ** (1.0 / (1.0 - r)) - v_rob)))


@dataclass(frozen=True)
class LatticeValuation:
    """One full lattice run: both utility solves plus the diagnostics used
    by the equivalence and sandwich criteria."""

    spec_summary: dict
    v_ez: np.ndarray
    v_rob: np.ndarray
    k_classical: np.ndarray
    u_lower: np.ndarray
    theta_star: np.ndarray
    dividend_increment: np.ndarray
    picard_iters: np.ndarray
    equivalence_gap: float
    joint: JointSolution = field(repr=False)
    robust: RobustSolution = field(repr=False)

    def to_report(self) -> dict:
        return {
            "lattice": self.spec_summary,
            "equivalence_gap": self.equivalence_gap,
            "picard_max_iters": int(np.max(self.picard_iters)),
            "picard_mean_iters": float(np.mean(self.picard_iters)),
            "damped_slices": self.joint.damped_slices,
            "sandwich": {
                "worst_u_violation": self.joint.worst_u_violation,
                "worst_k_violation": self.joint.worst_k_violation,
                "iterate_below_lower": self.joint.iterate_below_lower,
                "iterate_above_upper": self.joint.iterate_above_upper,
            },
            "tilt_clamp_count": self.robust.clamp_count,
            "worst_tilt_ratio": self.robust.worst_tilt_ratio,
        }


def valuate(model: SurplusModel, b: float, n_space: int, t_max: float,
            dt: Optional[float] = None, cfl_safety: float = 1.0) -> LatticeValuation:
    """build -> joint solve -> robust solve -> equivalence gap."""
    if dt is None:
        dt = cfl_dt(model, b, n_space, cfl_safety)
    lat = build_lattice(model, b, n_space, dt, t_max)
    joint = solve_joint(lat)
    rob = solve_robust(lat)
    gap = check_equivalence(lat, joint.v_ez, rob.v_rob)
    return LatticeValuation(
        spec_summary={
            "b": lat.b, "n_space": lat.n_space, "dt": lat.dt, "t_max": lat.t_max,
            "mean_error": lat.mean_error, "var_error": lat.var_error,
        },
        v_ez=joint.v_ez, v_rob=rob.v_rob, k_classical=joint.k_classical,
        u_lower=joint.u_lower, theta_star=rob.theta_star,
        dividend_increment=lat.dividend_increment(),
        picard_iters=joint.picard_iters,
        equivalence_gap=gap,
        joint=joint, robust=rob,
    )


def refinement_report(model: SurplusModel, b: float, n_space: int, t_max: float,
                      refine: float = math.sqrt(2.0)) -> dict:
    """Equivalence gap at two joint refinement levels (dt re-derived from the
    CFL bound at each level, so space and time refine together)."""
    base = valuate(model, b, n_space, t_max)
    n2 = int(round(n_space * refine))
    fine = valuate(model, b, n2, t_max)
    return {
        "base": base.to_report(),
        "fine": fine.to_report(),
        "gap_ratio": base.equivalence_gap / fine.equivalence_gap
        if fine.equivalence_gap > 0 else float("inf"),
        "base_valuation": base,
        "fine_valuation": fine,
    }


# ---------------------------------------------------------------------------
# aggregator family
# ---------------------------------------------------------------------------

def g_ez(model: SurplusModel, t, y):
    """Recursive-utility aggregator exp(-rho t) (1-R) y^(-R/(1-R))."""
    r = model.R
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.exp(-model.rho * t) * (1.0 - r) * y ** (-r / (1.0 - r))


def lipschitz_aggregator(model: SurplusModel, n: int, t, y):
    """n-th Lipschitz envelope of the aggregator:

        g_n(t, y) = inf_{x > 0} { g_ez(t, x) + n R exp(-rho t) |x - y| }

    The stationary point is x* = n^-(1-R), giving the closed form
        exp(-rho t) (n^R - n R y)   for y <= n^-(1-R),
        g_ez(t, y)                  otherwise.
    The penalty is read with |x - y|: a signed penalty would make the
    envelope globally linear in y and break its own monotonicity in n.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    r = model.R
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    breakpoint_y = float(n) ** (-(1.0 - r))
    flat = np.exp(-model.rho * t) * (n ** r - n * r * y)
    with np.errstate(divide="ignore"):   # exact branch unused at y = 0
        return np.where(y <= breakpoint_y, flat, g_ez(model, t, y))
