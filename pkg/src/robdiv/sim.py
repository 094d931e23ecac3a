"""Monte Carlo verification layer: Euler-Maruyama under the reference or the
worst-case measure, threshold reflection, ruin detection, and the classical /
ambiguity-tilted value estimators.

Simulation under the alternative measure is done by drift shift (lower
variance than likelihood weighting, and the tilted representation is stated
under that measure); a Radon-Nikodym weighted mode under the reference
measure is kept as a cross-check for small ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import _simkern
from .errors import ConfigError, EstimationError
from .fbp import FreeBoundarySolution
from .model import SurplusModel

KERNEL_ZERO = "zero"
KERNEL_WORST = "worst"
MODE_CLASSICAL = "classical_k"
MODE_MAENHOUT = "maenhout_tilted"
_GRID_N = 8193


@dataclass(frozen=True)
class SimConfig:
    x0: float
    b: float
    dt: float
    t_max: float
    n_paths: int
    seed: int
    kernel: str = KERNEL_ZERO

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.t_max < 100 * self.dt:
            raise ConfigError("t_max must be at least 100*dt")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if self.x0 < 0:
            raise ConfigError("x0 must be >= 0")
        if self.b <= 0:
            raise ConfigError("b must be > 0")
        if self.kernel not in (KERNEL_ZERO, KERNEL_WORST):
            raise ConfigError(f"unknown kernel {self.kernel!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def to_dict(self):
        return {
            "x0": self.x0, "b": self.b, "dt": self.dt, "t_max": self.t_max,
            "n_paths": self.n_paths, "seed": self.seed, "kernel": self.kernel,
        }


@dataclass(frozen=True)
class PathRecord:
    ruin_time: Optional[float]          # None when censored
    discounted_dividends: float         # int exp(-rho s) dD
    tilted_dividends: float             # int exp(tilt - rho s) dD
    tilt_integral: float                # int theta^2/(2R) ds up to the end
    terminal_payout_factor: float       # exp(tilt - rho * end time)
    censored: bool
    anomaly: bool
    x_end: float


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_paths: int
    censored_fraction: float
    mode: str
    second_moment: float                 # of per-path values
    censoring_bias_bound: float
    config: dict

    def to_dict(self):
        return {
            "mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
            "censored_fraction": self.censored_fraction, "mode": self.mode,
            "second_moment": self.second_moment,
            "censoring_bias_bound": self.censoring_bias_bound,
            "config": self.config,
        }


def _kernel_grids(model: SurplusModel, cfg: SimConfig,
                  solution: Optional[FreeBoundarySolution], shift_measure: bool):
    """Per-x arrays the path kernel interpolates.

    Arrays carry one duplicated sentinel entry so linear interpolation at
    x = b exactly never indexes past the end.
    """
    if cfg.kernel == KERNEL_WORST:
        if solution is None:
            raise ConfigError("worst-case kernel requires a free-boundary solution")
        if solution.b_star < cfg.b - 1e-12:
            raise ConfigError("attached solution does not cover [0, b]")

    n = _GRID_N
    xg = np.linspace(0.0, cfg.b, n)
    mu = np.asarray(model.mu(xg), dtype=float)
    sig = np.asarray(model.sigma(xg), dtype=float)

    if cfg.kernel == KERNEL_WORST:
        v_itp = CubicHermiteSpline(solution.x_grid, solution.v, solution.v_prime)
        v = v_itp(xg)
        vp = v_itp.derivative()(xg)
        # value floor at xi0 keeps the kernel finite near the ruin boundary
        theta = -model.R * sig * vp / np.maximum(v, model.xi0)
        tiltrate = theta * theta / (2.0 * model.R)
    else:
        theta = np.zeros(n)
        tiltrate = np.zeros(n)

    drift = mu + (sig * theta if shift_measure else 0.0)
    sig_sqdt = sig * math.sqrt(cfg.dt)
    wfac = np.exp(tiltrate * cfg.dt)

    def pad(a):
        return np.ascontiguousarray(np.concatenate([a, a[-1:]]))

    dx_inv = (n - 1) / cfg.b
    tab = np.ascontiguousarray(
        np.stack([pad(drift * cfg.dt), pad(sig_sqdt), pad(wfac)], axis=1))
    return dx_inv, tab, pad(tiltrate), pad(theta)


def _run(model: SurplusModel, cfg: SimConfig,
         solution: Optional[FreeBoundarySolution] = None,
         shift_measure: bool = True):
    dx_inv, tab, tiltrate, theta = _kernel_grids(model, cfg, solution, shift_measure)
    n = cfg.n_paths
    out = {name: np.empty(n) for name in
           ("ruin_time", "div_plain", "div_tilted", "w_end", "x_end", "rn_weight")}
    censored = np.empty(n, dtype=np.bool_)
    anomaly = np.empty(n, dtype=np.bool_)
    _simkern.run_paths(
        n, np.uint64(cfg.seed), float(cfg.x0), float(cfg.b), float(cfg.dt),
        cfg.n_steps, model.rho,
        dx_inv, tab, tiltrate, theta, shift_measure,
        out["ruin_time"], out["div_plain"], out["div_tilted"], out["w_end"],
        out["x_end"], censored, anomaly, out["rn_weight"])
    out["censored"] = censored
    out["anomaly"] = anomaly
    return out


def _record_from(model, cfg, out, i) -> PathRecord:
    cen = bool(out["censored"][i])
    tau = float(out["ruin_time"][i])
    w_end = float(out["w_end"][i])
    t_end = cfg.t_max if cen else tau
    tilt = math.log(w_end) + model.rho * t_end if cfg.kernel == KERNEL_WORST else 0.0
    return PathRecord(
        ruin_time=None if cen else tau,
        discounted_dividends=float(out["div_plain"][i]),
        tilted_dividends=float(out["div_tilted"][i]),
        tilt_integral=tilt,
        terminal_payout_factor=w_end,
        censored=cen,
        anomaly=bool(out["anomaly"][i]),
        x_end=float(out["x_end"][i]),
    )


def simulate_path(model: SurplusModel, cfg: SimConfig,
                  solution: Optional[FreeBoundarySolution] = None,
                  path_index: int = 0) -> PathRecord:
    """One path, bit-identical to path `path_index` of the batch estimator."""
    batch = replace(cfg, n_paths=path_index + 1)
    out = _run(model, batch, solution, shift_measure=True)
    return _record_from(model, cfg, out, path_index)


def path_records(model: SurplusModel, cfg: SimConfig,
                 solution: Optional[FreeBoundarySolution] = None,
                 n: Optional[int] = None) -> list:
    """The first n PathRecords of the batch, from a single kernel run."""
    n = cfg.n_paths if n is None else min(int(n), cfg.n_paths)
    out = _run(model, replace(cfg, n_paths=n), solution, shift_measure=True)
    return [_record_from(model, cfg, out, i) for i in range(n)]


def estimate_value(model: SurplusModel, cfg: SimConfig,
                   solution: Optional[FreeBoundarySolution] = None,
                   mode: str = MODE_MAENHOUT,
                   use_likelihood_ratio: bool = False) -> McEstimate:
    """Aggregate per-path values into a mean/stderr estimate.

    classical_k (zero kernel only):
        int exp(-rho s) dD + exp(-rho tau) xi0
    maenhout_tilted:
        int exp(tilt - rho s) dD + exp(tilt - rho tau) xi0,
        tilt accumulated stepwise along the path
    Censored paths contribute their accrued value plus the
    exp(tilt - rho t_max) * xi0 lower proxy; the continuation they drop is
    bounded above by censoring_bias_bound (censored mass times the value
    upper bound), never added back in.
    """
    if cfg.n_paths < 100:
        raise ConfigError("estimate_value needs n_paths >= 100")
    if mode not in (MODE_CLASSICAL, MODE_MAENHOUT):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == MODE_CLASSICAL and cfg.kernel != KERNEL_ZERO:
        raise ConfigError("classical_k is an expectation under the reference "
                          "measure; use the zero kernel")
    if mode == MODE_MAENHOUT and cfg.kernel == KERNEL_WORST and model.R == 0.0:
        raise ConfigError("worst-case kernel requires R > 0")

    shift = not use_likelihood_ratio
    out = _run(model, cfg, solution, shift_measure=shift)
    cen = out["censored"] | out["anomaly"]
    if bool(np.all(cen)):
        raise EstimationError("every path was censored; increase t_max")

    # with zero tilt w_end is exactly exp(-rho * end time), so one formula
    # serves both modes
    if mode == MODE_CLASSICAL:
        values = out["div_plain"] + out["w_end"] * model.xi0
    else:
        values = out["div_tilted"] + out["w_end"] * model.xi0
    if use_likelihood_ratio:
        values = values * out["rn_weight"]

    probe = np.linspace(0.0, cfg.b, 512)
    mu_bar = float(np.max(model.mu(probe) - model.rho * probe))
    bias_bound = float(np.sum(out["w_end"][cen] * (out["x_end"][cen]
                                                   + mu_bar / model.rho))
                       / cfg.n_paths)

    return McEstimate(
        mean=float(np.mean(values)),
        stderr=float(np.std(values, ddof=1) / math.sqrt(cfg.n_paths)),
        n_paths=cfg.n_paths,
        censored_fraction=float(np.mean(cen)),
        mode=mode,
        second_moment=float(np.mean(values * values)),
        censoring_bias_bound=bias_bound,
        config=cfg.to_dict(),
    )


def convergence_sweep(model: SurplusModel, cfg: SimConfig, dt_list, n_list,
                      solution: Optional[FreeBoundarySolution] = None,
                      mode: str = MODE_MAENHOUT, error_order: float = 0.5) -> dict:
    """Estimates across a (dt, n) grid plus a Richardson extrapolation of the
    time-step bias at the largest n and the two smallest dts.

    The discrete reflection makes the weak error sqrt(dt)-dominated, hence
    the default extrapolation order 1/2; pass error_order=1.0 for schemes
    whose first-order term dominates.
    """
    if not list(dt_list) or not list(n_list):
        raise ConfigError("dt_list and n_list must be nonempty")
    rows = []
    for dt in dt_list:
        for n in n_list:
            c = replace(cfg, dt=float(dt), n_paths=int(n))
            est = estimate_value(model, c, solution, mode=mode)
            rows.append({"dt": float(dt), "n_paths": int(n),
                         "mean": est.mean, "stderr": est.stderr,
                         "censored_fraction": est.censored_fraction})
    n_big = max(n_list)
    dts = sorted(set(float(d) for d in dt_list))
    by_dt = {r["dt"]: r for r in rows if r["n_paths"] == n_big}
    if len(dts) >= 2:
        d1, d2 = dts[0], dts[1]
        m1, m2 = by_dt[d1]["mean"], by_dt[d2]["mean"]
        w = d1 ** error_order / (d2 ** error_order - d1 ** error_order)
        extrapolated = m1 + (m1 - m2) * w
        bias_at_finest = abs(m1 - extrapolated)
    else:
        extrapolated = by_dt[dts[0]]["mean"]
        bias_at_finest = float("nan")
    return {"rows": rows, "extrapolated": extrapolated,
            "bias_at_finest": bias_at_finest, "error_order": error_order}
