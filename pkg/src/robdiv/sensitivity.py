"""Ambiguity-aversion sweep: re-solve the free boundary across a grid of R
values, evaluate the value function at probe points, and check the
structural facts the sweep is supposed to exhibit: columns nonincreasing in
R, dominated by the classical value, with numerically continuous b*(R).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .fbp import build_value_function, shoot
from .model import SurplusModel, check_assumptions


@dataclass(frozen=True)
class SweepResult:
    r_grid: np.ndarray
    b_star: np.ndarray                 # NaN where assumptions failed
    v_at: np.ndarray                   # probes x R, NaN columns where invalid
    x_probes: np.ndarray
    classical_b: float
    classical_v: np.ndarray
    assumption_valid: np.ndarray
    max_b_jump: float
    max_value_jump: float
    failures: dict                     # r -> message

    def valid_columns(self):
        return np.where(self.assumption_valid)[0]

    def to_summary(self) -> dict:
        cols = self.valid_columns()
        mono = monotone_in_r(self)
        return {
            "r_grid": self.r_grid.tolist(),
            "b_star": [None if np.isnan(b) else b for b in self.b_star],
            "classical_b": self.classical_b,
            "n_valid": int(cols.size),
            "max_b_jump": self.max_b_jump,
            "max_value_jump": self.max_value_jump,
            "columns_nonincreasing_in_r": bool(mono["nonincreasing"]),
            "worst_monotonicity_violation": mono["worst_violation"],
            "dominated_by_classical": bool(mono["below_classical"]),
            "failures": {f"{r:.6g}": msg for r, msg in self.failures.items()},
        }


def _solve_one(model: SurplusModel, r: float, x_probes: np.ndarray):
    from .errors import RobdivError

    m_r = model.with_r(float(r))
    rep = check_assumptions(m_r)
    if not rep.all_pass:
        failing = [n for n, c in (("cond_i", rep.cond_i), ("cond_ii", rep.cond_ii),
                                  ("cond_iii", rep.cond_iii), ("cond_iv", rep.cond_iv))
                   if not c.passed]
        return None, ", ".join(failing)
    try:
        b = shoot(m_r, report=rep)
        x_max = max(3.0 * rep.b_hat, float(np.max(x_probes)) * 1.5)
        sol = build_value_function(m_r, b, x_max=x_max, report=rep)
    except RobdivError as exc:
        return None, f"solver: {exc}"
    return (b, np.asarray(sol.value_at(x_probes), dtype=float)), None


def sweep(model: SurplusModel, r_grid: Sequence[float],
          x_probes: Sequence[float], n_jobs: int = 1) -> SweepResult:
    """Per-R shoot + value build; R = 0 entries use the classical branch of
    the same pipeline.  Invalid R values are flagged and skipped, never
    interpolated over.  Per-R solves are independent; results are assembled
    in grid order regardless of worker count.
    """
    r_grid = np.asarray(sorted(float(r) for r in r_grid))
    if r_grid.size == 0:
        raise ConfigError("r_grid is empty")
    if r_grid[0] < 0.0 or r_grid[-1] >= 1.0:
        raise ConfigError("r_grid must lie in [0, 1)")
    x_probes = np.asarray(sorted(float(x) for x in x_probes))
    if x_probes.size == 0:
        raise ConfigError("x_probes is empty")

    # classical reference: the R = 0 solve of the same pipeline
    m0 = model.with_r(0.0)
    rep0 = check_assumptions(m0)
    rep0.require()
    classical_b = shoot(m0, report=rep0)
    sol0 = build_value_function(
        m0, classical_b,
        x_max=max(3.0 * rep0.b_hat, float(np.max(x_probes)) * 1.5), report=rep0)
    classical_v = np.asarray(sol0.value_at(x_probes), dtype=float)

    def one(r):
        if r == 0.0:
            return (classical_b, classical_v.copy()), None
        return _solve_one(model, r, x_probes)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, r_grid))
    else:
        results = [one(r) for r in r_grid]

    b_star = np.full(r_grid.size, np.nan)
    v_at = np.full((x_probes.size, r_grid.size), np.nan)
    valid = np.zeros(r_grid.size, dtype=bool)
    failures = {}
    for j, (payload, err) in enumerate(results):
        if payload is None:
            failures[float(r_grid[j])] = err
            continue
        b_star[j], v_at[:, j] = payload
        valid[j] = True

    cols = np.where(valid)[0]
    if cols.size >= 2:
        max_b_jump = float(np.max(np.abs(np.diff(b_star[cols]))))
        max_v_jump = float(np.max(np.abs(np.diff(v_at[:, cols], axis=1))))
    else:
        max_b_jump = 0.0
        max_v_jump = 0.0

    return SweepResult(
        r_grid=r_grid, b_star=b_star, v_at=v_at, x_probes=x_probes,
        classical_b=classical_b, classical_v=classical_v,
        assumption_valid=valid, max_b_jump=max_b_jump,
        max_value_jump=max_v_jump, failures=failures,
    )


def monotone_in_r(result: SweepResult, slack: float = 1e-8) -> dict:
    """Column-wise decrease of the value in R over valid columns."""
    cols = result.valid_columns()
    sub = result.v_at[:, cols]
    diffs = np.diff(sub, axis=1)          # should be <= 0
    worst = float(np.max(diffs)) if diffs.size else 0.0
    below = np.max(sub - result.classical_v[:, None]) if sub.size else 0.0
    return {
        "nonincreasing": bool(worst <= slack),
        "worst_violation": worst,
        "below_classical": bool(below <= slack),
        "classical_excess": float(below),
    }


def valid_r_interval(model: SurplusModel, r_max: float = 0.5, n_scan: int = 26):
    """Largest initial sub-interval of [0, r_max] passing the solvability
    checks, discovered by scan; used for default sweep grids."""
    rs = np.linspace(0.0, r_max, n_scan)
    good = 0.0
    for r in rs:
        if r >= 1.0:
            break
        rep = check_assumptions(model.with_r(float(r)))
        if not rep.all_pass:
            break
        good = float(r)
    return 0.0, good


def continuity_report(model: SurplusModel, result: SweepResult,
                      refine: float = 2.0) -> dict:
    """Refine the R grid around the largest observed b* jump and report how
    the jump scales; numerical continuity evidence, not a proof."""
    cols = result.valid_columns()
    if cols.size < 2:
        raise ConfigError("need at least two valid sweep columns")
    rs = result.r_grid[cols]
    bs = result.b_star[cols]
    jumps = np.abs(np.diff(bs))
    k = int(np.argmax(jumps))
    r_lo, r_hi = float(rs[k]), float(rs[k + 1])

    n_fine = max(3, int(np.ceil(refine)) + 1)
    fine_grid = np.linspace(r_lo, r_hi, n_fine)
    fine = sweep(model, fine_grid, result.x_probes)
    fcols = fine.valid_columns()
    fine_jump = float(np.max(np.abs(np.diff(fine.b_star[fcols])))) \
        if fcols.size >= 2 else float("nan")

    fine_mono = monotone_in_r(fine)
    return {
        "coarse_jump": float(jumps[k]),
        "at_interval": [r_lo, r_hi],
        "refine_factor": refine,
        "fine_jump": fine_jump,
        "jump_ratio": float(jumps[k]) / fine_jump if fine_jump else float("inf"),
        "fine_monotone": fine_mono["nonincreasing"],
        "fine_result": fine,
    }
