import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robdiv import fbp
from robdiv.errors import DivergedError, SolvabilityError, SolverError
from robdiv.model import check_assumptions, psi_roots, psi_plus_arr


def psi_plus_of(model, x):
    return psi_roots(model, float(x)).psi_plus


class TestIntegrateG:
    def test_initial_condition(self, baseline):
        b = 0.7
        run = fbp.integrate_g(baseline, b)
        assert run.g_values[0] == pytest.approx(1.0 / psi_plus_of(baseline, b),
                                                rel=1e-14)
        assert run.h_values[0] == pytest.approx(psi_plus_of(baseline, b) ** 0.9,
                                                rel=1e-14)

    # Thresholds above b* (+~0.01 on this model) make the log-derivative
    # blow up before reaching 0 because v crosses zero, so the lemma-style
    # scans sample thresholds at or below b*, where positivity is assured.

    def test_g_dominates_inverse_psi_under_perturbation(self, baseline,
                                                        baseline_bstar):
        # negative perturbation keeps g above 1/psi_plus down to the split
        # point, which is 0 for this model
        b = 0.5 * baseline_bstar
        run = fbp.integrate_g(baseline, b, gamma=-0.5 * baseline.rho,
                              x_eval=np.linspace(b, 1e-6, 200))
        inv_psi = 1.0 / psi_plus_arr(baseline, run.x_grid)
        assert np.all(run.g_values >= inv_psi - 1e-9)

    def test_perturbation_monotonicity(self, baseline, baseline_bstar):
        b = 0.5 * baseline_bstar
        xs = np.linspace(b, 1e-4, 150)
        g_hi = fbp.integrate_g(baseline, b, gamma=-0.25 * baseline.rho, x_eval=xs)
        g_lo = fbp.integrate_g(baseline, b, gamma=-0.5 * baseline.rho, x_eval=xs)
        assert np.all(g_hi.g_values[1:] < g_lo.g_values[1:])

    def test_threshold_monotonicity_in_b(self, baseline, baseline_bstar):
        b1, b2 = 0.5 * baseline_bstar, 0.95 * baseline_bstar
        xs = np.linspace(b1, 1e-4, 120)
        g1 = fbp.integrate_g(baseline, b1, x_eval=xs)
        g2 = fbp.integrate_g(baseline, b2)
        g2_at = g2.dense_eval(xs)[0]
        assert np.all(g1.g_values <= g2_at + 1e-9)

    @given(frac=st.tuples(st.floats(0.05, 1.0), st.floats(0.05, 1.0)))
    def test_threshold_monotonicity_random_pairs(self, baseline,
                                                 baseline_bstar, frac):
        f1, f2 = sorted(frac)
        if f2 - f1 < 0.02:
            return
        b1, b2 = f1 * baseline_bstar, f2 * baseline_bstar
        xs = np.linspace(b1, 1e-4, 60)
        g1 = fbp.integrate_g(baseline, b1, x_eval=xs)
        g2_at = fbp.integrate_g(baseline, b2).dense_eval(xs)[0]
        assert np.all(g1.g_values <= g2_at + 1e-8)

    def test_blow_up_is_diverged_error(self, baseline):
        with pytest.raises(DivergedError) as exc:
            fbp.integrate_g(baseline, 2.0)
        assert 0.0 < exc.value.last_x < 2.0

    def test_route_consistency(self, baseline, baseline_bstar):
        run = fbp.integrate_g(baseline, baseline_bstar,
                              x_eval=np.linspace(baseline_bstar, 0.0, 300))
        q = run.hp_values / ((1 - baseline.R) * run.h_values)
        rel = np.abs(run.g_values - q) / np.maximum(np.abs(run.g_values), 1.0)
        assert np.max(rel) <= 1e-8

    def test_step_stats_populated(self, baseline):
        run = fbp.integrate_g(baseline, 0.7)
        assert run.step_stats.accepted > 10
        assert run.step_stats.rejected >= 0
        assert run.step_stats.min_step > 0


class TestValueAtZero:
    def test_value_at_b_is_psi_plus(self, baseline):
        b = 0.63
        run = fbp.integrate_g(baseline, b)
        assert run.value(b) == pytest.approx(psi_plus_of(baseline, b), rel=1e-12)

    def test_bracket_signs(self, baseline, baseline_report):
        lo = baseline_report.b_lower + 0.02
        hi = baseline_report.b_hat - 1e-6
        assert fbp.shooting_residual(baseline, lo) > 0
        assert fbp.shooting_residual(baseline, hi) < 0

    def test_exp_route_matches_h_route(self, baseline, baseline_bstar):
        run = fbp.integrate_g(baseline, baseline_bstar,
                              x_eval=np.array([baseline_bstar, 0.0]))
        v0 = fbp.value_at_zero(baseline, run)
        h0 = run.h_values[-1] ** (1.0 / (1.0 - baseline.R))
        assert v0 == pytest.approx(h0, rel=1e-8)


class TestShoot:
    def test_bstar_inside_bracket(self, baseline_report, baseline_bstar):
        assert baseline_report.b_lower < baseline_bstar < baseline_report.b_hat

    def test_target_hit(self, baseline, baseline_bstar):
        assert abs(fbp.shooting_residual(baseline, baseline_bstar)) <= 1e-8

    def test_continuation_increases_toward_bstar(self, baseline, baseline_report,
                                                 baseline_bstar):
        diag = fbp.continuation_diagnostic(baseline, n_levels=2,
                                           report=baseline_report)
        (g1, b1), (g2, b2) = diag   # gamma = -rho/2, then -rho/4
        assert g1 < g2 < 0
        assert b1 < b2 < baseline_bstar

    def test_bracket_failure_raises(self, baseline, baseline_report):
        # a doctored b_hat far below the true threshold leaves no sign change
        fake = dataclasses.replace(baseline_report, b_hat=0.05)
        with pytest.raises(SolvabilityError):
            fbp.shoot(baseline, report=fake)

    def test_stability_under_tolerance_change(self, baseline, baseline_report,
                                              baseline_bstar):
        b2 = fbp.shoot(baseline, report=baseline_report, rtol=2e-12)
        assert abs(b2 - baseline_bstar) <= 10 * fbp.DEFAULT_TOL_B


class TestValueFunction:
    def test_boundary_conditions(self, baseline, baseline_solution, baseline_bstar):
        sol = baseline_solution
        i = np.searchsorted(sol.x_grid, baseline_bstar)
        pp = psi_plus_of(baseline, baseline_bstar)
        assert sol.value_at(baseline_bstar) == pytest.approx(pp, rel=1e-10)
        # nearest grid point below b*; slope reaches 1 exactly at b*
        assert sol.v_prime[i - 1] == pytest.approx(1.0, abs=1e-4)
        assert np.min(sol.v_prime[1:i]) >= 1.0 - 1e-6
        assert sol.v[0] == pytest.approx(baseline.xi0, abs=1e-8)

    def test_smooth_fit(self, baseline, baseline_solution, baseline_bstar):
        pp = psi_plus_of(baseline, baseline_bstar)
        assert baseline_solution.smooth_fit_gap * pp <= 1e-4

    def test_strictly_increasing(self, baseline_solution):
        assert np.all(np.diff(baseline_solution.v) > 0)

    def test_envelope_bounds(self, baseline, baseline_solution):
        sol = baseline_solution
        floor = sol.x_grid + baseline.xi0
        ceil = floor + sol.mu_bar / baseline.rho
        assert np.min(sol.v - floor) >= -1e-7
        assert np.max(sol.v - ceil) <= 1e-7

    def test_operator_negative_beyond_b_upper(self, baseline, baseline_solution,
                                              baseline_report):
        sol = baseline_solution
        mask = sol.x_grid > baseline_report.b_upper
        ex = sol.residual_exterior[-int(np.sum(mask)):]
        assert np.all(ex < 0.0)

    def test_value_dominates_at_bstar_only_with_converged_threshold(
            self, baseline, baseline_report, baseline_bstar):
        # value >= x + xi0 on [0, b] whenever the boundary value is hit
        run = fbp.integrate_g(baseline, baseline_bstar,
                              x_eval=np.linspace(baseline_bstar, 0.0, 150))
        v = run.value(run.x_grid)
        assert np.all(v >= run.x_grid + baseline.xi0 - 1e-6)

    def test_below_split_point_slope_is_bounded(self, humped_model):
        # thresholds at or below the split point give slopes <= 1
        rep = check_assumptions(humped_model)
        b = 0.5 * rep.b_lower
        run = fbp.integrate_g(humped_model, b,
                              x_eval=np.linspace(b, 1e-5, 120))
        v = run.value(run.x_grid)
        vp = run.g_values * v
        assert np.all(vp <= 1.0 + 1e-9)


class TestVerifyVi:
    def test_baseline_passes(self, baseline, baseline_solution):
        rep = fbp.verify_vi(baseline_solution, baseline)
        assert rep.passed, rep.checks

    def test_classical_limit_passes(self, baseline):
        sol0 = fbp.classical_solve(baseline.with_r(0.0))
        rep = fbp.verify_vi(sol0, baseline.with_r(0.0))
        assert rep.passed, rep.checks

    def test_perturbed_threshold_detected(self, baseline, baseline_report,
                                          baseline_bstar):
        # a five-percent-of-bracket upward perturbation drives v through
        # zero before x = 0; the blow-up error is itself the detection
        bad_up = baseline_bstar + 0.05 * (baseline_report.b_hat - baseline_bstar)
        with pytest.raises(DivergedError):
            fbp.build_value_function(baseline, bad_up, report=baseline_report)
        # perturbations inside the positivity window are caught by the
        # boundary-value check instead
        for bad_b in (baseline_bstar + 0.005,
                      baseline_bstar - 0.05 * (baseline_report.b_hat
                                               - baseline_bstar)):
            sol = fbp.build_value_function(baseline, bad_b, report=baseline_report)
            rep = fbp.verify_vi(sol, baseline)
            assert not rep.checks["boundary_value"]
            assert rep.boundary_gap > 1e-3

    def test_route_gap_within_tolerance(self, baseline_solution):
        assert baseline_solution.route_gap <= 1e-7


def test_unbounded_upper_landmark_pipeline():
    # drift stays clear of the discriminant root, so the upper landmark is
    # infinite; the solver caps its working range at 3*b_hat and runs as usual
    xs = np.linspace(0.0, 20.0, 161)
    mu = 1.0 + 0.5 * xs * np.exp(-xs)
    sg = np.full_like(xs, 1.0)
    from robdiv.model import SurplusModel, TabulatedC1

    model = SurplusModel(TabulatedC1(tuple(xs), tuple(mu), tuple(sg)),
                         rho=0.05, R=0.1, xi0=15.0)
    rep = check_assumptions(model)
    assert rep.all_pass
    assert rep.b_upper == float("inf")
    assert rep.to_dict()["b_upper"] == "inf"
    b = fbp.shoot(model, report=rep)
    assert rep.b_lower < b < rep.b_hat
    sol = fbp.build_value_function(model, b, report=rep)
    assert sol.x_grid[-1] <= 3.0 * rep.b_hat + 1e-9
    assert fbp.verify_vi(sol, model).passed


def test_classical_solve_requires_r_zero(baseline):
    with pytest.raises(SolverError):
        fbp.classical_solve(baseline)


def test_classical_solve_baseline(baseline, baseline_report):
    sol0 = fbp.classical_solve(baseline.with_r(0.0))
    rep0 = check_assumptions(baseline.with_r(0.0))
    assert 0.0 < sol0.b_star < rep0.b_hat
    # ambiguity can only lower the value
    sol = fbp.solve(baseline)
    xs = np.linspace(0.0, min(sol.x_grid[-1], sol0.x_grid[-1]), 50)
    assert np.all(sol.value_at(xs) <= sol0.value_at(xs) + 1e-8)
