import numpy as np
import pytest

from robdiv import sensitivity
from robdiv.errors import ConfigError
from robdiv.model import check_assumptions


@pytest.fixture(scope="module")
def base_sweep(baseline):
    return sensitivity.sweep(baseline, np.linspace(0.0, 0.1, 6), [0.4, 0.8, 1.2])


def test_degenerate_grid_reduces_to_classical(baseline):
    res = sensitivity.sweep(baseline, [0.0], [0.5, 1.0])
    assert res.b_star[0] == res.classical_b
    assert np.allclose(res.v_at[:, 0], res.classical_v)


def test_columns_decrease_in_r(base_sweep):
    mono = sensitivity.monotone_in_r(base_sweep)
    assert mono["nonincreasing"]
    assert mono["below_classical"]
    # strict beyond solver tolerance on this model
    diffs = np.diff(base_sweep.v_at, axis=1)
    assert np.max(diffs) < -1e-8


def test_b_star_within_per_r_landmarks(baseline, base_sweep):
    for j, r in enumerate(base_sweep.r_grid):
        if r == 0.0 or not base_sweep.assumption_valid[j]:
            continue
        rep = check_assumptions(baseline.with_r(float(r)))
        assert rep.b_lower < base_sweep.b_star[j] < rep.b_hat


def test_small_r_approaches_classical(baseline):
    res = sensitivity.sweep(baseline, [0.0, 1e-3, 1e-2], [0.4, 0.8])
    gap_small = np.max(np.abs(res.v_at[:, 1] - res.classical_v))
    gap_big = np.max(np.abs(res.v_at[:, 2] - res.classical_v))
    assert gap_small < gap_big
    assert gap_small <= 10.0 * gap_big


def test_invalid_r_flagged_not_solved(baseline):
    res = sensitivity.sweep(baseline, [0.0, 0.05, 0.8], [0.5])
    assert res.assumption_valid.tolist() == [True, True, False]
    assert np.isnan(res.b_star[2])
    assert "cond_iii" in list(res.failures.values())[0]


def test_valid_r_interval(baseline):
    lo, hi = sensitivity.valid_r_interval(baseline, r_max=0.5)
    assert lo == 0.0
    assert 0.15 < hi < 0.3
    assert check_assumptions(baseline.with_r(hi)).all_pass


def test_parallel_matches_serial(baseline):
    grid = np.linspace(0.0, 0.08, 4)
    a = sensitivity.sweep(baseline, grid, [0.6], n_jobs=1)
    b = sensitivity.sweep(baseline, grid, [0.6], n_jobs=2)
    assert np.array_equal(a.b_star, b.b_star)
    assert np.array_equal(a.v_at, b.v_at)


def test_continuity_report(baseline, base_sweep):
    rep = sensitivity.continuity_report(baseline, base_sweep, refine=2.0)
    assert rep["fine_jump"] < rep["coarse_jump"]
    assert rep["jump_ratio"] > 1.4
    assert rep["fine_monotone"]


def test_summary_serializes(base_sweep):
    import json

    blob = json.dumps(base_sweep.to_summary())
    assert "columns_nonincreasing_in_r" in blob


def test_empty_inputs_rejected(baseline):
    with pytest.raises(ConfigError):
        sensitivity.sweep(baseline, [], [0.5])
    with pytest.raises(ConfigError):
        sensitivity.sweep(baseline, [0.1], [])
