import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from symbranch import RngStream
from symbranch.core import BudgetError, ParameterError
from symbranch.wedge import build_geometry, critical_p, exit_axis_probability
from symbranch.wedge_mc import ensemble_exit, simulate_exit


def test_exit_point_has_exactly_one_zero():
    ens = ensemble_exit(1.0, 2.0, 0.3, 1e-3, 3000, rng=0)
    zx, zy = ens.exit_x == 0.0, ens.exit_y == 0.0
    assert np.all(zx ^ zy)
    assert np.all(ens.exit_x >= 0) and np.all(ens.exit_y >= 0)
    assert np.all(ens.exit_time > 0)
    assert set(np.unique(ens.axis)) <= {"x", "y"}


def test_start_next_to_boundary():
    s = simulate_exit(1e-9, 1.0, 0.0, 1e-4, RngStream(1))
    assert s.axis == "y"
    assert s.exit_point[0] == 0.0
    assert s.exit_point[1] == pytest.approx(1.0, abs=0.05)
    assert s.exit_time < 1e-3


def test_symmetric_start_splits_evenly():
    ens = ensemble_exit(1.0, 1.0, 0.0, 1e-4, 10_000, rng=2)
    assert ens.axis_probability("x").z_score(0.5) <= 3.0
    assert ens.axis_probability("x").mean + ens.axis_probability("y").mean == pytest.approx(1.0)


def test_axis_probability_asymmetric_start():
    ens = ensemble_exit(2.0, 1.0, 0.0, 1e-4, 10_000, rng=3)
    exact = exit_axis_probability(build_geometry(2.0, 1.0, 0.0))
    assert ens.axis_probability("x").z_score(exact) <= 3.0


def test_reflected_start_mirrors_law():
    a = ensemble_exit(2.0, 1.0, -0.4, 1e-3, 5000, rng=4)
    b = ensemble_exit(1.0, 2.0, -0.4, 1e-3, 5000, rng=5)
    # exchanging the start exchanges the axes in law
    assert ks_2samp(a.exit_x[a.on_x], b.exit_y[~b.on_x]).statistic <= 0.04
    assert abs(a.axis_probability("x").mean - b.axis_probability("y").mean) <= 0.03


def test_martingale_mean():
    ens = ensemble_exit(1.0, 1.0, -0.5, 1e-4, 10_000, rng=5)
    assert ens.coordinate_mean(1).z_score(1.0) <= 3.0
    assert ens.coordinate_mean(2).z_score(1.0) <= 3.0


def test_ks_against_theory():
    for rho in (-0.5, 0.0, 0.5):
        ens = ensemble_exit(1.0, 1.0, rho, 1e-4, 10_000, rng=6)
        assert ens.ks_against_theory("x") <= 0.02
        assert ens.ks_against_theory("y") <= 0.02


def test_exit_time_mean_stabilises_for_negative_rho():
    ens = ensemble_exit(1.0, 1.0, -0.9, 1e-4, 10_000, rng=7)
    est, suspect = ens.mean_exit_time()
    assert not suspect
    half = np.cumsum(ens.exit_time) / np.arange(1, ens.n + 1)
    assert half[-1] / half[ens.n // 2] == pytest.approx(1.0, abs=0.1)
    assert est.se < 0.05 * est.mean


def test_exit_time_suspect_when_mean_infinite():
    ens = ensemble_exit(1.0, 1.0, 0.5, 1e-3, 10_000, rng=8)
    assert critical_p(0.5) < 2.0
    assert ens.mean_exit_time()[1]


def test_moment_above_critical_order_blows_up():
    p = 1.5 * critical_p(0.0)
    ens = ensemble_exit(1.0, 1.0, 0.0, 1e-3, 100_000, rng=9)
    small, large = ens.running_moment(p, [1000, 100_000])
    assert large / small > 2.0
    below = ens.running_moment(0.5 * critical_p(0.0), [1000, 100_000])
    assert below[1] / below[0] == pytest.approx(1.0, abs=0.2)


def test_ks_decreases_with_dt():
    ks = []
    for dt in (0.08, 0.02, 0.005):
        ens = ensemble_exit(1.0, 1.0, 0.0, dt, 40_000, rng=3)
        ks.append(ens.ks_against_theory("x") + ens.ks_against_theory("y"))
    assert ks[0] > ks[1] > ks[2]


def test_fixed_step_mode_agrees():
    ens = ensemble_exit(1.0, 1.0, -0.5, 2e-3, 1000, rng=10, adaptive=False)
    assert ens.ks_against_theory("x") <= 0.05


def test_seeded_reproducibility():
    a = ensemble_exit(1.0, 1.0, 0.2, 1e-3, 500, rng=11)
    b = ensemble_exit(1.0, 1.0, 0.2, 1e-3, 500, rng=11)
    np.testing.assert_array_equal(a.exit_time, b.exit_time)


def test_csv(tmp_path):
    ens = ensemble_exit(1.0, 1.0, 0.0, 1e-3, 20, rng=12)
    lines = ens.write_csv(tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "# schema=1"
    assert lines[1] == "replica,exit_time,exit_x,exit_y,axis"
    assert len(lines) == 22
    row = lines[2].split(",")
    assert float(row[2]) == ens.exit_x[0] and row[4] == ens.axis[0]


def test_budget_error_carries_partial_state():
    with pytest.raises(BudgetError) as info:
        simulate_exit(1.0, 1.0, 0.0, 1e-6, RngStream(0), max_steps=5, adaptive=False)
    part = info.value.partial
    assert part["t"][0] == pytest.approx(5e-6)
    with pytest.raises(BudgetError):
        ensemble_exit(1.0, 1.0, 0.0, 1e-6, 10, rng=0, max_steps=5, adaptive=False)


@pytest.mark.parametrize("args", [(0.0, 1.0, 0.0, 1e-3), (1.0, 1.0, 1.0, 1e-3), (1.0, 1.0, 0.0, 0.0)])
def test_argument_errors(args):
    with pytest.raises(ParameterError):
        simulate_exit(*args, RngStream(0))


def test_mean_of_small_ensemble_needs_two():
    with pytest.raises(ParameterError):
        ensemble_exit(1.0, 1.0, 0.0, 1e-3, 0, rng=0)
    assert math.isfinite(ensemble_exit(1.0, 1.0, 0.0, 1e-3, 2, rng=0).coordinate_mean().mean)
