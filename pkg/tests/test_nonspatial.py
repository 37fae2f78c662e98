import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from oracles import ito_moments
from symbranch import ModelParams, RngStream
from symbranch.core import ParameterError
from symbranch.nonspatial import (PairState, default_dt, mixed_moment_exact, second_moment_exact,
                                  simulate_ensemble, simulate_pair_path, step_pair,
                                  time_change_accumulator, time_change_mean_exact)
from symbranch.stats import estimate_ensemble
from symbranch.wedge_mc import ensemble_exit


def test_default_dt():
    assert default_dt(1.0) == 1e-3
    assert default_dt(4.0) == pytest.approx(2.5e-4)
    assert default_dt(0.2) == 1e-3


def test_absorbed_state_does_not_move():
    s = step_pair(PairState(0.0, 3.0), ModelParams(0.4, 2.0), 0.01, RngStream(0))
    assert (s.u, s.v) == (0.0, 3.0)
    assert s.t == pytest.approx(0.01)
    assert s.absorbed


def test_anticorrelated_sum_is_conserved():
    p = ModelParams(-1.0, 1.0)
    s = PairState(1.0, 1.0)
    rng = RngStream(1)
    for _ in range(2000):
        s = step_pair(s, p, 1e-3, rng)
        if s.absorbed:
            break
        assert s.u + s.v == pytest.approx(2.0, abs=1e-12)


def test_batched_step_matches_shapes():
    s = PairState(np.ones(5), np.ones(5), 0.0, np.zeros(5, bool))
    out = step_pair(s, ModelParams(0.0, 1.0), 1e-3, RngStream(2))
    assert out.u.shape == (5,)
    assert not out.absorbed.any()


def test_step_rejects_bad_dt():
    with pytest.raises(ParameterError):
        step_pair(PairState(1.0, 1.0), ModelParams(0.0, 1.0), 0.0, RngStream(0))


@pytest.mark.parametrize("rho, kappa", [(-0.5, 1.0), (0.7, 2.0)])
def test_u_is_a_martingale(rho, kappa):
    ens = simulate_ensemble(1.0, 1.0, ModelParams(rho, kappa), 1.0, 1e-3, None, 100_000, rng=3)
    est = estimate_ensemble(ens.u[-1])
    assert est.z_score(1.0) <= 3.0


def test_closed_forms_agree_with_ode_oracle():
    t = np.array([0.5, 1.0, 2.0, 5.0])
    for rho in (-0.5, 0.0, 0.5):
        uv, uu = ito_moments(rho, 1.3, t)
        np.testing.assert_allclose(mixed_moment_exact(rho, 1.3, t), uv, rtol=1e-9)
        np.testing.assert_allclose(second_moment_exact(rho, 1.3, t), uu, rtol=1e-9)
    assert float(second_moment_exact(0.5, 1.0, 1.0)) == pytest.approx(2.2974, abs=1e-4)


def test_ensemble_mixed_moment_rho_zero():
    ens = simulate_ensemble(1.0, 1.0, ModelParams(0.0, 1.0), 2.0, 1e-3, None, 100_000, rng=4)
    assert estimate_ensemble(ens.u[-1] * ens.v[-1]).z_score(1.0) <= 3.0


def test_ensemble_second_moment_rho_half():
    ens = simulate_ensemble(1.0, 1.0, ModelParams(0.5, 1.0), 1.0, 1e-3, None, 100_000, rng=5)
    target = float(ito_moments(0.5, 1.0, 1.0)[1][0])
    est = estimate_ensemble(ens.u[-1] ** 2)
    assert abs(est.mean - target) <= max(3.0 * est.se, 0.02 * target)


def test_zero_horizon_echoes_initial_state():
    out = simulate_pair_path(0.7, 1.3, ModelParams(0.1, 1.0), 0.0, 1e-3, [0.0], rng=0)
    assert len(out) == 1
    assert (out[0].u, out[0].v, out[0].t) == (0.7, 1.3, 0.0)
    ens = simulate_ensemble(0.7, 1.3, ModelParams(0.1, 1.0), 0.0, 1e-3, None, 3, rng=0)
    np.testing.assert_array_equal(ens.u, 0.7)


def test_empty_checkpoints_return_final_state():
    out = simulate_pair_path(1.0, 1.0, ModelParams(0.0, 1.0), 0.1, 1e-3, [], rng=0)
    assert len(out) == 1
    assert out[0].t == pytest.approx(0.1)


def test_checkpoints_validated():
    with pytest.raises(ParameterError):
        simulate_pair_path(1.0, 1.0, ModelParams(0.0, 1.0), 1.0, 1e-3, [0.5, 0.2])
    with pytest.raises(ParameterError):
        simulate_pair_path(1.0, 1.0, ModelParams(0.0, 1.0), 1.0, 0.3, [1.0])


def test_path_is_reproducible():
    a = simulate_pair_path(1.0, 1.0, ModelParams(0.3, 1.0), 0.5, 1e-3, [0.25, 0.5], rng=9)
    b = simulate_pair_path(1.0, 1.0, ModelParams(0.3, 1.0), 0.5, 1e-3, [0.25, 0.5], rng=9)
    assert a == b


def test_time_change_constant_after_absorption():
    p = ModelParams(0.0, 5.0)
    for seed in range(20):
        path = simulate_pair_path(0.2, 0.2, p, 5.0, 1e-3, rng=seed, dense=True)
        hit = np.flatnonzero(path.u * path.v == 0.0)
        if hit.size:
            acc = time_change_accumulator(path)
            k = hit[0]
            assert np.all(acc[k + 1:] == acc[k + 1])
            assert np.all(np.diff(acc) >= 0)
            return
    pytest.fail("no path was absorbed")


def test_time_change_mean():
    p = ModelParams(0.5, 1.0)
    ens = simulate_ensemble(1.0, 1.0, p, 1.0, 1e-3, None, 20_000, rng=6)
    est = estimate_ensemble(ens.time_change[-1])
    assert est.z_score(float(time_change_mean_exact(0.5, 1.0, 1.0))) <= 3.0


def test_time_change_dense_matches_ensemble_rule():
    p = ModelParams(0.2, 1.0)
    path = simulate_pair_path(1.0, 1.0, p, 0.2, 1e-3, rng=RngStream(4), dense=True)
    acc = time_change_accumulator(path)
    manual = sum(0.5 * 1e-3 * (path.u[i] * path.v[i] + path.u[i + 1] * path.v[i + 1])
                 for i in range(len(path.u) - 1))
    assert acc[-1] == pytest.approx(manual, rel=1e-12)


def test_time_change_has_exit_time_law():
    # after absorption the accumulated clock is the quadrant exit time of the
    # time-changed Brownian motion
    ens = simulate_ensemble(1.0, 1.0, ModelParams(0.0, 1.0), 50.0, 1e-3, None, 10_000, rng=1)
    assert ens.absorbed[-1].mean() > 0.99
    mc = ensemble_exit(1.0, 1.0, 0.0, 1e-4, 10_000, rng=2)
    assert ks_2samp(ens.time_change[-1], mc.exit_time).statistic <= 0.03


def test_zero_start_is_absorbed():
    ens = simulate_ensemble(0.0, 2.0, ModelParams(0.0, 1.0), 0.01, 1e-3, None, 4, rng=0)
    assert ens.absorbed.all()
    assert math.isclose(ens.v[-1, 0], 2.0)
