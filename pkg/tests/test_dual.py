import math

import numpy as np
import pytest

from oracles import ito_moments, lattice_mixed_moment, lattice_second_moment
from symbranch import ModelParams, RngStream
from symbranch.core import ParameterError
from symbranch.dual import (DualState, HeavyTailWarning, MomentSpec, conditional_weights, dual_step,
                            dual_weights, lyapunov_sweep, moment_via_duality, pair_counts,
                            simulate_dual, write_moment_table)
from symbranch.lattice import LatticeConfig
from symbranch.stats import ks_statistic

ONE = LatticeConfig(1, 1)


def test_start_and_pair_counts():
    cfg = LatticeConfig(1, 5)
    st = DualState.start(cfg, [0, 0], [0, 3], n_replicas=2)
    assert st.n_particles == 4
    S, D = pair_counts(st)
    assert S.tolist() == [1, 1]
    assert D.tolist() == [2, 2]
    assert st.particles(1)[3].site == (3,)
    with pytest.raises(ParameterError):
        DualState.start(cfg)


def test_single_particle_has_no_pairs():
    rec = simulate_dual(ModelParams(0.3, 1.0), LatticeConfig(1, 6), [0], [], [0.5, 3.0], 50, rng=0)
    assert np.all(rec.L_same == 0) and np.all(rec.L_diff == 0)


def test_different_colours_on_one_site_never_flip():
    rec = simulate_dual(ModelParams(0.3, 2.0), ONE, [0], [0], [0.7, 2.0], 100, rng=1)
    np.testing.assert_allclose(rec.L_diff, [[0.7] * 100, [2.0] * 100], rtol=1e-12)
    assert np.all(rec.L_same == 0)


def test_same_colour_clock_is_truncated_exponential():
    kappa, t = 1.0, 1.0
    rec = simulate_dual(ModelParams(0.0, kappa), ONE, [0, 0], [], [t], 100_000, rng=2)
    ls = rec.L_same[0]
    np.testing.assert_allclose(ls + rec.L_diff[0], t, rtol=1e-12)

    # continuous part on [0, t) as a sub-distribution; the atom at t enters via the tail gap
    def cdf(x):
        return 1.0 - np.exp(-kappa * np.minimum(x, t))

    assert ks_statistic(ls[ls < t], cdf, n_total=ls.size) <= 0.02
    assert np.mean(ls == t) == pytest.approx(math.exp(-kappa * t), abs=0.005)


def test_step_keeps_particles_and_pair_time():
    cfg = ONE
    st = DualState.start(cfg, [0, 0, 0], [], n_replicas=20)
    rng = RngStream(3)
    for _ in range(10):
        st = dual_step(st, ModelParams(0.2, 1.5), cfg, rng)
        assert st.n_particles == 3
        assert set(np.unique(st.colors)) <= {1, 2}
    # every pair shares the single site, so the clocks split 3 t between them
    np.testing.assert_allclose(st.L_same + st.L_diff, 3.0 * st.t, rtol=1e-12)
    with pytest.raises(ParameterError):
        dual_step(st, ModelParams(0.2, 1.5), cfg, rng, flip_rule="last")


def test_first_moment_is_exactly_one():
    run = moment_via_duality(MomentSpec(((0,),), ()), ModelParams(0.4, 3.0), 2.0, 500, rng=4,
                             config=LatticeConfig(1, 8))
    assert run.estimates[0].value == 1.0
    assert run.estimates[0].estimate.se == 0.0


def test_mixed_moment_single_site():
    run = moment_via_duality(MomentSpec(((0,),), ((0,),)), ModelParams(-0.5, 1.0), 2.0, 100_000, rng=5)
    est = run.estimates[0].estimate
    # no flips are possible, so every weight equals exp(rho kappa T) up to rounding
    assert abs(est.mean - math.exp(-1.0)) <= max(3.0 * est.se, 1e-12)
    assert est.mean == pytest.approx(0.3679, abs=1e-4)


def test_second_moment_single_site():
    run = moment_via_duality(MomentSpec(((0,), (0,)), ()), ModelParams(0.5, 1.0), 1.0, 100_000, rng=6)
    assert run.estimates[0].estimate.z_score(1.0 + (math.exp(0.5) - 1.0) / 0.5) <= 3.0


def test_conditional_estimator_is_exact_on_one_site():
    w = conditional_weights(ModelParams(0.5, 1.0), ONE, [0, 0], [], [1.0, 2.0], 10, rng=0)
    np.testing.assert_allclose(w[0], 1.0 + (math.exp(0.5) - 1.0) / 0.5, rtol=1e-10)
    np.testing.assert_allclose(w[1], 1.0 + (math.exp(1.0) - 1.0) / 0.5, rtol=1e-10)
    w = conditional_weights(ModelParams(-0.5, 1.0), ONE, [0], [0], [2.0], 10, rng=0)
    np.testing.assert_allclose(w[0], math.exp(-1.0), rtol=1e-10)


@pytest.mark.parametrize("estimator", ["gillespie", "conditional"])
def test_torus_moments_match_feynman_kac(estimator):
    cfg = LatticeConfig(1, 4)
    rho, kappa, T = 0.3, 1.0, 1.5
    p = ModelParams(rho, kappa)
    uu = moment_via_duality(MomentSpec(((0,), (0,)), ()), p, T, 20_000, rng=7, config=cfg,
                            estimator=estimator)
    uv = moment_via_duality(MomentSpec(((0,),), ((0,),)), p, T, 20_000, rng=8, config=cfg,
                            estimator=estimator)
    assert uu.estimates[0].estimate.z_score(lattice_second_moment(4, rho, kappa, T)) <= 3.0
    assert uv.estimates[0].estimate.z_score(lattice_mixed_moment(4, rho, kappa, T)) <= 3.0


def test_conditional_has_smaller_spread():
    cfg = LatticeConfig(1, 4)
    p = ModelParams(0.3, 2.0)
    spec = MomentSpec(((0,), (0,)), ())
    g = moment_via_duality(spec, p, 2.0, 5000, rng=9, config=cfg, warn=False)
    c = moment_via_duality(spec, p, 2.0, 5000, rng=9, config=cfg, estimator="conditional")
    assert c.estimates[0].estimate.se < g.estimates[0].estimate.se


@pytest.mark.parametrize("rule", ["uniform", "first"])
def test_flip_rules_agree_between_estimators(rule):
    cfg = LatticeConfig(1, 3)
    p = ModelParams(-0.2, 1.0)
    spec = MomentSpec(((0,), (0,), (1,)), ((0,),))
    g = moment_via_duality(spec, p, 1.0, 40_000, rng=10, config=cfg, flip_rule=rule, warn=False)
    c = moment_via_duality(spec, p, 1.0, 4000, rng=11, config=cfg, flip_rule=rule,
                           estimator="conditional")
    a, b = g.estimates[0].estimate, c.estimates[0].estimate
    assert abs(a.mean - b.mean) <= 3.0 * math.hypot(a.se, b.se)


def test_constant_initial_data_on_one_site():
    p = ModelParams(0.4, 1.0)
    uv, uu = ito_moments(0.4, 1.0, [0.5, 1.5], u0=2.0, v0=3.0)
    w = conditional_weights(p, ONE, [0, 0], [], [0.5, 1.5], 5, rng=0, init=(2.0, 3.0))
    np.testing.assert_allclose(w[:, 0], uu, rtol=1e-8)
    run = moment_via_duality(MomentSpec(((0,), (0,)), ()), p, 1.5, 50_000, rng=1, init=(2.0, 3.0))
    assert run.estimates[0].estimate.z_score(uu[1]) <= 3.0
    w = conditional_weights(p, ONE, [0], [0], [1.5], 5, rng=0, init=(2.0, 3.0))
    np.testing.assert_allclose(w[0], uv[1], rtol=1e-8)


def test_dual_weights_formula():
    rec = simulate_dual(ModelParams(0.5, 2.0), ONE, [0], [0], [0.25], 3, rng=0)
    np.testing.assert_allclose(dual_weights(rec, ModelParams(0.5, 2.0)), math.exp(0.25), rtol=1e-12)


def test_checkpoint_and_estimator_errors():
    with pytest.raises(ParameterError):
        simulate_dual(ModelParams(0, 1), ONE, [0], [], [], 3)
    with pytest.raises(ParameterError):
        simulate_dual(ModelParams(0, 1), ONE, [0], [], [2.0, 1.0], 3)
    with pytest.raises(ParameterError):
        moment_via_duality(MomentSpec(), ModelParams(0, 1), 1.0, 3, estimator="exact")
    with pytest.raises(ParameterError):
        conditional_weights(ModelParams(0, 1), ONE, [0] * 9, [], [1.0], 3)


def test_heavy_tail_warning():
    spec = MomentSpec(((0,), (0,)), ())
    with pytest.warns(HeavyTailWarning):
        run = moment_via_duality(spec, ModelParams(0.5, 5.0), 6.0, 2000, rng=12,
                                 config=LatticeConfig(1, 16))
    assert run.any_heavy_tail


def test_lyapunov_sweep_shapes():
    rows = lyapunov_sweep(2, [ModelParams(-0.5, 1.0)], np.linspace(1, 4, 8), LatticeConfig(1, 8), 500,
                          rng=0, estimator="conditional")
    assert len(rows) == 1
    assert rows[0].times.shape == (8,)
    assert np.all(np.isfinite(rows[0].log_moments))
    with pytest.raises(ParameterError):
        lyapunov_sweep(1, [ModelParams(0, 1)], [1, 2, 3, 4], LatticeConfig(1, 4), 10)


def test_moment_table(tmp_path):
    run = moment_via_duality(MomentSpec(((0,),), ((0,),)), ModelParams(0.0, 1.0), [0.5, 1.0], 100, rng=0)
    lines = write_moment_table([run], tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# schema=1"
    assert lines[1].split(",")[:5] == ["rho", "kappa", "n", "m", "T"]
    assert len(lines) == 4


def test_seed_determinism():
    a = simulate_dual(ModelParams(0.2, 1.0), LatticeConfig(2, 3), [(0, 0)], [(1, 1)], [1.0], 20, rng=3)
    b = simulate_dual(ModelParams(0.2, 1.0), LatticeConfig(2, 3), [(0, 0)], [(1, 1)], [1.0], 20, rng=3)
    np.testing.assert_array_equal(a.L_diff, b.L_diff)
