import numpy as np
import pytest

from mflchaos.cloud import DistributionSpec, ParticleCloud, sample_cloud
from mflchaos.dynamics import (CloudFlowOracle, CoupledSystem, DivergenceError, GridFlowOracle,
                               OracleTimeError, SimParams, StationaryOracle, drift_mismatch,
                               em_step_interacting, em_step_reference, moment_bound, run_coupled)
from mflchaos.functionals import (CompositeExpectation, PairwiseInteraction, QuadraticPotential,
                                  ZeroFunctional)
from mflchaos.grid1d import GridDensity, fixed_point_solve
from mflchaos.rng import NoiseSource


def test_zero_drift_zero_noise_leaves_cloud_unchanged(rng):
    cloud = ParticleCloud(rng.standard_normal((5, 2)))
    flat = QuadraticPotential(0.0, strict=False)
    out = em_step_interacting(cloud, ZeroFunctional(2), flat, 1.0, 0.01, np.zeros((5, 2)))
    assert np.array_equal(out.positions, cloud.positions)


def test_ou_mean_and_variance_decay():
    """F = 0, u = x^2/2, sigma = 1: X_t is OU with mean x0 e^{-t/2}."""
    paths, dt, steps, x0 = 10_000, 0.01, 100, 2.0
    u, f = QuadraticPotential(1.0), ZeroFunctional()
    x = np.full((paths, 1, 1), x0)
    src = NoiseSource(tuple(range(paths)), np.zeros((paths, 1), dtype=int), 1, dt)
    for _ in range(steps):
        x = em_step_interacting(x, f, u, 1.0, dt, src.next())
    t = dt * steps
    # exact moments of the Euler-Maruyama recursion x <- (1 - dt/2) x + sqrt(dt) xi
    a = 1 - dt / 2
    mean, var = x0 * a ** steps, dt * (1 - a ** (2 * steps)) / (1 - a ** 2)
    assert abs(mean - x0 * np.exp(-t / 2)) < 5e-3
    se = np.sqrt(var / paths)
    assert abs(x.mean() - mean) < 3 * se
    assert abs(x.var() - var) < 3 * var * np.sqrt(2 / paths)


def test_pairwise_two_particle_step_by_hand():
    f = PairwiseInteraction(1.0, 1.0)
    u = QuadraticPotential(1.0)
    x = np.array([[0.0], [1.0]])
    dt = 0.1
    out = em_step_interacting(x, f, u, 1.0, dt, np.zeros_like(x))
    # D_mF(m, x_i) = (1/2) sum_j w'(x_i - x_j), w'(z) = -z e^{-z^2/2}
    wp = lambda z: -z * np.exp(-z * z / 2)
    drift = np.array([0.5 * wp(-1.0), 0.5 * wp(1.0)]) + 0.5 * x[:, 0]
    np.testing.assert_allclose(out[:, 0], x[:, 0] - dt * drift, atol=1e-15)


def test_divergence_is_reported(rng):
    x = np.array([[np.inf]])
    with pytest.raises(DivergenceError):
        em_step_interacting(x, ZeroFunctional(), QuadraticPotential(1.0), 1.0, 0.01, np.zeros((1, 1)))


def test_reference_step_equals_interacting_for_zero_functional(rng):
    x = rng.standard_normal((3, 7, 1))
    noise = 0.1 * rng.standard_normal(x.shape)
    u, f = QuadraticPotential(1.0), ZeroFunctional()
    oracle = StationaryOracle(f, GridDensity.gaussian())
    oracle.start(0.01)
    a = em_step_interacting(x, f, u, 1.0, 0.01, noise)
    b = em_step_reference(x, oracle, u, 1.0, 0.01, noise, 0.0)
    assert np.array_equal(a, b)


def test_oracle_time_mismatch(composite, quad):
    oracle = GridFlowOracle.from_spec(composite, quad, 1.0, DistributionSpec("gaussian"), M=256)
    oracle.start(0.01)
    oracle.drift(np.zeros((1, 1)), 0.0)
    with pytest.raises(OracleTimeError):
        oracle.drift(np.zeros((1, 1)), 0.5)
    oracle.advance()
    oracle.drift(np.zeros((1, 1)), 0.01)


def test_sim_params_validation():
    with pytest.raises(ValueError):
        SimParams(1.0, 0.05, 1.0)
    with pytest.raises(ValueError):
        SimParams(0.0, 0.01, 1.0)
    with pytest.raises(ValueError):
        SimParams(1.0, 0.01, 1.0, save_times=(0.5, 0.2))
    with pytest.raises(ValueError):
        SimParams(1.0, 0.01, 1.0, save_times=(2.0,))
    p = SimParams(1.0, 0.01, 1.0, save_times=(0.0, 0.5, 1.0), refine=1)
    assert p.n_steps == 200 and p.save_steps() == {0: 0.0, 100: 0.5, 200: 1.0}


# ---------------------------------------------------------------- coupled runs


def _system(f, u, n=16, seeds=(0, 1, 2), coupling="identical", oracle=None, spec=None):
    spec = spec or DistributionSpec("gaussian", mean=1.0)
    oracle = oracle or GridFlowOracle.from_spec(f, u, 1.0, spec, M=512)
    return CoupledSystem.build(spec, n, seeds, oracle, coupling)


def test_zero_functional_gap_is_zero(quad):
    f = ZeroFunctional()
    run = run_coupled(_system(f, quad), f, quad, SimParams(1.0, 0.01, 1.0, save_times=(0.0, 0.5, 1.0)))
    assert run.complete
    assert np.all(run.column("gap_sq_per_particle") == 0.0)
    assert np.all(run.column("drift_mismatch") == 0.0)


def test_gap_at_time_zero_is_definition(composite, quad):
    sys_ = _system(composite, quad, coupling="independent")
    run = run_coupled(sys_, composite, quad, SimParams(1.0, 0.01, 0.0, save_times=(0.0,)))
    expect = np.mean((sys_.interacting - sys_.reference) ** 2, axis=(1, 2))
    np.testing.assert_allclose(run.column("gap_sq_per_particle"), expect, rtol=1e-14)
    assert np.all(expect > 0)


def test_runs_are_bit_reproducible(composite, quad):
    p = SimParams(1.0, 0.01, 0.5, save_times=(0.0, 0.25, 0.5))
    a = run_coupled(_system(composite, quad), composite, quad, p)
    b = run_coupled(_system(composite, quad), composite, quad, p)
    assert a.rows == b.rows


def test_particle_relabelling_does_not_change_statistics(composite, quad):
    """Exchangeability: permuting particles together with their noise ids permutes the trajectory."""
    p = SimParams(1.0, 0.01, 0.5, save_times=(0.5,))
    s1 = _system(composite, quad, seeds=(5,))
    perm = np.random.default_rng(0).permutation(16)
    s2 = CoupledSystem(s1.interacting[:, perm], s1.reference[:, perm], s1.seeds, s1.ids[:, perm],
                       GridFlowOracle.from_spec(composite, quad, 1.0, DistributionSpec("gaussian", mean=1.0), M=512))
    a = run_coupled(s1, composite, quad, p).rows[0]
    b = run_coupled(s2, composite, quad, p).rows[0]
    for k in ("gap_sq_per_particle", "moment2", "drift_mismatch"):
        assert a[k] == pytest.approx(b[k], rel=1e-12)


def test_stationary_oracle_keeps_reference_in_equilibrium(composite, quad):
    star = fixed_point_solve(composite, quad, 1.0).density
    spec = DistributionSpec("grid_density", ref=star)
    sys_ = CoupledSystem.build(spec, 2000, (0, 1), StationaryOracle(composite, star))
    seen = []
    run = run_coupled(sys_, composite, quad, SimParams(1.0, 0.01, 2.0, save_times=(0.0, 1.0, 2.0)),
                      observers=[lambda t, xa, xb: seen.append(np.mean(xb ** 2))])
    assert run.complete
    m2 = star.moment(2)
    # two replicas of 2000 particles: standard error of the second moment about 0.03
    assert np.all(np.abs(np.array(seen) - m2) < 0.1)


def test_grid_and_cloud_oracles_agree(composite, quad):
    spec = DistributionSpec("gaussian", mean=1.0)
    p = SimParams(1.0, 0.01, 1.0, save_times=(1.0,))
    seeds = tuple(range(8))
    grid = GridFlowOracle.from_spec(composite, quad, 1.0, spec, M=2048)
    cloud = CloudFlowOracle(composite, quad, 1.0, spec, 100_000, seed=99)
    a = run_coupled(CoupledSystem.build(spec, 64, seeds, grid), composite, quad, p)
    b = run_coupled(CoupledSystem.build(spec, 64, seeds, cloud), composite, quad, p)
    ga, gb = a.column("gap_sq_per_particle").mean(), b.column("gap_sq_per_particle").mean()
    assert abs(ga - gb) / ga < 0.10


def test_drift_mismatch_zero_cases(composite, quad):
    x = np.random.default_rng(0).standard_normal((2, 10, 1))
    f = ZeroFunctional()
    orc = StationaryOracle(f, GridDensity.gaussian())
    orc.start(0.1)
    assert np.all(drift_mismatch(x, orc, f, 1.0) == 0)
    # oracle at the cloud's own empirical measure
    own = StationaryOracle(composite, ParticleCloud(x[0]))
    own.start(0.1)
    assert drift_mismatch(x[:1], own, composite, 1.0)[0] == pytest.approx(0.0, abs=1e-28)


def test_observer_failure_returns_partial_report(composite, quad):
    def boom(t, xa, xb):
        if t > 0.3:
            raise RuntimeError("observer broke")

    run = run_coupled(_system(composite, quad), composite, quad,
                      SimParams(1.0, 0.01, 1.0, save_times=(0.0, 0.25, 0.5, 0.75)), observers=[boom])
    assert not run.complete and "observer broke" in run.error
    assert sorted({r["t"] for r in run.rows}) == [0.0, 0.25, 0.5]


def test_diverging_replica_is_dropped(quad):
    class Exploding(ZeroFunctional):
        def empirical_drift(self, x):
            out = np.zeros_like(x)
            out[1] = np.inf
            return out

    f = Exploding()
    sys_ = _system(ZeroFunctional(), quad, seeds=(0, 1, 2))
    run = run_coupled(sys_, f, quad, SimParams(1.0, 0.01, 0.1, save_times=(0.0, 0.1)))
    assert run.complete and 1 in run.diverged
    assert {r["seed"] for r in run.rows if r["t"] == 0.1} == {0, 2}


def test_moment_bound_holds_along_run(composite, quad):
    spec = DistributionSpec("gaussian", mean=1.0)
    bound = moment_bound(composite, quad, 1.0, spec.mean[0] ** 2 + spec.cov_scalar)
    run = run_coupled(_system(composite, quad, n=64), composite, quad,
                      SimParams(1.0, 0.01, 5.0, save_times=tuple(np.arange(11) * 0.5)))
    assert run.column("moment2").max() < bound
    with pytest.raises(ValueError):
        moment_bound(composite, QuadraticPotential(0.0, strict=False), 1.0, 1.0)


def test_value_diagnostics_present(composite, quad):
    star = fixed_point_solve(composite, quad, 1.0).density
    run = run_coupled(_system(composite, quad), composite, quad,
                      SimParams(1.0, 0.01, 0.1, save_times=(0.1,)), star=star)
    d = run.diagnostics[0]
    assert d["value_gap"] == pytest.approx(d["bregman"] + 0.5 * d["entropy_vs_star"])
    assert d["replicas"] == 3 and np.isfinite(d["marginal_entropy"])


@pytest.mark.slow
def test_pairwise_gap_rate():
    from mflchaos.fitting import powerlaw

    f, u = PairwiseInteraction(1.0, 1.0), QuadraticPotential(1.0)
    spec = DistributionSpec("gaussian", mean=1.0)
    ns = [8, 16, 32, 64, 128, 256, 512]
    sups = []
    for n in ns:
        orc = GridFlowOracle.from_spec(f, u, 1.0, spec, M=1024)
        run = run_coupled(CoupledSystem.build(spec, n, tuple(range(8)), orc), f, u,
                          SimParams(1.0, 0.01, 10.0, save_times=tuple(np.arange(1, 21) * 0.5)))
        _, g = run.table("gap_sq_per_particle")
        sups.append(np.max(g.mean(axis=1)))
    slope = powerlaw(np.array(ns), np.array(sups))[0]
    assert -1.35 <= slope <= -0.65
