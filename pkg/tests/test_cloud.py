import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflchaos.cloud import (DistributionSpec, LeaveOneOut, NormalizationError, ParticleCloud,
                            WeightedMeasure, empirical_moment, leave_one_out, mixture, sample_cloud)
from mflchaos.grid1d import GridDensity


def test_cloud_validation():
    with pytest.raises(ValueError):
        ParticleCloud(np.empty((0, 1)))
    with pytest.raises(ValueError):
        ParticleCloud([[np.nan]])
    with pytest.raises(ValueError):
        ParticleCloud([[1.0], [2.0]], ids=[0])
    c = ParticleCloud([1.0, 2.0, 3.0])
    assert (c.n, c.d) == (3, 1)


def test_csv_round_trip(tmp_path):
    c = ParticleCloud(np.random.default_rng(0).standard_normal((5, 2)), ids=[4, 3, 2, 1, 0])
    c.to_csv(tmp_path / "c.csv")
    back = ParticleCloud.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.positions, c.positions)
    assert np.array_equal(back.ids, c.ids)


def test_sampling_is_seeded():
    spec = DistributionSpec("gaussian", dim=2, mean=(1.0, -1.0), cov_scalar=0.5)
    a, b = sample_cloud(spec, 50, 3), sample_cloud(spec, 50, 3)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, sample_cloud(spec, 50, 4).positions)
    assert not np.array_equal(a.positions, sample_cloud(spec, 50, 3, "reference-init").positions)


def test_sample_laws_match_moments():
    x = sample_cloud(DistributionSpec("uniform", a=-1.0, b=3.0), 200_000, 0).positions
    assert x.mean() == pytest.approx(1.0, abs=0.02)
    assert x.var() == pytest.approx(16 / 12, rel=0.02)
    g = GridDensity.gaussian(0.5, 2.0, L=10, M=1000)
    y = sample_cloud(DistributionSpec("grid_density", ref=g), 200_000, 1).positions
    assert y.mean() == pytest.approx(0.5, abs=0.02)
    assert y.var() == pytest.approx(2.0, rel=0.02)


@pytest.mark.parametrize("kwargs", [dict(kind="gaussian", cov_scalar=0.0), dict(kind="uniform", a=1.0, b=1.0),
                                    dict(kind="grid_density"), dict(kind="cauchy"), dict(kind="gaussian", dim=0)])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DistributionSpec(**kwargs)


def test_empirical_moments_hand_values():
    c = ParticleCloud([[1.0, 1.0], [0.0, 2.0]])
    # |x|^2 = 2 and 4
    assert empirical_moment(c, 2) == pytest.approx(3.0)
    assert empirical_moment(c, 4) == pytest.approx(10.0)
    assert empirical_moment(c, 6) == pytest.approx(36.0)
    with pytest.raises(ValueError):
        empirical_moment(c, 3)


def test_leave_one_out_weights_and_reinsert():
    c = ParticleCloud([0.0, 1.0, 5.0])
    loo = leave_one_out(c, 1)
    pts, w = loo.atoms()
    assert pts is c.positions  # a view, no copy
    np.testing.assert_allclose(w, [0.5, 0.0, 0.5])
    p2, w2 = loo.reinsert().atoms()
    assert np.sum(w2) == pytest.approx(1.0)
    for x, target in zip(c.positions[:, 0], [1 / 3] * 3):
        assert np.sum(w2[p2[:, 0] == x]) == pytest.approx(target)


def test_leave_one_out_errors():
    with pytest.raises(ValueError):
        LeaveOneOut(ParticleCloud([1.0]), 0)
    with pytest.raises(IndexError):
        LeaveOneOut(ParticleCloud([1.0, 2.0]), 2)


def test_mixture_of_measures():
    m = mixture([ParticleCloud([0.0, 2.0]), WeightedMeasure([[1.0]], [1.0])], [0.5, 0.5])
    np.testing.assert_allclose(m.weights, [0.25, 0.25, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.randoms(use_true_random=False))
def test_permutation_keeps_the_measure(xs, rnd):
    c = ParticleCloud(xs)
    perm = list(range(c.n))
    rnd.shuffle(perm)
    p = c.permuted(perm)
    assert np.array_equal(np.sort(p.positions[:, 0]), np.sort(c.positions[:, 0]))
    assert np.array_equal(p.positions[np.argsort(p.ids)], c.positions)
    assert empirical_moment(p, 2) == pytest.approx(empirical_moment(c, 2))


def test_grid_density_rejects_unnormalised():
    with pytest.raises(NormalizationError):
        GridDensity(1.0, np.ones(4))
