import numpy as np
import pytest

from mflchaos.rng import NoiseSource, stream


def test_stream_is_reproducible_and_keyed():
    a = stream(7, "noise", 3).standard_normal(5)
    assert np.array_equal(a, stream(7, "noise", 3).standard_normal(5))
    assert not np.array_equal(a, stream(7, "noise", 4).standard_normal(5))
    assert not np.array_equal(a, stream(7, "init", 3).standard_normal(5))
    assert not np.array_equal(a, stream(8, "noise", 3).standard_normal(5))


def test_unknown_substream():
    with pytest.raises(ValueError):
        stream(0, "bogus")


def _collect(src, k):
    return np.stack([src.next().copy() for _ in range(k)])


def test_chunk_size_does_not_change_values():
    ids = np.arange(4)[None]
    a = _collect(NoiseSource([3], ids, 2, 0.01, chunk=3), 10)
    b = _collect(NoiseSource([3], ids, 2, 0.01, chunk=512), 10)
    assert np.array_equal(a, b)


def test_particle_noise_independent_of_population():
    small = _collect(NoiseSource([1], np.array([[5, 9]]), 1, 0.1), 6)
    big = _collect(NoiseSource([1], np.array([[0, 5, 7, 9]]), 1, 0.1), 6)
    assert np.array_equal(small[:, 0, 0], big[:, 0, 1])
    assert np.array_equal(small[:, 0, 1], big[:, 0, 3])


def test_refinement_preserves_the_brownian_path():
    ids = np.arange(3)[None]
    coarse = _collect(NoiseSource([2], ids, 1, 0.01), 8)
    fine = _collect(NoiseSource([2], ids, 1, 0.01, refine=2), 32)
    np.testing.assert_allclose(fine.reshape(8, 4, 1, 3, 1).sum(axis=1), coarse, atol=1e-15)


def test_refined_increments_have_fine_variance():
    src = NoiseSource([0], np.arange(200)[None], 1, 0.02, refine=1, chunk=64)
    z = _collect(src, 256)
    assert src.step_dt == pytest.approx(0.01)
    assert np.var(z) == pytest.approx(0.01, rel=0.03)
    # consecutive halves of one coarse increment are uncorrelated
    corr = np.corrcoef(z[0::2].ravel(), z[1::2].ravel())[0, 1]
    assert abs(corr) < 0.03


def test_bad_arguments():
    with pytest.raises(ValueError):
        NoiseSource([0, 1], np.arange(3)[None], 1, 0.1)
    with pytest.raises(ValueError):
        NoiseSource([0], np.arange(3)[None], 1, 0.1, refine=-1)
