"""Particle ensembles, empirical measures and seeded initial laws."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class NormalizationError(ValueError):
    """A measure does not carry unit mass."""


@dataclass(frozen=True)
class WeightedMeasure:
    """Finite signed combination of point masses, total mass one.

    Negative weights are allowed so that finite-difference probes such as
    ``(1 + eps) m - eps delta_x`` can be represented.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights disagree in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def atoms(self):
        return self.points, self.weights


def as_atoms(measure):
    """Return ``(points (k, d), weights (k,))`` for any supported measure."""
    if isinstance(measure, tuple):
        return WeightedMeasure(*measure).atoms()
    return measure.atoms()


def mixture(measures, coefficients) -> WeightedMeasure:
    """Linear combination ``sum_k c_k m_k`` of measures as one atom list."""
    pts, wts = [], []
    for m, c in zip(measures, coefficients):
        p, w = as_atoms(m)
        pts.append(p)
        wts.append(c * w)
    return WeightedMeasure(np.concatenate(pts), np.concatenate(wts))


def dirac(x) -> WeightedMeasure:
    return WeightedMeasure(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])


@dataclass(frozen=True)
class ParticleCloud:
    """``n`` particles in ``R^d`` with equal weights ``1/n``.

    ``ids`` are the particle identities used to key random streams; they
    travel with the rows when the cloud is permuted.
    """

    positions: np.ndarray
    ids: np.ndarray = None
    master_seed: int | None = None

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"positions must be (n, d) with n, d >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("positions must be finite")
        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids)
        ids = ids.astype(np.int64).reshape(-1)
        if ids.shape[0] != x.shape[0]:
            raise ValueError("one id per particle required")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def atoms(self):
        return self.positions, np.full(self.n, 1.0 / self.n)

    def integrate(self, f) -> np.ndarray:
        """``(1/n) sum_i f(x_i)`` for a vectorised probe ``f``."""
        return np.mean(f(self.positions), axis=0)

    def permuted(self, perm) -> "ParticleCloud":
        perm = np.asarray(perm)
        return ParticleCloud(self.positions[perm], self.ids[perm], self.master_seed)

    def with_positions(self, positions) -> "ParticleCloud":
        return ParticleCloud(positions, self.ids, self.master_seed)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["particle_id"] + [f"x_{k}" for k in range(self.d)])
            for pid, row in zip(self.ids, self.positions):
                w.writerow([int(pid)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, master_seed=None) -> "ParticleCloud":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[0] != "particle_id":
            raise ValueError("expected particle_id as first column")
        ids = [int(r[0]) for r in body]
        pos = [[float(v) for v in r[1:]] for r in body]
        return cls(np.array(pos), np.array(ids), master_seed)


@dataclass(frozen=True)
class DistributionSpec:
    """Initial law: ``gaussian``, ``uniform`` or ``grid_density``.

    ``gaussian`` takes ``mean`` (scalar or length-``d``) and ``cov_scalar``
    (variance of every coordinate); ``uniform`` takes bounds ``a < b`` applied
    per coordinate; ``grid_density`` samples a one-dimensional
    :class:`~mflchaos.grid1d.GridDensity` given as ``ref``.
    """

    kind: str
    dim: int = 1
    mean: float | tuple = 0.0
    cov_scalar: float = 1.0
    a: float = 0.0
    b: float = 1.0
    ref: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind == "gaussian":
            if not self.cov_scalar > 0:
                raise ValueError("cov_scalar must be > 0")
            mean = np.broadcast_to(np.asarray(self.mean, dtype=float), (self.dim,))
            object.__setattr__(self, "mean", tuple(float(v) for v in mean))
        elif self.kind == "uniform":
            if not self.b > self.a:
                raise ValueError(f"uniform needs b > a, got a={self.a}, b={self.b}")
        elif self.kind == "grid_density":
            if self.ref is None or self.dim != 1:
                raise ValueError("grid_density needs a 1D ref density")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = self.dim
        if self.kind == "gaussian":
            return np.asarray(self.mean) + np.sqrt(self.cov_scalar) * rng.standard_normal((n, d))
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=(n, d))
        ref = self.ref
        cdf = np.concatenate([[0.0], np.cumsum(ref.values * ref.h)])
        cdf /= cdf[-1]
        u = rng.random(n)
        cell = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, ref.M - 1)
        return (ref.edges[cell] + ref.h * rng.random(n))[:, None]


def sample_cloud(spec: DistributionSpec, n: int, seed: int,
                 substream: str = "init") -> ParticleCloud:
    """Draw ``n`` i.i.d. particles from ``spec``; bit-reproducible in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = spec.draw(stream(seed, substream), n)
    return ParticleCloud(x, np.arange(n), seed)


def empirical_moment(cloud, q: int) -> float:
    """``(1/n) sum_i |x_i|^q`` for even ``q`` in {2, 4, 6}."""
    if q not in (2, 4, 6):
        raise ValueError(f"q must be 2, 4 or 6, got {q}")
    pts, w = as_atoms(cloud)
    return float(np.sum(w * np.sum(pts ** 2, axis=1) ** (q // 2)))


class LeaveOneOut:
    """Empirical measure of a cloud with particle ``i`` removed.

    Holds a reference to the parent positions instead of copying them.
    """

    def __init__(self, cloud: ParticleCloud, i: int):
        if cloud.n < 2:
            raise ValueError("leave-one-out needs n >= 2")
        if not 0 <= i < cloud.n:
            raise IndexError(f"particle index {i} out of range for n={cloud.n}")
        self.cloud = cloud
        self.i = int(i)

    @property
    def n(self) -> int:
        return self.cloud.n - 1

    def atoms(self):
        w = np.full(self.cloud.n, 1.0 / (self.cloud.n - 1))
        w[self.i] = 0.0
        return self.cloud.positions, w

    def reinsert(self) -> WeightedMeasure:
        """``((n-1)/n) m^{-i} + (1/n) delta_{x_i}``, i.e. the parent measure."""
        n = self.cloud.n
        return mixture([self, dirac(self.cloud.positions[self.i])],
                       [(n - 1) / n, 1.0 / n])


def leave_one_out(cloud: ParticleCloud, i: int) -> LeaveOneOut:
    return LeaveOneOut(cloud, i)
