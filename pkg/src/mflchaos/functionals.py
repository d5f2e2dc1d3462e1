"""Confining potentials and mean-field functionals with their derivatives.

A functional ``F`` on probability measures is described by

* ``value(m)``                      -- ``F(m)``
* ``linear_derivative(m, x)``       -- the flat derivative ``dF/dm(m, x)``,
  normalised so that it integrates to zero against ``m``
* ``intrinsic_derivative(m, x)``    -- ``D_m F(m, x)``, the spatial gradient
  of the flat derivative

Measures are anything exposing ``atoms() -> (points (k, d), weights (k,))``:
particle clouds, grid densities, leave-one-out views and weighted atom lists.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .cloud import NormalizationError, ParticleCloud, WeightedMeasure, as_atoms, dirac, mixture

_MASS_TOL = 1e-10


def _check_mass(weights):
    total = float(np.sum(weights))
    if abs(total - 1.0) > _MASS_TOL:
        raise NormalizationError(f"measure has total mass {total!r}, expected 1")


def _as_points(x, dim):
    """Coerce query points to shape (q, d); a 1D array is a list of scalars when d = 1
    and a single point otherwise."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None] if dim == 1 else x.reshape(1, dim)
    return x


# ---------------------------------------------------------------------------
# Confining potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticPotential:
    """``u(x) = c |x|^2 / 2``; Hessian is exactly ``c I``.

    ``c = 0`` is only accepted with ``strict=False`` (used to switch the
    confinement off in tests).
    """

    c: float = 1.0
    strict: bool = True

    def __post_init__(self):
        if self.strict and not self.c > 0:
            raise ValueError("confining potential needs c > 0")
        if self.c < 0:
            raise ValueError("c must be non-negative")

    @property
    def hessian_bounds(self):
        return (self.c, self.c)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.c * np.sum(x * x, axis=-1)

    def grad(self, x):
        return self.c * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class LogCoshPotential:
    """``u(x) = c |x|^2 / 2 + a sum_k log cosh x_k``, Hessian in ``[c, c + a]``."""

    c: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        if not self.c > 0 or self.a < 0:
            raise ValueError("need c > 0 and a >= 0")

    @property
    def hessian_bounds(self):
        return (self.c, self.c + self.a)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        logcosh = ax + np.log1p(np.exp(-2 * ax)) - np.log(2.0)
        return 0.5 * self.c * np.sum(x * x, axis=-1) + self.a * np.sum(logcosh, axis=-1)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return self.c * x + self.a * np.tanh(x)


def potential_gradient_error(u, points, step=1e-6) -> float:
    """Max relative error between ``u.grad`` and central differences of ``u.value``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    worst = 0.0
    for x in pts:
        fd = np.empty_like(x)
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = step
            fd[k] = (u.value(x + e) - u.value(x - e)) / (2 * step)
        g = u.grad(x)
        worst = max(worst, _rel_err(g, fd))
    return worst


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------


class MeanFieldFunctional(abc.ABC):
    """Base class; subclasses implement the three ``_``-prefixed kernels.

    Attributes
    ----------
    dim : int
        Dimension of the state space.
    derivative_bound : float or None
        Declared ``sup |dF/dm|`` over all measures and points.
    intrinsic_bound : float or None
        Declared ``sup |D_m F|``.
    """

    dim: int = 1
    derivative_bound: float | None = None
    intrinsic_bound: float | None = None

    @abc.abstractmethod
    def _value(self, points, weights) -> float:
        ...

    @abc.abstractmethod
    def _flat_derivative(self, points, weights, x) -> np.ndarray:
        """Flat derivative at ``x`` (q, d) up to an additive constant."""

    @abc.abstractmethod
    def _intrinsic(self, points, weights, x) -> np.ndarray:
        ...

    def value(self, measure) -> float:
        pts, w = as_atoms(measure)
        _check_mass(w)
        return float(self._value(pts, w))

    def linear_derivative(self, measure, x) -> np.ndarray:
        pts, w = as_atoms(measure)
        x = _as_points(x, self.dim)
        flat = self._flat_derivative(pts, w, x)
        return flat - np.dot(w, self._flat_derivative(pts, w, pts))

    def intrinsic_derivative(self, measure, x) -> np.ndarray:
        pts, w = as_atoms(measure)
        return self._intrinsic(pts, w, _as_points(x, self.dim))

    def empirical_drift(self, positions) -> np.ndarray:
        """``D_m F(m_X, x_i)`` for every particle; ``positions`` is (..., n, d)."""
        positions = np.asarray(positions, dtype=float)
        flat = positions.reshape((-1,) + positions.shape[-2:])
        out = np.empty_like(flat)
        for r, x in enumerate(flat):
            w = np.full(x.shape[0], 1.0 / x.shape[0])
            out[r] = self._intrinsic(x, w, x)
        return out.reshape(positions.shape)

    def empirical_value(self, positions) -> np.ndarray:
        """``F(m_X)`` for a batch of clouds (..., n, d)."""
        positions = np.asarray(positions, dtype=float)
        flat = positions.reshape((-1,) + positions.shape[-2:])
        vals = [self._value(x, np.full(x.shape[0], 1.0 / x.shape[0])) for x in flat]
        return np.asarray(vals).reshape(positions.shape[:-2])

    def linear_derivative_grid(self, grid) -> np.ndarray:
        """Zero-mean flat derivative at the cell centres of ``grid``."""
        return self.linear_derivative(grid, grid.centers)

    def intrinsic_derivative_grid(self, grid) -> np.ndarray:
        return self.intrinsic_derivative(grid, grid.centers)[:, 0]

    def finite_particle_gradient(self, cloud: ParticleCloud, i: int) -> np.ndarray:
        """Gradient of ``f^n = n F(m_X)`` in particle ``i``, i.e. ``D_m F(m_X, x_i)``."""
        if not 0 <= i < cloud.n:
            raise IndexError(f"particle index {i} out of range for n={cloud.n}")
        return self.intrinsic_derivative(cloud, cloud.positions[i])[0]


class ZeroFunctional(MeanFieldFunctional):
    """``F = 0``."""

    def __init__(self, dim: int = 1):
        self.dim = dim
        self.derivative_bound = 0.0
        self.intrinsic_bound = 0.0

    def _value(self, points, weights):
        return 0.0

    def _flat_derivative(self, points, weights, x):
        return np.zeros(x.shape[0])

    def _intrinsic(self, points, weights, x):
        return np.zeros_like(x)

    def empirical_drift(self, positions):
        return np.zeros_like(np.asarray(positions, dtype=float))

    def empirical_value(self, positions):
        return np.zeros(np.shape(positions)[:-2])

    def linear_derivative_grid(self, grid):
        return np.zeros(grid.M)

    def intrinsic_derivative_grid(self, grid):
        return np.zeros(grid.M)


class CompositeExpectation(MeanFieldFunctional):
    """``F(m) = g(int phi dm)`` with ``g: R^k -> R`` convex, ``phi: R^d -> R^k``.

    Parameters
    ----------
    g, grad_g : callables on (..., k) arrays
    phi : callable (q, d) -> (q, k)
    jac_phi : callable (q, d) -> (q, k, d)
    hess_g : callable (k,) -> (k, k), optional
        Enables :meth:`second_derivative`.
    """

    def __init__(self, g, grad_g, phi, jac_phi, dim=1, hess_g=None,
                 derivative_bound=None, intrinsic_bound=None, name="composite"):
        self.g, self.grad_g, self.phi, self.jac_phi = g, grad_g, phi, jac_phi
        self.hess_g = hess_g
        self.dim = dim
        self.derivative_bound = derivative_bound
        self.intrinsic_bound = intrinsic_bound
        self.name = name

    @classmethod
    def quadratic_tanh(cls, kappa=2.0, target=0.5, dim=1):
        """``g(y) = kappa |y - target|^2 / 2`` and ``phi = tanh`` coordinatewise."""
        t = np.broadcast_to(np.asarray(target, dtype=float), (dim,)).copy()
        root = np.sqrt(dim)
        tnorm = float(np.linalg.norm(t))
        return cls(
            g=lambda y: 0.5 * kappa * np.sum((y - t) ** 2, axis=-1),
            grad_g=lambda y: kappa * (y - t),
            phi=np.tanh,
            jac_phi=lambda x: _diag_jac(1.0 - np.tanh(x) ** 2),
            dim=dim,
            hess_g=lambda y: kappa * np.eye(dim),
            derivative_bound=2.0 * kappa * (root + tnorm) * root,
            intrinsic_bound=kappa * (root + tnorm),
            name="composite_tanh",
        )

    def mean_feature(self, measure) -> np.ndarray:
        pts, w = as_atoms(measure)
        return w @ self.phi(pts)

    def _value(self, points, weights):
        return float(self.g(weights @ self.phi(points)))

    def _flat_derivative(self, points, weights, x):
        return self.phi(x) @ self.grad_g(weights @ self.phi(points))

    def linear_derivative(self, measure, x):
        pts, w = as_atoms(measure)
        ybar = w @ self.phi(pts)
        x = _as_points(x, self.dim)
        return (self.phi(x) - ybar) @ self.grad_g(ybar)

    def _intrinsic(self, points, weights, x):
        grad = self.grad_g(weights @ self.phi(points))
        return np.einsum("k,qkd->qd", grad, self.jac_phi(x))

    def intrinsic_against(self, ybar, x):
        """``D_m F`` at points ``x`` (..., d) for measures with mean feature ``ybar`` (..., k)."""
        grad = self.grad_g(ybar)
        return np.einsum("...k,...nkd->...nd", grad, self.jac_phi(x))

    def empirical_drift(self, positions):
        x = np.asarray(positions, dtype=float)
        ybar = np.mean(self.phi(x), axis=-2)
        return self.intrinsic_against(ybar, x)

    def empirical_value(self, positions):
        x = np.asarray(positions, dtype=float)
        return self.g(np.mean(self.phi(x), axis=-2))

    def second_derivative(self, measure, x, x2):
        """Un-normalised ``d^2F/dm^2(m, x, x2) = phi(x)^T Hess g(ybar) phi(x2)``."""
        if self.hess_g is None:
            raise NotImplementedError("no Hessian of g supplied")
        ybar = self.mean_feature(measure)
        return self.phi(_as_points(x, self.dim)) @ self.hess_g(ybar) @ self.phi(_as_points(x2, self.dim)).T


def _diag_jac(diag):
    """Turn a (q, d) array of partials into a (q, d, d) diagonal Jacobian."""
    q, d = diag.shape[-2:]
    out = np.zeros(diag.shape[:-1] + (d, d))
    idx = np.arange(d)
    out[..., idx, idx] = diag
    return out


class PairwiseInteraction(MeanFieldFunctional):
    """``F(m) = 1/2 iint w(x - y) m(dx) m(dy)`` with a Gaussian kernel.

    ``w(x) = amplitude * exp(-|x|^2 / (2 length_scale^2))`` is the Fourier
    transform of a non-negative measure, hence positive definite and ``F`` is
    convex.
    """

    def __init__(self, amplitude=1.0, length_scale=1.0, dim=1):
        if amplitude < 0 or length_scale <= 0:
            raise ValueError("need amplitude >= 0 and length_scale > 0")
        self.amplitude = float(amplitude)
        self.length_scale = float(length_scale)
        self.dim = dim
        self.derivative_bound = self.amplitude
        # max of |grad w| is A / (l sqrt(e))
        self.intrinsic_bound = self.amplitude / (self.length_scale * np.sqrt(np.e))
        self.name = "pairwise_gaussian"

    def w(self, z):
        z = np.asarray(z, dtype=float)
        return self.amplitude * np.exp(-0.5 * np.sum(z * z, axis=-1) / self.length_scale ** 2)

    def grad_w(self, z):
        z = np.asarray(z, dtype=float)
        return -z / self.length_scale ** 2 * self.w(z)[..., None]

    def _value(self, points, weights):
        diff = points[:, None, :] - points[None, :, :]
        return 0.5 * float(weights @ self.w(diff) @ weights)

    def _flat_derivative(self, points, weights, x):
        return self.w(x[:, None, :] - points[None, :, :]) @ weights

    def _intrinsic(self, points, weights, x):
        return np.einsum("qkd,k->qd", self.grad_w(x[:, None, :] - points[None, :, :]), weights)

    def empirical_drift(self, positions):
        x = np.asarray(positions, dtype=float)
        diff = x[..., :, None, :] - x[..., None, :, :]
        return np.mean(self.grad_w(diff), axis=-2)

    def empirical_value(self, positions):
        x = np.asarray(positions, dtype=float)
        diff = x[..., :, None, :] - x[..., None, :, :]
        return 0.5 * np.mean(self.w(diff), axis=(-1, -2))

    def value(self, measure) -> float:
        if hasattr(measure, "centers") and hasattr(measure, "h"):
            # grid density: the double sum is a convolution
            w = measure.values * measure.h
            _check_mass(w)
            return 0.5 * float(np.sum(self._grid_conv(measure, self.w) * w))
        return super().value(measure)

    def _grid_conv(self, grid, kernel):
        offsets = (np.arange(-(grid.M - 1), grid.M) * grid.h)[:, None]
        full = fftconvolve(grid.values * grid.h, kernel(offsets), mode="full")
        return full[grid.M - 1: 2 * grid.M - 1]

    def linear_derivative_grid(self, grid):
        flat = self._grid_conv(grid, self.w)
        return flat - np.sum(flat * grid.values * grid.h)

    def intrinsic_derivative_grid(self, grid):
        return self._grid_conv(grid, lambda z: self.grad_w(z)[:, 0])

    def second_derivative(self, measure, x, x2):
        x = _as_points(x, self.dim)
        x2 = _as_points(x2, self.dim)
        return self.w(x[:, None, :] - x2[None, :, :])


class TwoLayerNetLoss(CompositeExpectation):
    """Mean-field squared loss of a two-layer network with truncated output weights.

    A parameter ``x = (c, a_1..a_p, b)`` represents one neuron
    ``z -> ell(c) tanh(a . z + b)`` with ``ell(c) = L tanh(c / L)``.  For data
    ``(z_k, f_k)``, ``F(m) = sum_k |f_k - E^m[ell(C) tanh(A . z_k + B)]|^2``.
    """

    def __init__(self, inputs, targets, truncation=5.0):
        z = np.atleast_2d(np.asarray(inputs, dtype=float))
        f = np.asarray(targets, dtype=float).reshape(-1)
        if z.shape[0] != f.shape[0]:
            raise ValueError("one target per input row")
        self.inputs, self.targets, self.truncation = z, f, float(truncation)
        L = self.truncation
        p = z.shape[1]

        def features(x):
            c, a, b = x[..., 0], x[..., 1:1 + p], x[..., 1 + p]
            pre = a @ z.T + b[..., None]
            return (L * np.tanh(c / L))[..., None] * np.tanh(pre)

        def jac(x):
            c, a, b = x[..., 0], x[..., 1:1 + p], x[..., 1 + p]
            pre = a @ z.T + b[..., None]
            th = np.tanh(pre)
            ell = (L * np.tanh(c / L))[..., None]
            dell = (1.0 - np.tanh(c / L) ** 2)[..., None]
            sech2 = 1.0 - th ** 2
            out = np.empty(x.shape[:-1] + (z.shape[0], p + 2))
            out[..., 0] = dell * th
            out[..., 1:1 + p] = (ell * sech2)[..., None] * z
            out[..., 1 + p] = ell * sech2
            return out

        bound_grad = 2.0 * (np.abs(f) + L)
        zn = np.sqrt(np.sum(z * z, axis=1) + 1.0)
        super().__init__(
            g=lambda y: np.sum((f - y) ** 2, axis=-1),
            grad_g=lambda y: -2.0 * (f - y),
            phi=features,
            jac_phi=jac,
            dim=p + 2,
            hess_g=lambda y: 2.0 * np.eye(f.shape[0]),
            derivative_bound=float(np.sum(bound_grad * 2 * L)),
            intrinsic_bound=float(np.sum(bound_grad * (1.0 + L * zn))),
            name="two_layer_net",
        )

    def predict(self, measure, z):
        """Network output ``E^m[ell(C) tanh(A . z + B)]`` at inputs ``z``."""
        pts, w = as_atoms(measure)
        p = self.inputs.shape[1]
        L = self.truncation
        pre = pts[:, 1:1 + p] @ np.atleast_2d(z).T + pts[:, 1 + p][:, None]
        return w @ ((L * np.tanh(pts[:, 0] / L))[:, None] * np.tanh(pre))


# ---------------------------------------------------------------------------
# Operation-level entry points
# ---------------------------------------------------------------------------


def eval_F(functional: MeanFieldFunctional, measure) -> float:
    return functional.value(measure)


def linear_derivative(functional, measure, x):
    return functional.linear_derivative(measure, x)


def intrinsic_derivative(functional, measure, x):
    return functional.intrinsic_derivative(measure, x)


def finite_particle_gradient(functional, cloud, i):
    return functional.finite_particle_gradient(cloud, i)


# ---------------------------------------------------------------------------
# Derivative self-validation
# ---------------------------------------------------------------------------

CHECKS = ("flat_vs_perturbation", "intrinsic_vs_gradient", "particle_gradient_vs_intrinsic")
FAIL_THRESHOLD = 1e-4


def _rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


@dataclass
class ProbeSpec:
    """Measures and evaluation points used by :func:`validate_derivatives`."""

    measures: list
    points: np.ndarray
    clouds: list = field(default_factory=list)


def default_probes(dim: int = 1, seed: int = 0) -> ProbeSpec:
    """Clouds of sizes 2, 3, 5 and 16, plus a coarse grid density in 1D."""
    from .grid1d import GridDensity
    from .rng import stream

    rng = stream(seed, "probe")
    clouds = [ParticleCloud(1.5 * rng.standard_normal((n, dim))) for n in (2, 3, 5, 16)]
    measures = list(clouds)
    if dim == 1:
        measures.append(GridDensity.gaussian(0.3, 1.2, L=6.0, M=64))
    points = 1.5 * rng.standard_normal((5, dim))
    return ProbeSpec(measures=measures, points=points, clouds=clouds)


@dataclass
class DerivativeReport:
    """Per-probe relative errors of the three derivative identities."""

    name: str
    rows: list = field(default_factory=list)
    max_abs_flat: float = 0.0
    declared_bound: float | None = None

    def add(self, check, probe, err):
        self.rows.append({"functional": self.name, "check": check, "probe": probe,
                          "rel_error": err, "passed": err <= FAIL_THRESHOLD})

    def max_error(self, check=None) -> float:
        errs = [r["rel_error"] for r in self.rows if check is None or r["check"] == check]
        return max(errs, default=0.0)

    @property
    def failures(self) -> list:
        out = [r for r in self.rows if not r["passed"]]
        if self.declared_bound is not None and self.max_abs_flat > self.declared_bound * (1 + 1e-12):
            out.append({"functional": self.name, "check": "derivative_bound", "probe": "all",
                        "rel_error": self.max_abs_flat / self.declared_bound - 1, "passed": False})
        return out

    @property
    def passed(self) -> bool:
        return not self.failures


def validate_derivatives(functional: MeanFieldFunctional, probes: ProbeSpec | None = None,
                         eps_measure=1e-4, eps_space=1e-5) -> DerivativeReport:
    """Check ``dF/dm``, ``D_m F`` and ``grad_i f^n`` against finite differences.

    Three identities are checked at every probe:

    ``flat_vs_perturbation``
        ``dF/dm(m, x)`` against the central difference of
        ``eps -> F((1 - eps) m + eps delta_x)`` at ``eps = 0``.
    ``intrinsic_vs_gradient``
        ``D_m F(m, x)`` against central differences of ``x -> dF/dm(m, x)``.
    ``particle_gradient_vs_intrinsic``
        ``D_m F(m_X, x_i)`` against central differences of
        ``f^n(x) = n F(m_x)`` in the coordinates of particle ``i``.
    """
    if probes is None:
        probes = default_probes(functional.dim)
    name = getattr(functional, "name", type(functional).__name__)
    report = DerivativeReport(name=name, declared_bound=functional.derivative_bound)
    d = functional.dim
    for k, m in enumerate(probes.measures):
        label = f"{type(m).__name__}[{k}]"
        flat = functional.linear_derivative(m, probes.points)
        report.max_abs_flat = max(report.max_abs_flat, float(np.max(np.abs(flat))))
        fd = np.empty(len(probes.points))
        for j, x in enumerate(probes.points):
            plus = mixture([m, dirac(x)], [1 - eps_measure, eps_measure])
            minus = mixture([m, dirac(x)], [1 + eps_measure, -eps_measure])
            fd[j] = (functional.value(plus) - functional.value(minus)) / (2 * eps_measure)
        report.add(CHECKS[0], label, _rel_err(flat, fd))

        intr = functional.intrinsic_derivative(m, probes.points)
        grad_fd = np.empty_like(intr)
        for c in range(d):
            e = np.zeros(d)
            e[c] = eps_space
            grad_fd[:, c] = (functional.linear_derivative(m, probes.points + e)
                             - functional.linear_derivative(m, probes.points - e)) / (2 * eps_space)
        report.add(CHECKS[1], label, _rel_err(intr, grad_fd))

    for k, cloud in enumerate(probes.clouds):
        label = f"cloud[n={cloud.n}]"
        n = cloud.n
        worst = 0.0
        for i in range(n):
            exact = functional.finite_particle_gradient(cloud, i)
            fd = np.empty(d)
            for c in range(d):
                xp = cloud.positions.copy()
                xm = cloud.positions.copy()
                xp[i, c] += eps_space
                xm[i, c] -= eps_space
                fp = n * functional.value(ParticleCloud(xp))
                fm = n * functional.value(ParticleCloud(xm))
                fd[c] = (fp - fm) / (2 * eps_space)
            worst = max(worst, _rel_err(exact, fd))
        report.add(CHECKS[2], label, worst)
    return report


def convexity_gap(functional, m1, m2, lam) -> float:
    """``F((1-lam) m1 + lam m2) - (1-lam) F(m1) - lam F(m2)``; non-positive if convex."""
    mix = mixture([m1, m2], [1 - lam, lam])
    return functional.value(mix) - (1 - lam) * functional.value(m1) - lam * functional.value(m2)


__all__ = [
    "QuadraticPotential", "LogCoshPotential", "MeanFieldFunctional", "ZeroFunctional",
    "CompositeExpectation", "PairwiseInteraction", "TwoLayerNetLoss", "eval_F",
    "linear_derivative", "intrinsic_derivative", "finite_particle_gradient",
    "validate_derivatives", "default_probes", "ProbeSpec", "DerivativeReport",
    "convexity_gap", "potential_gradient_error", "WeightedMeasure",
]
