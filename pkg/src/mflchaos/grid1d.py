"""One-dimensional deterministic solver for the mean-field Langevin flow.

The density lives on ``M`` uniform cells of ``[-L, L]``.  The flow

    d_t m = d_x((D_m F(m, .) + (sigma^2/2) u') m) + (sigma^2/2) d_xx m

is written in the Gibbs form ``d_t m = (sigma^2/2) d_x(m d_x log(m / Phi(m)))``
with ``Phi(m) ~ exp(-psi)``, ``psi = (2/sigma^2) dF/dm(m, .) + u``, and
discretised with the square-root-approximation flux

    J_{j+1/2} = -(sigma^2 / 2h) (m_{j+1} e^{(psi_{j+1}-psi_j)/2} - m_j e^{(psi_j-psi_{j+1})/2}).

``psi`` is frozen at the start of a step and the resulting linear operator is
applied implicitly.  The discrete Gibbs fixed point is then exactly
stationary and the discrete free energy decreases along the flow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded

from .cloud import NormalizationError

MASS_TOL = 1e-12
MASS_FLOOR = 1e-12


class CFLError(ValueError):
    """Explicit step larger than the diffusive stability bound."""


@dataclass(frozen=True)
class GridDensity:
    """Probability density on ``M`` uniform cells of ``[-L, L]``."""

    L: float
    values: np.ndarray
    clip_mass: float = field(default=0.0, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size < 2 or not self.L > 0:
            raise ValueError("need L > 0 and at least two cells")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise NormalizationError("density values must be finite and non-negative")
        mass = float(np.sum(v)) * (2 * self.L / v.size)
        if abs(mass - 1.0) > MASS_TOL:
            raise NormalizationError(f"density integrates to {mass!r}, expected 1")
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, L, values) -> "GridDensity":
        """Clip negative values to zero and renormalise; clipped mass is kept."""
        v = np.asarray(values, dtype=float).reshape(-1)
        h = 2 * L / v.size
        neg = np.minimum(v, 0.0)
        clipped = float(-np.sum(neg) * h)
        v = np.maximum(v, 0.0)
        total = np.sum(v) * h
        if not total > 0:
            raise NormalizationError("density has no positive mass")
        return cls(L, v / total, clip_mass=clipped)

    @classmethod
    def from_log(cls, L, logv) -> "GridDensity":
        logv = np.asarray(logv, dtype=float)
        return cls.normalized(L, np.exp(logv - np.max(logv)))

    @classmethod
    def gaussian(cls, mean=0.0, var=1.0, L=8.0, M=2048) -> "GridDensity":
        x = cell_centers(L, M)
        return cls.from_log(L, -0.5 * (x - mean) ** 2 / var)

    @classmethod
    def from_potential(cls, u, L=8.0, M=2048) -> "GridDensity":
        """Grid version of ``mu ~ exp(-u)``."""
        return cls.from_log(L, -u.value(cell_centers(L, M)[:, None]))

    @property
    def M(self) -> int:
        return self.values.size

    @property
    def h(self) -> float:
        return 2 * self.L / self.M

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.L, self.M)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.M + 1)

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.h)

    def atoms(self):
        return self.centers[:, None], self.values * self.h

    def expect(self, f) -> float:
        return float(np.sum(f(self.centers) * self.values) * self.h)

    def mean(self) -> float:
        return self.expect(lambda x: x)

    def moment(self, q) -> float:
        return self.expect(lambda x: np.abs(x) ** q)

    def cdf(self, x) -> np.ndarray:
        """Exact CDF of the piecewise-constant density."""
        cum = np.concatenate([[0.0], np.cumsum(self.values) * self.h])
        return np.interp(x, self.edges, cum)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_center", "density"])
            for x, v in zip(self.centers, self.values):
                w.writerow([repr(float(x)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "GridDensity":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        x, v = data[:, 0], data[:, 1]
        h = x[1] - x[0]
        L = float(x[-1] + h / 2)
        return cls.normalized(L, v)


@lru_cache(maxsize=32)
def cell_centers(L, M) -> np.ndarray:
    h = 2 * L / M
    x = -L + h * (np.arange(M) + 0.5)
    x.flags.writeable = False
    return x


@lru_cache(maxsize=32)
def _potential_on_grid(u, L, M) -> np.ndarray:
    v = u.value(cell_centers(L, M)[:, None])
    v.flags.writeable = False
    return v


def like(m: GridDensity, values) -> GridDensity:
    return GridDensity.normalized(m.L, values)


def reference_measure(u, m: GridDensity) -> GridDensity:
    return GridDensity.from_potential(u, m.L, m.M)


def _psi(functional, u, sigma, m):
    return (2.0 / sigma ** 2) * functional.linear_derivative_grid(m) + _potential_on_grid(u, m.L, m.M)


def gibbs_map(functional, u, sigma, m: GridDensity) -> GridDensity:
    """``Phi(m) ~ exp(-((2/sigma^2) dF/dm(m, .) + u))`` on the grid of ``m``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return GridDensity.from_log(m.L, -_psi(functional, u, sigma, m))


def grid_relative_entropy(m: GridDensity, ref: GridDensity) -> float:
    """``sum_j h m_j log(m_j / ref_j)`` over cells where ``m_j > 0``."""
    if m.M != ref.M or m.L != ref.L:
        raise ValueError("densities live on different grids")
    mask = m.values > 0
    if np.any(ref.values[mask] <= 0):
        raise ValueError("reference vanishes where m has mass")
    return float(np.sum(m.values[mask] * np.log(m.values[mask] / ref.values[mask])) * m.h)


def free_energy_grid(functional, u, sigma, m: GridDensity, mu: GridDensity | None = None) -> float:
    """``F(m) + (sigma^2/2) H(m | mu)`` with ``mu ~ exp(-u)`` on the same grid."""
    mu = reference_measure(u, m) if mu is None else mu
    return functional.value(m) + 0.5 * sigma ** 2 * grid_relative_entropy(m, mu)


def _retained(m, mass_floor):
    mask = m.values > mass_floor
    if not np.any(mask):
        raise ValueError("every cell is below the mass floor")
    return mask


def foc_residual(functional, u, sigma, m: GridDensity, mass_floor=MASS_FLOOR) -> float:
    """Oscillation of ``dF/dm(m, .) + (sigma^2/2) log m + (sigma^2/2) u`` over the bulk."""
    mask = _retained(m, mass_floor)
    s2 = 0.5 * sigma ** 2
    flat = functional.linear_derivative_grid(m)
    x = m.centers[mask]
    val = flat[mask] + s2 * np.log(m.values[mask]) + s2 * u.value(x[:, None])
    return float(np.max(val) - np.min(val))


def oscillation_of_v(m: GridDensity, functional, u, sigma, mass_floor=MASS_FLOOR) -> float:
    """Oscillation of ``v = -log(m / Phi(m))`` over cells with ``m > mass_floor``."""
    mask = _retained(m, mass_floor)
    logphi = -_psi(functional, u, sigma, m)
    logphi = logphi - np.max(logphi)
    logphi -= np.log(np.sum(np.exp(logphi)) * m.h)
    v = logphi[mask] - np.log(m.values[mask])
    return float(np.max(v) - np.min(v))


@dataclass
class FixedPointResult:
    density: GridDensity
    residual: float
    iterations: int
    converged: bool
    change: float


def fixed_point_solve(functional, u, sigma, damping=0.5, tol=1e-13, max_iter=20000,
                      initial: GridDensity | None = None, L=8.0, M=2048) -> FixedPointResult:
    """Damped iteration ``m <- (1 - theta) m + theta Phi(m)`` to the Gibbs fixed point.

    Starts from ``Phi(initial)`` (``initial`` defaults to ``mu ~ exp(-u)``).
    Stops when the sup-norm change drops below ``tol``; otherwise returns the
    last iterate with ``converged=False``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    m0 = GridDensity.from_potential(u, L, M) if initial is None else initial
    m = gibbs_map(functional, u, sigma, m0)
    change = np.inf
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        phi = gibbs_map(functional, u, sigma, m)
        new = (1 - damping) * m.values + damping * phi.values
        change = float(np.max(np.abs(new - m.values)))
        m = GridDensity.normalized(m.L, new)
        if change < tol:
            converged = True
            break
    return FixedPointResult(m, foc_residual(functional, u, sigma, m), it, converged, change)


def _rates(psi, sigma, h):
    """Jump rates right (j -> j+1) and left (j+1 -> j) across each interior face."""
    D = 0.5 * sigma ** 2 / h ** 2
    dpsi = np.diff(psi)
    return D * np.exp(-0.5 * dpsi), D * np.exp(0.5 * dpsi)


def fokker_planck_step(functional, u, sigma, m: GridDensity, dt, scheme="implicit") -> GridDensity:
    """Advance the density by one step of size ``dt`` with no-flux boundaries.

    ``scheme="implicit"`` (default) is unconditionally stable; ``"explicit"``
    requires ``dt <= h^2 / sigma^2``.
    """
    psi = _psi(functional, u, sigma, m)
    right, left = _rates(psi, sigma, m.h)
    out = np.zeros(m.M)
    out[:-1] += right
    out[1:] += left
    rho = m.values
    if scheme == "explicit":
        if dt > m.h ** 2 / sigma ** 2:
            raise CFLError(f"dt={dt} exceeds h^2/sigma^2={m.h ** 2 / sigma ** 2}")
        inflow = np.zeros(m.M)
        inflow[1:] += right * rho[:-1]
        inflow[:-1] += left * rho[1:]
        new = rho + dt * (inflow - out * rho)
    elif scheme == "implicit":
        ab = np.zeros((3, m.M))
        ab[0, 1:] = -dt * left
        ab[1] = 1.0 + dt * out
        ab[2, :-1] = -dt * right
        new = solve_banded((1, 1), ab, rho, check_finite=False)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return GridDensity.normalized(m.L, new)


@dataclass
class GridTrajectory:
    """Output of :func:`run_grid_flow`."""

    step_times: np.ndarray
    free_energy: np.ndarray
    save_times: np.ndarray
    densities: list
    oscillation: np.ndarray


def run_grid_flow(functional, u, sigma, m0: GridDensity, dt, t_end, save_every=None,
                  track_oscillation=False, scheme="implicit") -> GridTrajectory:
    """Integrate the grid flow, recording the free energy after every step."""
    n_steps = int(round(t_end / dt))
    stride = n_steps if save_every is None else max(1, int(round(save_every / dt)))
    mu = reference_measure(u, m0)
    m = m0
    fe = np.empty(n_steps + 1)
    fe[0] = free_energy_grid(functional, u, sigma, m, mu)
    saves, dens, osc = [0.0], [m], []
    if track_oscillation:
        osc.append(oscillation_of_v(m, functional, u, sigma))
    for k in range(1, n_steps + 1):
        m = fokker_planck_step(functional, u, sigma, m, dt, scheme)
        fe[k] = free_energy_grid(functional, u, sigma, m, mu)
        if k % stride == 0:
            saves.append(k * dt)
            dens.append(m)
            if track_oscillation:
                osc.append(oscillation_of_v(m, functional, u, sigma))
    return GridTrajectory(np.arange(n_steps + 1) * dt, fe, np.array(saves), dens, np.array(osc))
