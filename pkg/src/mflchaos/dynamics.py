"""Euler-Maruyama integrators for the particle system and its mean-field coupling.

The state equation is

    dX = -(D_m F(m, X) + (sigma^2/2) grad u(X)) dt + sigma dW,

with ``m`` the empirical measure of the ``n`` particles (interacting system)
or the law of the mean-field flow supplied by an oracle (reference system).
Both systems are driven by the same Brownian increments, particle by
particle, so their squared distance bounds the Wasserstein distance between
the two particle laws.

Positions are stored as arrays of shape ``(R, n, d)``: ``R`` independent
replicas of an ``n``-particle system are advanced together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import DistributionSpec, ParticleCloud, sample_cloud
from .grid1d import GridDensity, fokker_planck_step, free_energy_grid, reference_measure
from .metrics import bregman_gap, relative_entropy_1d
from .rng import NoiseSource, stream


class DivergenceError(FloatingPointError):
    """Non-finite positions or drift."""


class OracleTimeError(ValueError):
    """The mean-field oracle was queried at a time it does not hold."""


@dataclass(frozen=True)
class SimParams:
    """Integrator settings.

    ``dt`` is the coarse step; with ``refine = r`` the run uses ``dt / 2**r``
    driven by the same Brownian path as the coarse run.
    """

    sigma: float
    dt: float
    t_end: float
    save_times: tuple = ()
    seed: int = 0
    dt_max: float = 1e-2
    refine: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 < self.dt <= self.dt_max:
            raise ValueError(f"need 0 < dt <= dt_max={self.dt_max}, got dt={self.dt}")
        if not self.t_end >= 0:
            raise ValueError("t_end must be >= 0")
        st = tuple(float(s) for s in self.save_times)
        if any(b < a for a, b in zip(st, st[1:])):
            raise ValueError("save_times must be sorted")
        if st and (st[0] < 0 or st[-1] > self.t_end + 1e-12):
            raise ValueError("save_times must lie in [0, t_end]")
        object.__setattr__(self, "save_times", st)

    @property
    def step_dt(self) -> float:
        return self.dt / 2 ** self.refine

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.step_dt))

    def save_steps(self) -> dict:
        """Map step index -> save time; each save time snaps to the nearest coarse step."""
        fine = 2 ** self.refine
        return {int(round(s / self.dt)) * fine: s for s in self.save_times}


def _check_finite(*arrays, what="drift"):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            bad = np.argwhere(~np.isfinite(a))
            raise DivergenceError(f"non-finite {what} at index {tuple(bad[0])}")


def _positions(x):
    return x.positions if isinstance(x, ParticleCloud) else np.asarray(x, dtype=float)


def _wrap(like, x):
    return like.with_positions(x) if isinstance(like, ParticleCloud) else x


def em_step_interacting(cloud, functional, u, sigma, dt, noise):
    """One Euler-Maruyama step of the interacting system.

    Every particle sees the empirical measure of the pre-step configuration.
    ``noise`` holds ``sqrt(dt)``-scaled Gaussian increments of the same shape
    as the positions.
    """
    x = _positions(cloud)
    with np.errstate(over="ignore", invalid="ignore"):
        drift = functional.empirical_drift(x) + 0.5 * sigma ** 2 * u.grad(x)
    _check_finite(drift)
    new = x - drift * dt + sigma * noise
    _check_finite(new, what="position")
    return _wrap(cloud, new)


def em_step_reference(cloud, oracle, u, sigma, dt, noise, t):
    """One step of the reference system with the drift taken from the oracle at time ``t``."""
    x = _positions(cloud)
    with np.errstate(over="ignore", invalid="ignore"):
        drift = oracle.drift(x, t) + 0.5 * sigma ** 2 * u.grad(x)
    _check_finite(drift)
    new = x - drift * dt + sigma * noise
    _check_finite(new, what="position")
    return _wrap(cloud, new)


# ---------------------------------------------------------------------------
# Mean-field oracles
# ---------------------------------------------------------------------------


class _Oracle:
    """Supplies ``D_m F(mbar_t, x)`` in lockstep with the particle integrator."""

    t = 0.0
    step = None

    def _check_time(self, t):
        tol = 1e-9 * max(1.0, abs(t))
        if abs(t - self.t) > tol:
            raise OracleTimeError(f"oracle holds t={self.t}, queried at t={t}")

    def density(self) -> GridDensity | None:
        return None


class StationaryOracle(_Oracle):
    """Time-independent oracle at a fixed measure (typically the minimiser)."""

    def __init__(self, functional, measure):
        self.functional = functional
        self.measure = measure

    def start(self, dt):
        self.t, self.step = 0.0, dt

    def drift(self, x, t=None):
        return _intrinsic_at(self.functional, self.measure, x)

    def advance(self):
        self.t += self.step

    def density(self):
        return self.measure if isinstance(self.measure, GridDensity) else None


def _intrinsic_at(functional, measure, x):
    """``D_m F(measure, x)`` for an array of points (..., d)."""
    x = np.asarray(x, dtype=float)
    if hasattr(functional, "intrinsic_against") and hasattr(functional, "mean_feature"):
        ybar = functional.mean_feature(measure)
        flat = x.reshape(1, -1, x.shape[-1])
        return functional.intrinsic_against(ybar[None, :], flat).reshape(x.shape)
    if isinstance(measure, GridDensity):
        # interpolate the grid field; exact convolution at every particle is too costly
        field_ = functional.intrinsic_derivative_grid(measure)
        return np.interp(x[..., 0], measure.centers, field_)[..., None]
    return functional.intrinsic_derivative(measure, x.reshape(-1, x.shape[-1])).reshape(x.shape)


class GridFlowOracle(_Oracle):
    """Mean-field law from the deterministic grid flow (``d = 1``)."""

    def __init__(self, functional, u, sigma, m0: GridDensity):
        if functional.dim != 1:
            raise ValueError("grid oracle is one-dimensional")
        self.functional, self.u, self.sigma, self.m0 = functional, u, sigma, m0
        self.m = m0

    @classmethod
    def from_spec(cls, functional, u, sigma, spec: DistributionSpec, L=8.0, M=2048):
        if spec.kind == "gaussian":
            m0 = GridDensity.gaussian(spec.mean[0], spec.cov_scalar, L=L, M=M)
        elif spec.kind == "uniform":
            x = np.linspace(-L, L, M + 1)
            m0 = GridDensity.normalized(L, np.clip(x[1:], spec.a, spec.b) - np.clip(x[:-1], spec.a, spec.b))
        else:
            m0 = spec.ref
        return cls(functional, u, sigma, m0)

    def start(self, dt):
        self.t, self.step, self.m = 0.0, dt, self.m0

    def drift(self, x, t):
        self._check_time(t)
        return _intrinsic_at(self.functional, self.m, x)

    def advance(self):
        self.m = fokker_planck_step(self.functional, self.u, self.sigma, self.m, self.step)
        self.t += self.step

    def density(self):
        return self.m


class CloudFlowOracle(_Oracle):
    """Mean-field law approximated by a large interacting cloud of ``n_ref`` particles.

    The cloud has its own initial draw and noise substreams, so it is
    independent of the systems it serves.
    """

    def __init__(self, functional, u, sigma, spec: DistributionSpec, n_ref, seed=0):
        self.functional, self.u, self.sigma, self.spec = functional, u, sigma, spec
        self.n_ref, self.seed = int(n_ref), int(seed)

    def start(self, dt):
        self.t, self.step = 0.0, dt
        self.x = sample_cloud(self.spec, self.n_ref, self.seed, "oracle-init").positions
        self._rng = stream(self.seed, "oracle-noise")

    @property
    def cloud(self) -> ParticleCloud:
        return ParticleCloud(self.x)

    def drift(self, x, t):
        self._check_time(t)
        return _intrinsic_at(self.functional, self.cloud, x)

    def advance(self):
        noise = np.sqrt(self.step) * self._rng.standard_normal(self.x.shape)
        self.x = em_step_interacting(self.x, self.functional, self.u, self.sigma, self.step, noise)
        self.t += self.step


def drift_mismatch(cloud, oracle, functional, sigma, t=None) -> np.ndarray:
    """``(1/(4 sigma^2)) (1/n) sum_i |D_m F(m_X, x_i) - D_m F(mbar_t, x_i)|^2`` per replica."""
    x = _positions(cloud)
    t = oracle.t if t is None else t
    diff = functional.empirical_drift(x) - oracle.drift(x, t)
    return np.mean(np.sum(diff ** 2, axis=-1), axis=-1) / (4 * sigma ** 2)


def moment_bound(functional, u, sigma, second_moment_0, dim=1) -> float:
    """Uniform bound on ``E|X_t|^2`` from a Gronwall argument.

    With ``|D_m F| <= B`` and ``x . grad u(x) >= c |x|^2``,
    ``d/dt E|X|^2 <= -C'' E|X|^2 + C + d sigma^2`` where
    ``C = 2 B^2 / (sigma^2 c)`` and ``C'' = sigma^2 c / 2``.
    """
    c = u.hessian_bounds[0]
    B = functional.intrinsic_bound
    if B is None or not c > 0:
        raise ValueError("need a declared intrinsic bound and c > 0")
    C = 2 * B ** 2 / (sigma ** 2 * c)
    return float(second_moment_0 + (C + dim * sigma ** 2) / (0.5 * sigma ** 2 * c))


# ---------------------------------------------------------------------------
# Coupled system
# ---------------------------------------------------------------------------


@dataclass
class CoupledSystem:
    """Interacting and reference ensembles for ``R`` replicas.

    ``interacting`` and ``reference`` are ``(R, n, d)``.  Particle ``ids[r, i]``
    of replica ``r`` draws its noise from the stream keyed by
    ``(seeds[r], ids[r, i])`` in both systems.
    """

    interacting: np.ndarray
    reference: np.ndarray
    seeds: tuple
    ids: np.ndarray
    oracle: object

    def __post_init__(self):
        self.interacting = np.asarray(self.interacting, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        if self.interacting.shape != self.reference.shape or self.interacting.ndim != 3:
            raise ValueError("both ensembles must share one (R, n, d) shape")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(self.interacting.shape[:2])
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != self.interacting.shape[0]:
            raise ValueError("one seed per replica")

    @property
    def shape(self):
        return self.interacting.shape

    @classmethod
    def build(cls, spec: DistributionSpec, n, seeds, oracle, init_coupling="identical"):
        """Draw the initial ensembles.

        ``init_coupling="identical"`` starts both systems at the same points;
        ``"independent"`` draws the reference from its own substream.
        """
        inter = np.stack([sample_cloud(spec, n, s).positions for s in seeds])
        if init_coupling == "identical":
            ref = inter.copy()
        elif init_coupling == "independent":
            ref = np.stack([sample_cloud(spec, n, s, "reference-init").positions for s in seeds])
        else:
            raise ValueError(f"unknown init_coupling {init_coupling!r}")
        ids = np.tile(np.arange(n), (len(seeds), 1))
        return cls(inter, ref, tuple(seeds), ids, oracle)

    def clouds(self):
        return [ParticleCloud(x, i) for x, i in zip(self.interacting, self.ids)]


ROW_FIELDS = ("t", "n", "seed", "gap_sq_per_particle", "free_energy_per_particle",
              "moment2", "drift_mismatch")


@dataclass
class CoupledRun:
    """Tables produced by :func:`run_coupled`.

    ``rows`` has one entry per (save time, replica) with the columns of
    :data:`ROW_FIELDS`.  ``diagnostics`` has one entry per save time with
    pooled quantities.  ``snapshots`` maps save time to
    ``(interacting, reference, oracle density or None)`` when requested.
    """

    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    complete: bool = True
    error: str | None = None
    diverged: dict = field(default_factory=dict)

    def column(self, name, seed=None) -> np.ndarray:
        return np.array([r[name] for r in self.rows if seed is None or r["seed"] == seed])

    def table(self, name):
        """``(times, values (T, R))`` for a per-replica column."""
        times = sorted({r["t"] for r in self.rows})
        seeds = sorted({r["seed"] for r in self.rows})
        idx = {(r["t"], r["seed"]): r[name] for r in self.rows}
        vals = np.array([[idx.get((t, s), np.nan) for s in seeds] for t in times])
        return np.array(times), vals


def run_coupled(system: CoupledSystem, functional, u, params: SimParams, observers=(),
                star: GridDensity | None = None, keep_snapshots=False, mu: GridDensity | None = None,
                chunk=512) -> CoupledRun:
    """Advance both ensembles with shared noise and record the coupling statistics.

    At every save time and for every replica the row holds the per-particle
    squared gap ``(1/n) sum_i |X^i - Xbar^i|^2``, the per-particle free energy
    ``F(m_X) + (sigma^2/2) H(p_t | mu)`` (``p_t`` pooled over replicas, d = 1
    only), the empirical second moment and :func:`drift_mismatch`.

    The diagnostics table adds, per save time: the relative entropy of the
    pooled one-particle marginal against the oracle density, and when
    ``star`` is given the value gap split into its Bregman and entropy parts.

    A replica whose trajectory leaves the finite range is frozen and dropped
    from later rows; ``diverged`` records when.  ``observers`` are called as
    ``obs(t, interacting, reference)``; an exception stops the run and
    returns what was recorded so far with ``complete=False``.
    """
    R, n, d = system.shape
    sigma = params.sigma
    h = params.step_dt
    oracle = system.oracle
    oracle.start(h)
    noise = NoiseSource(system.seeds, system.ids, d, params.dt, params.refine, chunk=chunk)
    if d == 1 and mu is None:
        mu = reference_measure(u, oracle.density() if oracle.density() is not None
                               else GridDensity.gaussian())
    saves = params.save_steps()
    xi, xr = system.interacting.copy(), system.reference.copy()
    alive = np.ones(R, dtype=bool)
    out = CoupledRun()

    def record(k):
        t = saves[k]
        live = np.flatnonzero(alive)
        xa, xb = xi[live], xr[live]
        gap = np.mean(np.sum((xa - xb) ** 2, axis=-1), axis=-1)
        energy = np.asarray(functional.empirical_value(xa))
        mism = drift_mismatch(xa, oracle, functional, sigma, oracle.t)
        m2 = np.mean(np.sum(xa ** 2, axis=-1), axis=-1)
        diag = {"t": t, "n": n, "replicas": int(live.size)}
        ent_mu = np.nan
        if d == 1 and live.size >= 2:
            pooled = xa.reshape(-1)
            ent_mu = relative_entropy_1d(pooled, mu)
            dens = oracle.density()
            diag["marginal_entropy"] = relative_entropy_1d(pooled, dens) if dens is not None else np.nan
            if star is not None:
                breg = bregman_gap(xa, functional, star)
                ent_star = relative_entropy_1d(pooled, star)
                diag["bregman"] = float(np.mean(breg))
                diag["entropy_vs_star"] = ent_star
                diag["value_gap"] = float(np.mean(breg)) + 0.5 * sigma ** 2 * ent_star
            if dens is not None:
                diag["oracle_free_energy"] = free_energy_grid(functional, u, sigma, dens, mu)
        diag["free_energy_entropy"] = ent_mu
        for j, r in enumerate(live):
            out.rows.append({
                "t": t, "n": n, "seed": system.seeds[r],
                "gap_sq_per_particle": float(gap[j]),
                "free_energy_per_particle": float(energy[j] + 0.5 * sigma ** 2 * ent_mu),
                "moment2": float(m2[j]),
                "drift_mismatch": float(mism[j]),
            })
        out.diagnostics.append(diag)
        if keep_snapshots:
            out.snapshots[t] = (xa.copy(), xb.copy(), oracle.density())
        for obs in observers:
            obs(t, xa, xb)

    try:
        if 0 in saves:
            record(0)
        for k in range(1, params.n_steps + 1):
            dw = noise.next()
            t = (k - 1) * h
            with np.errstate(over="ignore", invalid="ignore"):
                ni = xi - (functional.empirical_drift(xi) + 0.5 * sigma ** 2 * u.grad(xi)) * h + sigma * dw
                nr = xr - (oracle.drift(xr, t) + 0.5 * sigma ** 2 * u.grad(xr)) * h + sigma * dw
            ok = np.all(np.isfinite(ni), axis=(1, 2)) & np.all(np.isfinite(nr), axis=(1, 2))
            for r in np.flatnonzero(alive & ~ok):
                out.diverged[system.seeds[r]] = k * h
            alive &= ok
            if not alive.any():
                raise DivergenceError(f"every replica diverged by t={k * h}")
            keep = alive[:, None, None]
            xi = np.where(keep, ni, xi)
            xr = np.where(keep, nr, xr)
            oracle.advance()
            if k in saves:
                record(k)
    except DivergenceError as exc:
        out.complete, out.error = False, str(exc)
    except Exception as exc:  # observer or metric failure: keep the partial report
        out.complete, out.error = False, f"{type(exc).__name__}: {exc}"
    return out
