"""Counter-based random streams keyed by (master seed, substream, particle id).

Every particle owns its own Philox stream, so the numbers a particle sees do
not depend on how many other particles exist, on their order in memory, or on
how the work is split between processes.
"""

from __future__ import annotations

import numpy as np

SUBSTREAMS = {
    "init": 0,
    "noise": 1,
    "reference-init": 2,
    "noise-refine": 3,
    "oracle-init": 4,
    "oracle-noise": 5,
    "probe": 6,
}


def stream(seed: int, substream: str, *key: int) -> np.random.Generator:
    """Return the Philox generator for ``(seed, substream, *key)``."""
    try:
        code = SUBSTREAMS[substream]
    except KeyError:
        raise ValueError(f"unknown substream {substream!r}") from None
    seq = np.random.SeedSequence(int(seed), spawn_key=(code, *map(int, key)))
    return np.random.Generator(np.random.Philox(seq))


class NoiseSource:
    """Brownian increments for a batch of particles, one stream per particle.

    Increments are produced for the coarse step ``dt``.  With ``refine = r``
    each coarse increment is split into ``2**r`` increments by Brownian-bridge
    refinement, so runs at ``dt`` and ``dt / 2**r`` are driven by the same
    Brownian path.

    Parameters
    ----------
    seeds : sequence of int, shape (R,)
        Master seed of each replica.
    ids : array of int, shape (R, n)
        Particle identities; the stream of particle ``ids[r, i]`` of replica
        ``r`` is keyed by ``(seeds[r], ids[r, i])``.
    dim : int
    dt : float
        Coarse step.
    refine : int
    chunk : int
        Number of coarse steps drawn per stream call.  Has no effect on the
        values produced.
    """

    def __init__(self, seeds, ids, dim, dt, refine=0, chunk=512,
                 substream="noise"):
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        seeds = [int(s) for s in np.atleast_1d(seeds)]
        if ids.shape[0] != len(seeds):
            raise ValueError("ids must have one row per seed")
        if refine < 0:
            raise ValueError("refine must be >= 0")
        self.shape = (len(seeds), ids.shape[1], int(dim))
        self.dt = float(dt)
        self.refine = int(refine)
        self.chunk = int(chunk)
        self._coarse = [[stream(s, substream, pid) for pid in row]
                        for s, row in zip(seeds, ids)]
        self._bridge = [
            [[stream(s, "noise-refine", level, pid) for pid in row]
             for s, row in zip(seeds, ids)]
            for level in range(1, self.refine + 1)
        ]
        self._buf = None
        self._pos = 0

    @property
    def step_dt(self) -> float:
        return self.dt / 2 ** self.refine

    def _draw(self, gens, width):
        R, n, d = self.shape
        out = np.empty((R, n, width, d))
        for r in range(R):
            for i in range(n):
                out[r, i] = gens[r][i].standard_normal((width, d))
        return out

    def _fill(self):
        dW = np.sqrt(self.dt) * self._draw(self._coarse, self.chunk)
        h = self.dt
        for level in range(self.refine):
            z = self._draw(self._bridge[level], dW.shape[2])
            half = 0.5 * dW
            spread = 0.5 * np.sqrt(h) * z
            fine = np.empty(dW.shape[:2] + (2 * dW.shape[2],) + dW.shape[3:])
            fine[:, :, 0::2] = half + spread
            fine[:, :, 1::2] = half - spread
            dW = fine
            h /= 2
        # (R, n, steps, d) -> (steps, R, n, d)
        self._buf = np.ascontiguousarray(np.moveaxis(dW, 2, 0))
        self._pos = 0

    def next(self) -> np.ndarray:
        """Increments for the next fine step, shape ``(R, n, d)``."""
        if self._buf is None or self._pos >= self._buf.shape[0]:
            self._fill()
        out = self._buf[self._pos]
        self._pos += 1
        return out
