"""Counter-based random streams with addressable substreams.

Every trajectory gets a Philox-4x64 key derived from ``(seed, *path)``
through :class:`numpy.random.SeedSequence`. Within a trajectory, each
``(timestep, inner_iteration)`` pair addresses its own block of the counter
space: the two high counter words hold the substream index and the low word
advances as numbers are drawn. Because the substream is selected by counter
rather than by draw order, guided and unguided arms that share a seed draw
the same commit uniforms at every timestep, no matter how many inner
iterations either arm ran.

Uniforms are built from raw 64-bit words (top 53 bits), and normals use
Box-Muller on those uniforms, so streams do not depend on the
``numpy.random.Generator`` method implementations.
"""

from __future__ import annotations

import numpy as np

__all__ = ["derive_key", "Stream", "TrajectoryRNG", "COMMIT"]

_TWO_M53 = 2.0**-53

# inner-iteration slot reserved for the unmask/commit draw of a timestep
COMMIT = 0


def derive_key(seed: int, path: tuple[int, ...] = ()) -> np.ndarray:
    """128-bit Philox key for ``seed`` and a tuple of non-negative path ints."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return ss.generate_state(2, dtype=np.uint64)


class Stream:
    """A single Philox substream exposing ``random`` and ``normal``.

    ``random(size)`` mirrors :meth:`numpy.random.Generator.random`, so code
    that samples through a ``rng`` argument accepts either object.
    """

    def __init__(self, key: np.ndarray, hi: int = 0, lo: int = 0):
        counter = np.array([0, 0, lo, hi], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=counter)

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        raw = np.asarray(self._bitgen.random_raw(n), dtype=np.uint64)
        u = (raw >> np.uint64(11)).astype(np.float64) * _TWO_M53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size):
        """Standard normal draws by Box-Muller."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.random(m)
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(size)


class TrajectoryRNG:
    """Key for one trajectory; hands out substreams by ``(timestep, slot)``.

    Slot :data:`COMMIT` (0) is the unmask draw at a timestep, slot ``j >= 1``
    the hard-token draw of inner iteration ``j``.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.key = derive_key(self.seed, self.path)

    def stream(self, timestep: int, slot: int = COMMIT) -> Stream:
        return Stream(self.key, hi=int(timestep), lo=int(slot))

    def commit(self, timestep: int) -> Stream:
        return self.stream(timestep, COMMIT)

    def inner(self, timestep: int, j: int) -> Stream:
        if j < 1:
            raise ValueError("inner iterations are numbered from 1")
        return self.stream(timestep, j)

    def __repr__(self):
        return f"TrajectoryRNG(seed={self.seed}, path={self.path})"
