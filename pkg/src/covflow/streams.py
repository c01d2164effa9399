"""Counter-based Gaussian streams.

Each stream is a Philox-4x64 key derived from ``(seed, salt)``. A block of
variates is addressed by ``(layer, row)``: the 256-bit counter holds the
layer in word 2 and ``row * stride`` in word 0, where ``stride`` is the
number of counter increments one row needs. Any row can be regenerated on
its own, independent of how rows were grouped when first drawn, and distinct
``(layer, row)`` pairs never touch the same counter values.

Normals come from Box-Muller on 53-bit uniforms: the first half of a row's
words gives radii, the second half angles. This consumes a fixed number of
words per variate; the ziggurat in ``numpy.random.Generator`` does not.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_U53 = 2.0**-53

# stream purposes
SALT_DENSE = 0xD0
SALT_PROJECTED = 0xE1
SALT_DIRECTION = 0xF2


def derive_seed(master_seed: int, *path: int) -> int:
    """64-bit child seed for ``path`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed) & _MASK64, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def row_stride(width: int) -> int:
    """Counter increments reserved for one row of ``width`` normals."""
    return max(1, -(-width // 4))


def counter_range(layer: int, row: int, width: int) -> tuple:
    """``(layer, first, last_exclusive)`` counter-word-0 range used by one row.

    Philox increments its counter before each output block, so a row set to
    start at ``row * stride`` actually consumes words ``row * stride + 1`` on.
    """
    s = row_stride(width)
    return (layer, row * s + 1, (row + 1) * s + 1)


class GaussianStream:
    """Standard normals addressed by ``(layer, row)``."""

    def __init__(self, seed: int, salt: int):
        self.seed = int(seed) & _MASK64
        self.salt = int(salt)
        self.key = np.random.SeedSequence([self.seed, self.salt]).generate_state(2, np.uint64)
        self._bitgen = np.random.Philox(key=self.key)
        self._state = self._bitgen.state

    def _raw(self, layer: int, start: int, count: int) -> np.ndarray:
        state = self._state
        state["state"]["counter"] = np.array([start, 0, layer, 0], dtype=np.uint64)
        state["state"]["key"] = self.key
        state["buffer_pos"] = 4
        self._bitgen.state = state
        return self._bitgen.random_raw(count)

    def block(self, layer: int, row0: int, nrows: int, width: int) -> np.ndarray:
        """Rows ``row0 .. row0 + nrows - 1`` of layer ``layer``, shape ``(nrows, width)``."""
        stride = row_stride(width)
        half = stride * 2
        raw = self._raw(layer, row0 * stride, nrows * stride * 4).reshape(nrows, 2, half)
        u = (raw >> np.uint64(11)).astype(np.float64)
        u *= _U53
        radius = np.log1p(-u[:, 0])
        radius *= -2.0
        np.sqrt(radius, out=radius)
        # half-angle form: one tan instead of cos and sin
        t = np.tan(np.pi * u[:, 1])
        t2 = t * t
        inv = 1.0 / (1.0 + t2)
        z = np.empty((nrows, 2, half))
        np.multiply(radius, (1.0 - t2) * inv, out=z[:, 0])
        np.multiply(radius, 2.0 * t * inv, out=z[:, 1])
        return z.reshape(nrows, 4 * stride)[:, :width]
