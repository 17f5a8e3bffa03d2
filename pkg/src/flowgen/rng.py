"""Deterministic, counter-based random streams.

Streams are keyed by ``(seed, stream_id)`` on top of the Philox4x64
bit generator, so identical keys reproduce identical sequences across runs
and platforms, and distinct stream ids give statistically independent
sequences.  Streams must not be shared across concurrent tasks; derive a
child stream per task instead.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    """One round of splitmix64; spreads child indices over the key space."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class RngStream:
    """A reproducible random stream identified by (seed, stream_id)."""

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def child(self, index):
        """Independent stream derived deterministically from this one."""
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(index)))

    def generator(self):
        return self._gen

    # convenience draws returning plain arrays
    def normal(self, shape=(), dtype=np.float64):
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, lo=0.0, hi=1.0, shape=(), dtype=np.float64):
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return (lo + (hi - lo) * self._gen.random(size=shape, dtype=dtype)).astype(
            dtype, copy=False
        )

    def integers(self, lo, hi, shape=()):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def state(self):
        """JSON-serializable snapshot of the exact bit-generator state."""
        return _jsonable(self._gen.bit_generator.state)

    def set_state(self, state):
        self._gen.bit_generator.state = state

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def sample_gaussian(rng, shape, dtype=np.float64):
    """I.i.d. standard normal draws as a Tensor."""
    return Tensor(rng.normal(shape, dtype=dtype))


def sample_uniform(rng, lo, hi, shape, dtype=np.float64):
    """I.i.d. uniform draws on [lo, hi) as a Tensor."""
    return Tensor(rng.uniform(lo, hi, shape, dtype=dtype))
