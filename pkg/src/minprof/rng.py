"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream_label, counter)`` so runs can
be replayed exactly, on any platform, without carrying generator state
between processes.

Algorithm (documented so other implementations can match it bit for bit):

* ``label_hash = fnv1a64(stream_label.encode("utf-8"))``
* ``key = mix64(seed ^ mix64(label_hash))``
* the ``i``-th 64-bit word is ``mix64(key + (i + 1) * 0x9E3779B97F4A7C15)``
  (all arithmetic modulo 2**64), where ``mix64`` is the SplitMix64 finalizer.
* uniforms in (0, 1): ``((word >> 11) + 0.5) * 2**-53``
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)`` giving
  ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

STREAMS = ("init", "shuffle", "split", "dropout-free")


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    return int(_mix_array(np.array([x & _MASK64], dtype=np.uint64))[0])


def derive_seed(*parts) -> int:
    """Hash arbitrary printable parts into a 64-bit seed (order-sensitive)."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "big")


class Rng:
    """One labelled stream of a seed. Draws advance ``counter``."""

    def __init__(self, seed: int, stream_label: str, counter: int = 0):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream_label = stream_label
        self.counter = int(counter)
        self._key = mix64(self.seed ^ mix64(fnv1a64(stream_label.encode("utf-8"))))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_label={self.stream_label!r}, counter={self.counter})"

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix_array(np.uint64(self._key) + idx * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values strictly inside (0, 1)."""
        w = self.words(n) >> np.uint64(11)
        return (w.astype(np.float64) + 0.5) * (2.0 ** -53)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.words(n), kind="stable")
