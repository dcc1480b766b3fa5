"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)`` evaluated with
Philox4x32-10, so results do not depend on call order across workers.

One *block* is one Philox evaluation: four 32-bit words, packed into two
64-bit words and then into two uniforms in the open interval (0, 1).

Consumption per call (documented so callers can predict counters):

* ``uniforms(n)``  -> ceil(n / 2) blocks
* ``normals(n)``   -> ceil(n / 2) blocks; block k yields the cosine branch at
  index 2k and the sine branch at 2k + 1 (Box-Muller)
* ``gaussian()``   -> 1 block (cosine branch only)
* ``resample_indices(n)`` -> ceil(n / 2) blocks
* ``random_scale_vector(m)`` -> ceil(m / 2) blocks
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK32 = np.uint64(0xFFFFFFFF)
MASK64 = (1 << 64) - 1
PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
PHILOX_ROUNDS = 10

_SPLIT_TWEAK = 0x5851F42D4C957F2D
_TWO_M53 = 2.0**-53


def philox4x32(counters: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Evaluate Philox4x32-10 on an ``(n, 4)`` array of 32-bit counter words."""
    c = np.asarray(counters, dtype=np.uint64) & MASK32
    if c.ndim != 2 or c.shape[1] != 4:
        raise ValueError(f"counters must have shape (n, 4), got {c.shape}")
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0, k1 = key[0] & 0xFFFFFFFF, key[1] & 0xFFFFFFFF
    for r in range(PHILOX_ROUNDS):
        if r:
            k0 = (k0 + PHILOX_W0) & 0xFFFFFFFF
            k1 = (k1 + PHILOX_W1) & 0xFFFFFFFF
        p0 = PHILOX_M0 * c0
        p1 = PHILOX_M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def _check_u64(name: str, value: int) -> int:
    value = int(value)
    if not 0 <= value <= MASK64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")
    return value


@dataclass
class RngStream:
    """A position in a counter-based random stream.

    ``seed`` selects the Philox key, ``stream`` the independent sub-stream and
    ``counter`` the next block to evaluate.  Drawing advances ``counter``.
    """

    seed: int = 42
    counter: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        self.seed = _check_u64("seed", self.seed)
        self.counter = _check_u64("counter", self.counter)
        self.stream = _check_u64("stream", self.stream)

    @property
    def key(self) -> tuple[int, int]:
        return self.seed & 0xFFFFFFFF, self.seed >> 32

    def copy(self) -> RngStream:
        return RngStream(self.seed, self.counter, self.stream)

    def split(self, key: int) -> RngStream:
        """Independent child stream labelled by ``key``; does not advance self."""
        key = _check_u64("key", key)
        words = np.array(
            [[key & 0xFFFFFFFF, key >> 32, self.stream & 0xFFFFFFFF, self.stream >> 32]],
            dtype=np.uint64,
        )
        tweaked = self.seed ^ _SPLIT_TWEAK
        out = philox4x32(words, (tweaked & 0xFFFFFFFF, tweaked >> 32))[0]
        child = int(out[0]) | (int(out[1]) << 32)
        return RngStream(self.seed, 0, child)

    def blocks(self, n: int) -> np.ndarray:
        """``n`` raw Philox blocks as an ``(n, 4)`` uint64 array of 32-bit words."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(n, dtype=np.uint64) + np.uint64(self.counter)
        if n and self.counter + n - 1 > MASK64:
            raise OverflowError("stream counter exhausted")
        words = np.empty((n, 4), dtype=np.uint64)
        words[:, 0] = idx & MASK32
        words[:, 1] = idx >> np.uint64(32)
        words[:, 2] = self.stream & 0xFFFFFFFF
        words[:, 3] = self.stream >> 32
        self.counter += n
        return philox4x32(words, self.key)

    def raw64(self, n: int) -> np.ndarray:
        """``n`` uniformly distributed 64-bit words (two per block)."""
        b = self.blocks((n + 1) // 2)
        lo = b[:, 0] | (b[:, 1] << np.uint64(32))
        hi = b[:, 2] | (b[:, 3] << np.uint64(32))
        return np.stack([lo, hi], axis=1).reshape(-1)[:n]

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in the open interval (0, 1) with 53-bit resolution."""
        w = self.raw64(n) >> np.uint64(11)
        return (w.astype(np.float64) + 0.5) * _TWO_M53

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` Box-Muller draws from N(mean, std**2)."""
        if not std > 0:
            raise ValueError(f"std must be positive, got {std}")
        nb = (n + 1) // 2
        u = self.uniforms(2 * nb).reshape(nb, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        if mean == 0.0 and std == 1.0:
            return z
        return mean + std * z


def gaussian(stream: RngStream, mean: float = 0.0, std: float = 1.0) -> float:
    """One N(mean, std**2) draw; advances the counter by exactly one block."""
    return float(stream.normals(1, mean, std)[0])


def resample_indices(stream: RngStream, n: int) -> np.ndarray:
    """Bootstrap resample: ``n`` i.i.d. uniform indices in ``[0, n)``."""
    if n < 1:
        raise ValueError("n must be positive")
    idx = np.floor(stream.uniforms(n) * n).astype(np.int64)
    return np.minimum(idx, n - 1)


def random_scale_vector(stream: RngStream, m: int, low: float, high: float) -> np.ndarray:
    """Per-dimension scales drawn log-uniformly from ``[low, high]``."""
    if m < 1:
        raise ValueError("m must be positive")
    if not (0 < low <= high):
        raise ValueError(f"need 0 < low <= high, got ({low}, {high})")
    u = stream.uniforms(m)
    if low == high:
        return np.full(m, float(low))
    return np.exp(math.log(low) + u * (math.log(high) - math.log(low)))
