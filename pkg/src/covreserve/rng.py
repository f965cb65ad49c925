"""Counter-based random streams.

Every uniform draw is a pure function of ``(seed, replication, claim, purpose,
index)``, computed with the Philox4x64-10 block cipher.  Draws therefore do
not depend on evaluation order, chunking or the number of workers, and whole
arrays of independent streams are evaluated in one call.
"""
from __future__ import annotations

import numpy as np
from numba import njit

M0 = np.uint64(0xD2E7470EE14C6C93)
M1 = np.uint64(0xCA5A826395121157)
W0 = np.uint64(0x9E3779B97F4A7C15)
W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S12 = np.uint64(12)
ROUNDS = 10


def _mulhilo_np(m, x):
    m_lo, m_hi = m & _LO32, m >> _S32
    x_lo, x_hi = x & _LO32, x >> _S32
    ll, lh, hl, hh = m_lo * x_lo, m_lo * x_hi, m_hi * x_lo, m_hi * x_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    return hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32), m * x


def philox4x64(counter, key) -> np.ndarray:
    """Pure-numpy Philox4x64-10 over broadcastable counter words.

    Reference implementation; :class:`StreamFamily` uses the compiled kernel.
    Returns an array of shape ``broadcast + (4,)``.
    """
    with np.errstate(over="ignore"):
        words = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counter])
        x0, x1, x2, x3 = (w.copy() for w in words)
        k0, k1 = np.uint64(key[0]), np.uint64(key[1])
        for r in range(ROUNDS):
            if r:
                k0, k1 = np.uint64(k0 + W0), np.uint64(k1 + W1)
            hi0, lo0 = _mulhilo_np(M0, x0)
            hi1, lo1 = _mulhilo_np(M1, x2)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    return np.stack([x0, x1, x2, x3], axis=-1)


@njit(cache=True, inline="always")
def _mulhilo(m, x):
    lo32 = np.uint64(0xFFFFFFFF)
    s = np.uint64(32)
    ml = m & lo32
    mh = m >> s
    xl = x & lo32
    xh = x >> s
    ll = ml * xl
    lh = ml * xh
    hl = mh * xl
    hh = mh * xh
    mid = (ll >> s) + (lh & lo32) + (hl & lo32)
    return hh + (lh >> s) + (hl >> s) + (mid >> s), m * x


@njit(cache=True)
def _uniform_kernel(rep, claim, purpose, k0, k1, n, out):
    scale = 2.0**-52
    for i in range(rep.shape[0]):
        for b in range((n + 3) // 4):
            x0 = np.uint64(b)
            x1 = claim[i]
            x2 = rep[i]
            x3 = purpose
            a = k0
            c = k1
            for r in range(10):
                if r > 0:
                    a = a + W0
                    c = c + W1
                h0, l0 = _mulhilo(M0, x0)
                h1, l1 = _mulhilo(M1, x2)
                x0, x1, x2, x3 = h1 ^ x1 ^ a, l1, h0 ^ x3 ^ c, l0
            base = 4 * b
            if base < n:
                out[i, base] = (float(x0 >> np.uint64(12)) + 0.5) * scale
            if base + 1 < n:
                out[i, base + 1] = (float(x1 >> np.uint64(12)) + 0.5) * scale
            if base + 2 < n:
                out[i, base + 2] = (float(x2 >> np.uint64(12)) + 0.5) * scale
            if base + 3 < n:
                out[i, base + 3] = (float(x3 >> np.uint64(12)) + 0.5) * scale


def to_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles strictly inside (0, 1).

    52 bits are kept so that the top value ``1 - 2**-53`` is representable.
    """
    return ((words >> _S12).astype(np.float64) + 0.5) * 2.0**-52


def seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if not 0 <= seed < 2**128:
        raise ValueError(f"seed must be in [0, 2**128), got {seed}")
    return seed & 0xFFFFFFFFFFFFFFFF, seed >> 64


class StreamFamily:
    """All streams derived from one master seed.

    A stream is addressed by ``(replication, claim, purpose)``; inside a stream
    the uniforms are numbered ``0, 1, 2, ...`` and block ``b`` of four draws
    uses the Philox counter ``(b, claim, replication, purpose)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = tuple(np.uint64(k) for k in seed_key(seed))

    def uniforms(self, replication, claim, purpose: int, n: int) -> np.ndarray:
        """Uniforms in (0, 1) of shape ``broadcast(replication, claim) + (n,)``."""
        rep, clm = np.broadcast_arrays(
            np.asarray(replication, dtype=np.uint64), np.asarray(claim, dtype=np.uint64)
        )
        shape = rep.shape
        out = np.empty((rep.size, n), dtype=np.float64)
        if rep.size and n:
            _uniform_kernel(
                np.ascontiguousarray(rep.ravel()),
                np.ascontiguousarray(clm.ravel()),
                np.uint64(purpose),
                self._key[0],
                self._key[1],
                n,
                out,
            )
        return out.reshape(shape + (n,))

    def stream(self, replication: int, claim: int) -> "Stream":
        return Stream(self, replication, claim)


class Stream:
    """Scalar view of one ``(replication, claim)`` pair."""

    def __init__(self, family: StreamFamily, replication: int, claim: int):
        self.family = family
        self.replication = int(replication)
        self.claim = int(claim)

    def uniforms(self, purpose: int, n: int) -> np.ndarray:
        return self.family.uniforms(self.replication, self.claim, purpose, n)
