"""Counter-based random numbers (Philox4x32-10) for reproducible parallel Monte Carlo.

Every draw is a pure function of ``(key, counter)``, so a photon's random
sequence depends only on the master seed, the frame index and the photon
index, never on how photons were split across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_INV_2_32 = 1.0 / 4294967296.0


def philox4x32(counter, key, rounds: int = 10) -> tuple[np.ndarray, ...]:
    """Vectorised Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of four array-likes of 32-bit unsigned words
        Broadcast against each other.
    key : pair of ints (32-bit words)

    Returns
    -------
    tuple of four ``uint64`` arrays holding 32-bit outputs.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = int(key[0]) & 0xFFFFFFFF
    k1 = int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = c0 * PHILOX_M0
        p1 = c2 * PHILOX_M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = (
            hi1 ^ c1 ^ np.uint64(k0),
            lo1,
            hi0 ^ c3 ^ np.uint64(k1),
            lo0,
        )
        k0 = (k0 + PHILOX_W0) & 0xFFFFFFFF
        k1 = (k1 + PHILOX_W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def derive_key(*parts: int) -> tuple[int, int]:
    """Hash an arbitrary tuple of integers into a 64-bit Philox key."""
    h = hashlib.sha256(b"turbidspike-key")
    for part in parts:
        h.update(int(part).to_bytes(16, "little", signed=True))
    digest = h.digest()
    return int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")


def derive_seed(*parts: int) -> int:
    """Hash integers into a non-negative 63-bit seed (for per-sample seeding)."""
    h = hashlib.sha256(b"turbidspike-seed")
    for part in parts:
        h.update(int(part).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little") >> 1


class PhotonStreams:
    """Per-photon uniform deviates in (0, 1].

    The counter for photon ``i`` at draw-block ``k`` is ``(k, i_lo, i_hi, frame)``;
    each block yields four deviates.
    """

    def __init__(self, seed: int, frame: int = 0):
        self.seed = int(seed)
        self.frame = int(frame)
        self.key = derive_key(self.seed)

    def block(self, photon_ids: np.ndarray, block_index: np.ndarray) -> np.ndarray:
        ids = np.asarray(photon_ids, dtype=np.uint64)
        words = philox4x32(
            (block_index, ids & _MASK32, ids >> _SHIFT32, np.uint64(self.frame & 0xFFFFFFFF)),
            self.key,
        )
        # (x + 1) / 2**32 lies in (0, 1]; never zero, so -log(u) stays finite
        return np.stack([(w.astype(np.float64) + 1.0) * _INV_2_32 for w in words], axis=-1)
