"""Innermost block-processing loops, jitted when numba is available.

Three loops account for most simulation time: sealing a level's tokens
into their permuted slots, opening a batch of fetched tokens, and building
a level's offset table (Feistel walk per index).  Each has a jitted and a
plain implementation with identical integer semantics; the crypto module's
scalar routines serve as the reference in tests.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(**_kwargs):
        def wrap(fn):
            return fn
        return wrap


_MASK64 = (1 << 64) - 1
_C1 = 0x9E3779B97F4A7C15
_C2 = 0xC2B2AE3D27D4EB4F
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


if HAVE_NUMBA:

    @njit(cache=True)
    def seal_level(table, ids, salt, k, start, end, out):
        """out[table[i]] = token(offset=table[i], id=ids[i] if i < k else dummy)."""
        c1 = np.uint64(_C1)
        c2 = np.uint64(_C2)
        m1 = np.uint64(_M1)
        m2 = np.uint64(_M2)
        one = np.uint64(1)
        for i in range(start, end):
            off = table[i]
            id_plus = np.uint64(ids[i] + 1) if i < k else np.uint64(0)
            m = salt ^ ((off + one) * c1) ^ (id_plus * c2)
            m ^= m >> np.uint64(30)
            m *= m1
            m ^= m >> np.uint64(27)
            m *= m2
            m ^= m >> np.uint64(31)
            out[off] = ((m >> np.uint64(32)) << np.uint64(32)) | id_plus

    @njit(cache=True)
    def open_tokens(offsets, tokens, salt, ids_out):
        """Verify and decode tokens; returns the index of the first bad
        token, or -1 when every checksum matches."""
        c1 = np.uint64(_C1)
        c2 = np.uint64(_C2)
        m1 = np.uint64(_M1)
        m2 = np.uint64(_M2)
        one = np.uint64(1)
        low = np.uint64(0xFFFFFFFF)
        for i in range(offsets.shape[0]):
            token = tokens[i]
            id_plus = token & low
            m = salt ^ ((offsets[i] + one) * c1) ^ (id_plus * c2)
            m ^= m >> np.uint64(30)
            m *= m1
            m ^= m >> np.uint64(27)
            m *= m2
            m ^= m >> np.uint64(31)
            if (token >> np.uint64(32)) != (m >> np.uint64(32)):
                return i
            ids_out[i] = np.int64(id_plus) - 1
        return -1

    @njit(cache=True)
    def feistel_table(domain, half, rk0, rk1, rk2, rk3, out):
        """out[i] = cycle-walked 4-round Feistel image of i, for all i.

        Round keys must arrive as np.uint64 scalars."""
        mask = np.uint64((1 << half) - 1)
        h = np.uint64(half)
        m1 = np.uint64(_M1)
        m2 = np.uint64(_M2)
        dom = np.uint64(domain)
        keys = (rk0, rk1, rk2, rk3)
        for i in range(domain):
            x = np.uint64(i)
            while True:
                left = x >> h
                right = x & mask
                for rk in keys:
                    m = right ^ rk
                    m ^= m >> np.uint64(30)
                    m *= m1
                    m ^= m >> np.uint64(27)
                    m *= m2
                    m ^= m >> np.uint64(31)
                    left, right = right, left ^ (m & mask)
                x = (left << h) | right
                if x < dom:
                    break
            out[i] = x

else:

    def _mix(m):
        m &= _MASK64
        m ^= m >> 30
        m = (m * _M1) & _MASK64
        m ^= m >> 27
        m = (m * _M2) & _MASK64
        return m ^ (m >> 31)

    def seal_level(table, ids, salt, k, start, end, out):
        salt = int(salt)
        for i in range(start, end):
            off = int(table[i])
            id_plus = int(ids[i]) + 1 if i < k else 0
            m = _mix(salt ^ ((off + 1) * _C1) ^ (id_plus * _C2))
            out[off] = ((m >> 32) << 32) | id_plus

    def open_tokens(offsets, tokens, salt, ids_out):
        salt = int(salt)
        for i in range(len(offsets)):
            token = int(tokens[i])
            id_plus = token & 0xFFFFFFFF
            m = _mix(salt ^ ((int(offsets[i]) + 1) * _C1) ^ (id_plus * _C2))
            if (token >> 32) != (m >> 32):
                return i
            ids_out[i] = id_plus - 1
        return -1

    def feistel_table(domain, half, rk0, rk1, rk2, rk3, out):
        mask = (1 << half) - 1
        keys = (int(rk0), int(rk1), int(rk2), int(rk3))
        for i in range(domain):
            x = i
            while True:
                left, right = x >> half, x & mask
                for rk in keys:
                    left, right = right, left ^ (_mix(right ^ rk) & mask)
                x = (left << half) | right
                if x < domain:
                    break
            out[i] = x


def warm_up():
    """Trigger jit compilation outside any timed section."""
    table = np.arange(4, dtype=np.uint64)
    ids = np.arange(4, dtype=np.int64)
    out = np.zeros(4, dtype=np.uint64)
    seal_level(table, ids, np.uint64(1), 2, 0, 4, out)
    got = np.zeros(4, dtype=np.int64)
    open_tokens(table, out, np.uint64(1), got)
    feistel_table(4, 1, np.uint64(1), np.uint64(2), np.uint64(3), np.uint64(4),
                  out)
