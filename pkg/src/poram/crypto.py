"""Keyed primitives: PRF, small-domain PRP, and block sealing.

Every level of every partition is (re)built under a fresh 128-bit key.
The key drives two things:

* a pseudo-random permutation fixing each block's offset within the level
  (4-round balanced Feistel over the level's bit width, cycle-walking for
  domains that are not powers of two), and
* authenticated encryption of the blocks, binding each ciphertext to its
  offset so the server can neither move nor replay blocks.  Because a key
  is never reused after the level is torn down, a stale block from an
  earlier construction of the same level fails authentication.

Two sealing modes share one interface.  Full mode uses AES-GCM with the
intra-level index as associated data.  Sim mode (used for metadata-only
experiments) keeps the same accounting sizes but replaces the ciphertext
with a 64-bit token carrying the id and an integrity check, which keeps
large simulated transfers cheap and vectorizable.
"""

import hashlib
import struct
import zlib

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import _kernels

MASK64 = (1 << 64) - 1

# Associated-data index reserved for the sealed per-level id list.
META_INDEX = (1 << 32) - 1


class IntegrityViolation(Exception):
    """A block or id-list failed authentication (tamper, replay, or truncation)."""


def mix64(x: int) -> int:
    """SplitMix64 finalizer; a cheap invertible 64-bit scrambler."""
    x &= MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


_NP_C1 = np.uint64(0xBF58476D1CE4E5B9)
_NP_C2 = np.uint64(0x94D049BB133111EB)


def mix64_np(arr: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over a uint64 array (wrapping arithmetic)."""
    x = arr.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _NP_C1
    x ^= x >> np.uint64(27)
    x *= _NP_C2
    x ^= x >> np.uint64(31)
    return x


def derive_key(master: bytes, label: bytes, *parts: int) -> bytes:
    """Derive a 16-byte subkey from a master secret, a label, and integers."""
    payload = label + b"".join(struct.pack("<q", p) for p in parts)
    return hashlib.blake2b(payload, key=master, digest_size=16).digest()


class Prf:
    """Keyed PRF with 64-bit output, used for counter-based slot assignment."""

    def __init__(self, key: bytes):
        self.key = key

    def u64(self, label: bytes, *parts: int) -> int:
        payload = label + b"".join(struct.pack("<q", p) for p in parts)
        digest = hashlib.blake2b(payload, key=self.key, digest_size=8).digest()
        return int.from_bytes(digest, "little")


class Prp:
    """Bijection on [0, domain) keyed by a level key.

    Balanced Feistel over the smallest even bit width covering the domain,
    with cycle-walking to land inside domains that are not powers of two.
    Scalar and table-based batch evaluation share the same round function,
    so they agree bit for bit.
    """

    ROUNDS = 4

    def __init__(self, key: bytes, domain: int, round_keys=None):
        if domain < 1:
            raise ValueError("domain must be positive")
        self.domain = domain
        if domain == 1:
            self.half = 0
            self.full = 1
            self.round_keys = ()
            return
        bits = max(2, (domain - 1).bit_length())
        self.half = (bits + 1) // 2
        self.full = 1 << (2 * self.half)
        if round_keys is not None:
            self.round_keys = tuple(round_keys)
        else:
            self.round_keys = tuple(
                int.from_bytes(derive_key(key, b"prp-round", r)[:8], "little")
                for r in range(self.ROUNDS)
            )

    # -- scalar -------------------------------------------------------------

    def _feistel(self, x: int) -> int:
        # mix64 unrolled inline: this sits on the hot path of table builds
        half, mask = self.half, (1 << self.half) - 1
        left, right = x >> half, x & mask
        for rk in self.round_keys:
            m = right ^ rk
            m ^= m >> 30
            m = (m * 0xBF58476D1CE4E5B9) & MASK64
            m ^= m >> 27
            m = (m * 0x94D049BB133111EB) & MASK64
            m ^= m >> 31
            left, right = right, left ^ (m & mask)
        return (left << half) | right

    def _feistel_inv(self, x: int) -> int:
        half, mask = self.half, (1 << self.half) - 1
        left, right = x >> half, x & mask
        for rk in reversed(self.round_keys):
            left, right = right ^ (mix64(left ^ rk) & mask), left
        return (left << half) | right

    def apply(self, i: int) -> int:
        if not 0 <= i < self.domain:
            raise ValueError(f"index {i} outside domain [0, {self.domain})")
        if self.domain == 1:
            return 0
        out = self._feistel(i)
        while out >= self.domain:
            out = self._feistel(out)
        return out

    def invert(self, i: int) -> int:
        if not 0 <= i < self.domain:
            raise ValueError(f"index {i} outside domain [0, {self.domain})")
        if self.domain == 1:
            return 0
        out = self._feistel_inv(i)
        while out >= self.domain:
            out = self._feistel_inv(out)
        return out

    # -- batch --------------------------------------------------------------

    def _feistel_np(self, arr: np.ndarray) -> np.ndarray:
        half = np.uint64(self.half)
        mask = np.uint64((1 << self.half) - 1)
        left = arr >> half
        right = arr & mask
        for rk in self.round_keys:
            left, right = right, left ^ (mix64_np(right ^ np.uint64(rk)) & mask)
        return (left << half) | right

    def full_table(self) -> np.ndarray:
        """The underlying permutation of the full power-of-two domain."""
        if self.domain == 1:
            return np.zeros(1, dtype=np.uint64)
        return self._feistel_np(np.arange(self.full, dtype=np.uint64))

    def apply_batch(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized apply; indices must lie in [0, domain)."""
        if self.domain == 1:
            return np.zeros(len(indices), dtype=np.uint64)
        table = self.full_table()
        out = table[np.asarray(indices, dtype=np.uint64)]
        pending = out >= self.domain
        while pending.any():
            out[pending] = table[out[pending]]
            pending = out >= self.domain
        return out

    def table(self) -> np.ndarray:
        """Permutation of the whole domain (apply at every index)."""
        if self.domain == 1:
            return np.zeros(1, dtype=np.uint64)
        out = np.empty(self.domain, dtype=np.uint64)
        rk = self.round_keys
        _kernels.feistel_table(self.domain, self.half, np.uint64(rk[0]),
                               np.uint64(rk[1]), np.uint64(rk[2]),
                               np.uint64(rk[3]), out)
        return out


# ---------------------------------------------------------------------------
# Block sealing
# ---------------------------------------------------------------------------

_ID_STRUCT = struct.Struct("<q")
_IDX_STRUCT = struct.Struct(">I")

_TOK_IDX = np.uint64(0x9E3779B97F4A7C15)
_TOK_ID = np.uint64(0xC2B2AE3D27D4EB4F)


class BlockCipher:
    """Seals (id, payload) blocks under one level key, bound to their offsets.

    ``sim`` mode emits 64-bit integer tokens instead of ciphertext bytes;
    integrity checking is a keyed arithmetic checksum rather than a MAC, but
    the failure surface (raise IntegrityViolation) is identical and byte
    accounting always uses the full sealed size.
    """

    __slots__ = ("key", "payload_size", "sim", "salt", "_np_salt_cache",
                 "_aead", "_nonce")

    def __init__(self, key: bytes, payload_size: int, sim: bool,
                 nonce_source=None, salt: int | None = None):
        self.key = key
        self.payload_size = payload_size
        self.sim = sim
        if sim:
            if salt is None:
                salt = int.from_bytes(derive_key(key, b"tok")[:8], "little")
            self.salt = salt
            self._np_salt_cache = None
        else:
            self._aead = AESGCM(key)
            if nonce_source is None:
                raise ValueError("full-mode cipher needs a nonce source")
            self._nonce = nonce_source

    # -- full mode ----------------------------------------------------------

    def seal(self, index: int, block_id: int, payload: bytes) -> bytes:
        nonce = self._nonce()
        if len(payload) != self.payload_size:
            raise ValueError("payload has the wrong length")
        plaintext = _ID_STRUCT.pack(block_id) + payload
        return nonce + self._aead.encrypt(nonce, plaintext, _IDX_STRUCT.pack(index))

    def open(self, index: int, sealed: bytes):
        if len(sealed) != 12 + 8 + self.payload_size + 16:
            raise IntegrityViolation("sealed block has the wrong length")
        try:
            plaintext = self._aead.decrypt(sealed[:12], sealed[12:], _IDX_STRUCT.pack(index))
        except InvalidTag as exc:
            raise IntegrityViolation("block failed authentication") from exc
        (block_id,) = _ID_STRUCT.unpack_from(plaintext)
        return block_id, plaintext[8:]

    # -- sim mode -----------------------------------------------------------

    def _checksum(self, index: int, id_plus: int) -> int:
        # mix64 inlined: tokens are sealed and opened on every block move
        m = (self.salt ^ ((index + 1) * 0x9E3779B97F4A7C15)
             ^ (id_plus * 0xC2B2AE3D27D4EB4F)) & MASK64
        m ^= m >> 30
        m = (m * 0xBF58476D1CE4E5B9) & MASK64
        m ^= m >> 27
        m = (m * 0x94D049BB133111EB) & MASK64
        m ^= m >> 31
        return m >> 32

    def seal_token(self, index: int, block_id: int) -> int:
        id_plus = block_id + 1
        return (self._checksum(index, id_plus) << 32) | id_plus

    def open_token(self, index: int, token: int) -> int:
        id_plus = token & 0xFFFFFFFF
        if (token >> 32) != self._checksum(index, id_plus):
            raise IntegrityViolation("token failed integrity check")
        return id_plus - 1

    @property
    def _np_salt(self) -> np.uint64:
        if self._np_salt_cache is None:
            self._np_salt_cache = np.uint64(self.salt)
        return self._np_salt_cache

    def seal_tokens(self, indices: np.ndarray, ids: np.ndarray) -> np.ndarray:
        """Vectorized seal: ids use -1 for dummies."""
        idx = np.asarray(indices, dtype=np.uint64)
        id_plus = (np.asarray(ids, dtype=np.int64) + 1).astype(np.uint64)
        chk = mix64_np(self._np_salt ^ ((idx + np.uint64(1)) * _TOK_IDX) ^ (id_plus * _TOK_ID))
        return ((chk >> np.uint64(32)) << np.uint64(32)) | id_plus

    def open_tokens(self, indices: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Vectorized open; returns int64 ids (-1 for dummies)."""
        tok = np.asarray(tokens, dtype=np.uint64)
        idx = np.asarray(indices, dtype=np.uint64)
        id_plus = tok & np.uint64(0xFFFFFFFF)
        chk = mix64_np(self._np_salt ^ ((idx + np.uint64(1)) * _TOK_IDX) ^ (id_plus * _TOK_ID))
        if not ((tok >> np.uint64(32)) == (chk >> np.uint64(32))).all():
            raise IntegrityViolation("token batch failed integrity check")
        return id_plus.astype(np.int64) - 1

    # -- id-list metadata ----------------------------------------------------

    def seal_meta(self, ids) -> object:
        """Seal the level's id list (index order).  Returns bytes or a tuple."""
        arr = np.asarray(ids, dtype=np.int64)
        if self.sim:
            digest = mix64(self.salt ^ zlib.crc32(arr.tobytes()) ^ (len(arr) << 33))
            return (arr, digest)
        nonce = self._nonce()
        return nonce + self._aead.encrypt(nonce, arr.tobytes(), _IDX_STRUCT.pack(META_INDEX))

    def open_meta(self, sealed) -> np.ndarray:
        if self.sim:
            arr, digest = sealed
            expect = mix64(self.salt ^ zlib.crc32(np.asarray(arr, dtype=np.int64).tobytes()) ^ (len(arr) << 33))
            if digest != expect:
                raise IntegrityViolation("id list failed integrity check")
            return np.asarray(arr, dtype=np.int64)
        try:
            plain = self._aead.decrypt(sealed[:12], sealed[12:], _IDX_STRUCT.pack(META_INDEX))
        except InvalidTag as exc:
            raise IntegrityViolation("id list failed authentication") from exc
        return np.frombuffer(plain, dtype=np.int64)


class LevelCrypto:
    """Everything keyed by one level key: the PRP and the block cipher.

    All key material expands from one hash of the level key, and the
    permutation is materialized once as an offset table (index -> slot),
    since a level's offsets are consulted many times between rebuilds.
    """

    __slots__ = ("key", "domain", "prp", "cipher", "_table")

    _TABLE_SCALAR_LIMIT = 24   # below this, building the table stays scalar

    def __init__(self, key: bytes, domain: int, payload_size: int, sim: bool,
                 nonce_source=None, material: bytes | None = None):
        self.key = key
        self.domain = domain
        if material is None:
            material = hashlib.blake2b(b"level-material", key=key,
                                       digest_size=64).digest()
        round_keys = (int.from_bytes(material[0:8], "little"),
                      int.from_bytes(material[8:16], "little"),
                      int.from_bytes(material[16:24], "little"),
                      int.from_bytes(material[24:32], "little"))
        self.prp = Prp(key, domain, round_keys=round_keys)
        if sim:
            self.cipher = BlockCipher(
                material[32:48], payload_size, sim=True,
                salt=int.from_bytes(material[48:56], "little"))
        else:
            self.cipher = BlockCipher(material[32:48], payload_size, sim=False,
                                      nonce_source=nonce_source)
        self._table = None

    @classmethod
    def from_context(cls, master: bytes, context: bytes, domain: int,
                     payload_size: int, sim: bool, nonce_source=None):
        """Derive the whole level from (master key, context) in one hash."""
        material = hashlib.blake2b(context, key=master, digest_size=64).digest()
        return cls(material[:16], domain, payload_size, sim,
                   nonce_source=nonce_source, material=material)

    def table(self) -> np.ndarray:
        """index -> offset for the whole domain, built on first use."""
        if self._table is None:
            if self.domain == 1:
                self._table = np.zeros(1, dtype=np.uint64)
            else:
                out = np.empty(self.domain, dtype=np.uint64)
                rk = self.prp.round_keys
                _kernels.feistel_table(
                    self.domain, self.prp.half, np.uint64(rk[0]),
                    np.uint64(rk[1]), np.uint64(rk[2]), np.uint64(rk[3]), out)
                self._table = out
        return self._table

    def offset(self, index: int) -> int:
        return int(self.table()[index])
