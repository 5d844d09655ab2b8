"""Client-side position maps.

Two resident implementations share one interface:

* :class:`PlainPositionMap` stores one packed 64-bit word per id (layout
  documented in :mod:`poram.types`), backed by a numpy array so the
  reported memory use is the real memory use.
* :class:`CounterCompressedPositionMap` keeps a per-id access counter and
  derives the partition/slot number as ``PRF(id, counter) mod P``,
  modelling the compressed map: the partition number costs no storage
  beyond the counter, and the level is reported at its 1-bit entropy in
  the model estimate.  Level and index are still stored explicitly; the
  0.255 bytes/block figure is a model number reported alongside the actual
  resident bytes.

``reassign`` is the access-path operation: it returns the old position and
moves the id to a fresh cache slot in one step.  With PRF slot assignment
(either map), the slot sequence of an id depends only on (key, id,
counter), which is what makes plain and compressed runs trace-identical.
"""

from typing import NamedTuple

import numpy as np

from .crypto import Prf
from .types import (POS_CACHED, POS_SERVER, POS_ZEROED, Position, ZEROED,
                    pack_position, pack_server_word, unpack_position)

_INDEX_SHIFT = 42


class MemoryEstimate(NamedTuple):
    model_bytes: int
    resident_bytes: int


class PlainPositionMap:
    """id -> packed Position, one uint64 word per id."""

    ENTRY_BYTES = 8

    def __init__(self, n: int, partitions: int, prf_slots: bool = False,
                 prf_key: bytes = b""):
        self.n = n
        self.partitions = partitions
        self.words = np.zeros(n, dtype=np.uint64)
        self.prf_slots = prf_slots
        if prf_slots:
            self._prf = Prf(prf_key)
            self._counters = np.zeros(n, dtype=np.uint32)

    def _check(self, block_id: int):
        if not 0 <= block_id < self.n:
            raise ValueError(f"block id {block_id} outside [0, {self.n})")

    def get(self, block_id: int) -> Position:
        self._check(block_id)
        return unpack_position(int(self.words[block_id]))

    def set(self, block_id: int, pos: Position):
        self._check(block_id)
        self.words[block_id] = pack_position(pos)

    def initial_partition(self, block_id: int, rng) -> int:
        """Partition read on the first-ever access of a zeroed id."""
        if self.prf_slots:
            return self._prf.u64(b"slot", block_id, 0) % self.partitions
        return rng.randrange(self.partitions)

    def reassign(self, block_id: int, rng):
        """Move id to a fresh cache slot; returns (old position, slot)."""
        self._check(block_id)
        old = unpack_position(int(self.words[block_id]))
        if self.prf_slots:
            j = int(self._counters[block_id]) + 1
            self._counters[block_id] = j
            slot = self._prf.u64(b"slot", block_id, j) % self.partitions
        else:
            slot = rng.randrange(self.partitions)
        self.words[block_id] = POS_CACHED | (slot << 2)
        return old, slot

    # -- batch helpers for shuffles ------------------------------------------

    def unread_mask(self, ids: np.ndarray, partition: int, level: int) -> np.ndarray:
        """True where the map still points at (partition, level, list index)."""
        expected = pack_server_word(partition, level, 0) + (
            np.arange(len(ids), dtype=np.uint64) << np.uint64(_INDEX_SHIFT))
        return self.words[ids] == expected

    def unread_indices(self, ids, partition: int, level: int) -> list:
        """Indices i where ids[i] still lives at (partition, level, i)."""
        if len(ids) <= 48:
            base = pack_server_word(partition, level, 0)
            words = self.words
            return [i for i, bid in enumerate(ids)
                    if int(words[bid]) == base + (i << _INDEX_SHIFT)]
        return np.nonzero(self.unread_mask(np.asarray(ids, dtype=np.int64),
                                           partition, level))[0].tolist()

    def set_server(self, block_id: int, partition: int, level: int, index: int):
        self.words[block_id] = pack_server_word(partition, level, index)

    def set_server_batch(self, ids: np.ndarray, partition: int, level: int,
                         indices: np.ndarray):
        base = np.uint64(pack_server_word(partition, level, 0))
        self.words[np.asarray(ids, dtype=np.int64)] = base + (
            np.asarray(indices, dtype=np.uint64) << np.uint64(_INDEX_SHIFT))

    def memory_estimate(self) -> MemoryEstimate:
        size = self.n * self.ENTRY_BYTES
        return MemoryEstimate(size, size)


class CounterCompressedPositionMap:
    """Counter-based map: partition derived as PRF(id, counter) mod P."""

    MODEL_BYTES_PER_BLOCK = 0.255

    def __init__(self, n: int, partitions: int, prf_key: bytes):
        self.n = n
        self.partitions = partitions
        self._prf = Prf(prf_key)
        self.kinds = np.zeros(n, dtype=np.uint8)
        self.counters = np.zeros(n, dtype=np.uint32)
        self.levels = np.zeros(n, dtype=np.uint8)
        self.indices = np.zeros(n, dtype=np.uint32)

    def _check(self, block_id: int):
        if not 0 <= block_id < self.n:
            raise ValueError(f"block id {block_id} outside [0, {self.n})")

    def _partition_of(self, block_id: int) -> int:
        return self._prf.u64(b"slot", block_id, int(self.counters[block_id])) % self.partitions

    def get(self, block_id: int) -> Position:
        self._check(block_id)
        kind = int(self.kinds[block_id])
        if kind == POS_ZEROED:
            return ZEROED
        part = self._partition_of(block_id)
        if kind == POS_SERVER:
            return Position(POS_SERVER, part, int(self.levels[block_id]),
                            int(self.indices[block_id]))
        return Position(kind, part)

    def set(self, block_id: int, pos: Position):
        self._check(block_id)
        if pos.kind == POS_ZEROED:
            self.kinds[block_id] = POS_ZEROED
            return
        derived = self._partition_of(block_id)
        if pos.partition != derived:
            raise ValueError(
                f"compressed map derives partition {derived} for id {block_id}; "
                f"cannot store {pos.partition}")
        self.kinds[block_id] = pos.kind
        if pos.kind == POS_SERVER:
            self.levels[block_id] = pos.level
            self.indices[block_id] = pos.index

    def initial_partition(self, block_id: int, rng) -> int:
        return self._prf.u64(b"slot", block_id, 0) % self.partitions

    def reassign(self, block_id: int, rng):
        self._check(block_id)
        old = self.get(block_id)
        j = int(self.counters[block_id]) + 1
        self.counters[block_id] = j
        self.kinds[block_id] = POS_CACHED
        slot = self._prf.u64(b"slot", block_id, j) % self.partitions
        return old, slot

    def unread_mask(self, ids: np.ndarray, partition: int, level: int) -> np.ndarray:
        out = np.zeros(len(ids), dtype=bool)
        for i, block_id in enumerate(np.asarray(ids, dtype=np.int64)):
            bid = int(block_id)
            out[i] = (self.kinds[bid] == POS_SERVER
                      and self.levels[bid] == level
                      and self.indices[bid] == i
                      and self._partition_of(bid) == partition)
        return out

    def unread_indices(self, ids, partition: int, level: int) -> list:
        return [i for i, ok in enumerate(
            self.unread_mask(np.asarray(ids, dtype=np.int64), partition, level))
            if ok]

    def set_server(self, block_id: int, partition: int, level: int, index: int):
        self.set(block_id, Position(POS_SERVER, partition, level, index))

    def set_server_batch(self, ids: np.ndarray, partition: int, level: int,
                         indices: np.ndarray):
        for block_id, index in zip(np.asarray(ids, dtype=np.int64),
                                   np.asarray(indices, dtype=np.int64)):
            bid = int(block_id)
            derived = self._partition_of(bid)
            if derived != partition:
                raise ValueError(
                    f"compressed map derives partition {derived} for id {bid}; "
                    f"shuffle tried to place it in {partition}")
            self.kinds[bid] = POS_SERVER
            self.levels[bid] = level
            self.indices[bid] = int(index)

    def memory_estimate(self) -> MemoryEstimate:
        model = int(round(self.n * self.MODEL_BYTES_PER_BLOCK))
        resident = (self.kinds.nbytes + self.counters.nbytes
                    + self.levels.nbytes + self.indices.nbytes)
        return MemoryEstimate(model, resident)
