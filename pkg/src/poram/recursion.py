"""Storing the position map in a chain of smaller ORAM instances.

Each level of the chain is a full partitioned ORAM.  The map of a level
with capacity ``n`` packs ``alpha`` entries per block (entry = id's
partition number, 8 bytes, zero meaning never written), so the next level
only needs ``ceil(n / alpha)`` blocks; the chain stops once a map fits the
resident-entry threshold and that map simply stays in client memory.

Only the partition number travels through the chain.  The exact location
inside a partition (level, index) changes on every reshuffle and therefore
stays in a client-side locator, updated for free as shuffles run; pushing
it through the chain would turn each shuffle into a cascade of map writes.

A lookup-and-update of one entry costs exactly one operation on the next
smaller ORAM: the access fetches the map block, edits the entry in place
and re-caches the block (a read-modify-write access).
"""

import math
import struct
from dataclasses import replace

from .client import READ
from .oram import Oram
from .posmap import MemoryEstimate
from .types import (POS_CACHED, POS_PENDING, POS_SERVER, POS_ZEROED, Position,
                    ZEROED, pack_position, unpack_position)

_ENTRY = struct.Struct("<Q")
_ASSIGNED = 1  # entry tag: low bits 01 -> assigned to partition (word >> 2)


class HybridPositionMap:
    """Partition numbers live in an inner ORAM; (level, index) live here."""

    ENTRY_BYTES = 8

    def __init__(self, n: int, partitions: int, inner: Oram, alpha: int):
        self.n = n
        self.partitions = partitions
        self.inner = inner
        self.alpha = alpha
        self.local = {}   # id -> packed word, for on-server / pending blocks

    # -- entry packing inside map blocks ---------------------------------------

    def _entry_offsets(self, block_id: int):
        return block_id // self.alpha, block_id % self.alpha

    def _decode(self, payload: bytes, offset: int) -> int:
        return _ENTRY.unpack_from(payload, 8 * offset)[0]

    def _encode(self, payload: bytes, offset: int, word: int) -> bytes:
        buf = bytearray(payload)
        _ENTRY.pack_into(buf, 8 * offset, word)
        return bytes(buf)

    # -- position-map interface --------------------------------------------------

    def reassign(self, block_id: int, rng):
        """One inner-ORAM access: read the old entry, stamp the new slot."""
        if not 0 <= block_id < self.n:
            raise ValueError(f"block id {block_id} outside [0, {self.n})")
        slot = rng.randrange(self.partitions)
        map_block, offset = self._entry_offsets(block_id)
        seen = {}

        def swap(old_payload: bytes) -> bytes:
            seen["word"] = self._decode(old_payload, offset)
            return self._encode(old_payload, offset,
                                _ASSIGNED | (slot << 2))

        self.inner.access(READ, map_block, mutate=swap)
        entry = seen["word"]

        local_word = self.local.pop(block_id, None)
        if local_word is not None:
            old = unpack_position(local_word)
        elif entry == 0:
            old = ZEROED
        else:
            old = Position(POS_CACHED, entry >> 2)
        return old, slot

    def initial_partition(self, block_id: int, rng) -> int:
        return rng.randrange(self.partitions)

    def set(self, block_id: int, pos: Position):
        if pos.kind in (POS_SERVER, POS_PENDING):
            self.local[block_id] = pack_position(pos)
        elif pos.kind == POS_ZEROED:
            self.local.pop(block_id, None)
        else:
            raise ValueError("cache assignments only happen through reassign")

    def unread_mask(self, ids, partition: int, level: int):
        import numpy as np
        base = pack_position(Position(POS_SERVER, partition, level, 0))
        out = np.zeros(len(ids), dtype=bool)
        local = self.local
        for i, block_id in enumerate(ids):
            out[i] = local.get(int(block_id)) == base + (i << 42)
        return out

    def unread_indices(self, ids, partition: int, level: int) -> list:
        base = pack_position(Position(POS_SERVER, partition, level, 0))
        local = self.local
        return [i for i, block_id in enumerate(ids)
                if local.get(int(block_id)) == base + (i << 42)]

    def set_server(self, block_id: int, partition: int, level: int, index: int):
        self.local[block_id] = pack_position(
            Position(POS_SERVER, partition, level, 0)) + (index << 42)

    def set_server_batch(self, ids, partition: int, level: int, indices):
        base = pack_position(Position(POS_SERVER, partition, level, 0))
        local = self.local
        for block_id, index in zip(ids, indices):
            local[int(block_id)] = base + (int(index) << 42)

    def memory_estimate(self) -> MemoryEstimate:
        # model: one packed entry per id in the chain, locator included
        return MemoryEstimate(self.n * self.ENTRY_BYTES,
                              len(self.local) * self.ENTRY_BYTES)


def chain_capacities(config) -> list:
    """Capacities of the ORAM chain: N, N/alpha, ... down to the threshold."""
    sizes = [config.n]
    while sizes[-1] > config.recursion_threshold:
        sizes.append(math.ceil(sizes[-1] / config.alpha))
        if len(sizes) > 64:
            raise ValueError("recursion does not converge; raise the threshold")
    return sizes


class RecursiveOram:
    """A chain of ORAM instances; level 0 carries the data."""

    def __init__(self, config, store_factory=None, record_trace: bool = False):
        if not config.recursive:
            raise ValueError("config does not enable recursion")
        alpha = config.alpha
        if alpha * 8 > config.block_size:
            raise ValueError("block size cannot hold alpha packed entries")
        sizes = chain_capacities(config)
        self.sizes = sizes
        self.alpha = alpha

        self.levels = [None] * len(sizes)
        inner = None
        for j in range(len(sizes) - 1, -1, -1):
            cfg = replace(
                config, n=sizes[j], partitions=0, recursive=False,
                payload_mode=(config.payload_mode if j == 0 else "full"))
            store = store_factory(j) if store_factory else None
            if inner is None:
                oram = Oram(cfg, store=store, label=b"chain%d" % j,
                            record_trace=record_trace and j == 0)
            else:
                posmap = HybridPositionMap(sizes[j], cfg.partitions, inner, alpha)
                oram = Oram(cfg, store=store, posmap=posmap,
                            label=b"chain%d" % j,
                            record_trace=record_trace and j == 0)
            self.levels[j] = oram
            inner = oram
        self.data = self.levels[0]
        self.config = config

    # -- data operations -----------------------------------------------------------

    def access(self, op: str, block_id: int, data=None, mutate=None):
        return self.data.access(op, block_id, data=data, mutate=mutate)

    def read(self, block_id: int):
        return self.data.read(block_id)

    def write(self, block_id: int, data):
        return self.data.write(block_id, data)

    # -- reporting --------------------------------------------------------------------

    @property
    def depth(self) -> int:
        """Number of recursive (map) levels below the data ORAM."""
        return len(self.levels) - 1

    def resident_map_entries(self) -> int:
        return self.sizes[-1]

    def stats_combined(self) -> dict:
        total = {"blocks_up": 0, "blocks_down": 0, "bytes_up": 0,
                 "bytes_down": 0, "meta_bytes": 0, "peak_server_blocks": 0}
        for oram in self.levels:
            st = oram.stats()
            total["blocks_up"] += st.blocks_up
            total["blocks_down"] += st.blocks_down
            total["bytes_up"] += st.bytes_up
            total["bytes_down"] += st.bytes_down
            total["meta_bytes"] += st.meta_bytes
            total["peak_server_blocks"] += st.peak_server_blocks
        return total

    def storage_report(self) -> dict:
        """Per-level client/server storage; the shuffle buffer is shared."""
        per_level = []
        for j, oram in enumerate(self.levels):
            st = oram.stats()
            per_level.append({
                "capacity": self.sizes[j],
                "partitions": oram.config.partitions,
                "cache_high_water": oram.client.cache.high_water,
                "peak_partition_load": oram.engine.peak_real_load,
                "peak_server_blocks": st.peak_server_blocks,
            })
        return {
            "levels": per_level,
            "depth": self.depth,
            "alpha": self.alpha,
            "resident_map_entries": self.resident_map_entries(),
            "cache_high_water_total": sum(l["cache_high_water"] for l in per_level),
            "shared_shuffle_buffer_blocks": max(
                2 * oram.config.capacity for oram in self.levels),
            "server_blocks_total_peak": sum(
                l["peak_server_blocks"] for l in per_level),
        }

    def report(self) -> dict:
        out = self.data.report()
        out.update(self.stats_combined())
        out["recursion_depth"] = self.depth
        return out
