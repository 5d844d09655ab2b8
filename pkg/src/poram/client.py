"""The client side of the partitioning framework.

``access`` is the one public data operation: look up (and immediately
re-assign) the block's partition, read exactly one block from every filled
level of that partition (a dummy everywhere the block is not), place the
block into a freshly drawn cache slot, then run the eviction machinery.
The server sees one partition read plus a data-independent stream of
partition writes per access, whatever the request sequence looks like.

Evictions write back to the partition matching the chosen slot; an empty
slot evicts a dummy block so slot occupancy stays hidden.  Background
eviction is either a sequential scan whose per-access count follows a
bounded geometric distribution with mean nu, or nu uniformly random slots.
"""

import math

from .types import DUMMY_ID, POS_CACHED, POS_PENDING, POS_SERVER, POS_ZEROED

READ = "read"
WRITE = "write"


class CacheSlots:
    """P cache slots, each an insertion-ordered id -> payload mapping."""

    def __init__(self, partitions: int):
        self.slots = [dict() for _ in range(partitions)]
        self.total = 0
        self.high_water = 0

    def add(self, slot: int, block_id: int, payload):
        self.slots[slot][block_id] = payload
        self.total += 1
        if self.total > self.high_water:
            self.high_water = self.total

    def contains(self, slot: int, block_id: int) -> bool:
        return block_id in self.slots[slot]

    def remove(self, slot: int, block_id: int):
        payload = self.slots[slot].pop(block_id)
        self.total -= 1
        return payload

    def pop_oldest(self, slot: int):
        """FIFO pop; None when the slot is empty."""
        bucket = self.slots[slot]
        if not bucket:
            return None
        block_id = next(iter(bucket))
        self.total -= 1
        return block_id, bucket.pop(block_id)


class BoundedGeometric:
    """num-of-evictions distribution: support 0..c, Pr[k] proportional to
    q^k, with q fitted so the mean equals nu."""

    def __init__(self, nu: float, cap: int | None = None):
        if nu < 0:
            raise ValueError("nu must be >= 0")
        self.nu = nu
        self.cap = cap if cap is not None else max(1, math.ceil(4 * nu))
        if nu == 0:
            self.cumulative = [1.0]
            self.ratio = 0.0
            return
        if nu >= self.cap:
            raise ValueError("mean must be below the support cap")
        lo, hi = 1e-18, 1.0
        while self._mean(hi) < nu:
            hi *= 2
            if hi > 1e12:
                raise ValueError("cannot fit the requested mean")
        for _ in range(200):
            mid = (lo + hi) / 2
            if self._mean(mid) < nu:
                lo = mid
            else:
                hi = mid
        self.ratio = (lo + hi) / 2
        weights = [self.ratio ** k for k in range(self.cap + 1)]
        total = sum(weights)
        acc, cumulative = 0.0, []
        for w in weights:
            acc += w / total
            cumulative.append(acc)
        cumulative[-1] = 1.0
        self.cumulative = cumulative

    def _mean(self, q: float) -> float:
        weights = [q ** k for k in range(self.cap + 1)]
        return sum(k * w for k, w in enumerate(weights)) / sum(weights)

    def mean(self) -> float:
        return sum(k * (self.cumulative[k] - (self.cumulative[k - 1] if k else 0.0))
                   for k in range(len(self.cumulative)))

    def sample(self, rng) -> int:
        u = rng.random()
        for k, edge in enumerate(self.cumulative):
            if u <= edge:
                return k
        return len(self.cumulative) - 1


class OramClient:
    """Framework client: cache slots, access, and eviction scheduling."""

    def __init__(self, config, engine, posmap, rng, record_trace: bool = False):
        self.config = config
        self.engine = engine
        self.posmap = posmap
        self.rng = rng
        self.cache = CacheSlots(config.partitions)
        self.ecnt = 0
        self.sequential = config.evict_algo == "seq"
        self.sampler = BoundedGeometric(config.nu) if self.sequential else None
        self.rand_count = int(config.nu)
        self.trace = [] if record_trace else None
        self.zero_payload = (b"" if config.payload_mode == "meta"
                             else bytes(config.block_size))
        self.accesses = 0

    # -- the data operation ------------------------------------------------------

    def access(self, op: str, block_id: int, data=None, mutate=None):
        """Read or write one block; returns the block's previous contents."""
        if not 0 <= block_id < self.config.n:
            raise ValueError(f"block id {block_id} outside [0, {self.config.n})")
        pos, slot = self.posmap.reassign(block_id, self.rng)

        if pos.kind == POS_ZEROED:
            partition = self.posmap.initial_partition(block_id, self.rng)
            self.engine.read(partition, DUMMY_ID, None)
            old = self.zero_payload
        elif pos.kind == POS_CACHED:
            partition = pos.partition
            old = self.cache.remove(partition, block_id)
            self.engine.read(partition, DUMMY_ID, None)
        else:
            partition = pos.partition
            old = self.engine.read(partition, block_id, pos)

        if self.trace is not None:
            self.trace.append(partition)

        if op == WRITE:
            value = data
        elif mutate is not None:
            value = mutate(old)
        else:
            value = old
        self.cache.add(slot, block_id, value)

        if self.config.piggyback:
            self.evict(partition)
        if self.sequential:
            self.seq_evict()
        else:
            self.rand_evict()
        cap = self.config.max_cache_blocks
        if cap:
            while self.cache.total > cap:
                self.ecnt = (self.ecnt + 1) % self.config.partitions
                self.evict(self.ecnt)
        self.accesses += 1
        return old

    def read(self, block_id: int):
        return self.access(READ, block_id)

    def write(self, block_id: int, data):
        return self.access(WRITE, block_id, data)

    # -- eviction -----------------------------------------------------------------

    def evict(self, partition: int):
        """Write one block (real if the slot has one, else a dummy) back to
        the partition matching the slot."""
        popped = self.cache.pop_oldest(partition)
        if popped is None:
            self.engine.write(partition, DUMMY_ID, None)
        else:
            block_id, payload = popped
            self.engine.write(partition, block_id, payload)

    def seq_evict(self):
        num = self.sampler.sample(self.rng)
        for _ in range(num):
            self.ecnt = (self.ecnt + 1) % self.config.partitions
            self.evict(self.ecnt)

    def rand_evict(self):
        for _ in range(self.rand_count):
            self.evict(self.rng.randrange(self.config.partitions))


class DirectEngine:
    """Synchronous engine adapter: every read or write is one time step."""

    def __init__(self, partition_engine, store):
        self.partitions = partition_engine
        self.store = store

    def read(self, partition: int, block_id: int, pos):
        hint = None
        if block_id != DUMMY_ID:
            if pos is None or pos.kind != POS_SERVER:
                raise ValueError("real reads need a server position")
            hint = (pos.level, pos.index)
        out = self.partitions.read(partition, block_id, hint)
        self.store.note_step()
        return out

    def write(self, partition: int, block_id: int, payload):
        self.partitions.write(partition, block_id, payload)
        self.store.note_step()
