"""Bounded-work scheduling of reshuffles (the concurrent mode).

Writes do not shuffle immediately: each one becomes (or merges into) a job
``(partition, lam, beta)`` on a FIFO queue, where lam is the highest level
the shuffle must cover (trailing-zeros of the partition's write counter)
and beta holds the blocks waiting to be written.  Every time step performs
at most ``w * log2(S)`` block moves of queued shuffle work, pausing a job
mid-flight when the budget runs out.

Reads complete immediately in one fetch batch.  A level currently being
consumed by a shuffle cannot serve dummies (its dummies may already be
spoken for), so the read takes a uniformly random block from the shuffle's
not-yet-fetched unread set instead, or skips the level when that set is
empty; the fetched block is remembered so the shuffle does not fetch the
same offset again.  Blocks sitting in pending writes or in a half-built
level are served from client memory while the per-level fetch pattern
stays unchanged.
"""

from collections import deque

from .crypto import IntegrityViolation
from .partition import ShuffleRun
from .types import DUMMY_ID, POS_PENDING, POS_SERVER, pending_position


class Job:
    __slots__ = ("partition", "lam", "beta", "enqueued_step", "run", "cancelled")

    def __init__(self, partition: int, lam: int, enqueued_step: int):
        self.partition = partition
        self.lam = lam
        self.beta = {}
        self.enqueued_step = enqueued_step
        self.run = None
        self.cancelled = False

    @property
    def size(self) -> int:
        return 1 << self.lam


class _ReadCache(dict):
    """(level, index) -> (id, payload) with a shared live-entry counter."""

    def __init__(self, counter):
        super().__init__()
        self._counter = counter

    def insert(self, key, value):
        self[key] = value
        self._counter[0] += 1
        if self._counter[0] > self._counter[1]:
            self._counter[1] = self._counter[0]

    def pop(self, key, *default):
        had = key in self
        out = super().pop(key, *default)
        if had:
            self._counter[0] -= 1
        return out


class Amortizer:
    """Engine adapter that spreads shuffle work across time steps."""

    def __init__(self, config, partitions, store, posmap, rng):
        self.config = config
        self.partitions = partitions
        self.store = store
        self.posmap = posmap
        self.rng = rng
        self.budget = config.step_budget
        self.queue = deque()
        self.waiting = {}            # partition -> not-yet-started job
        self._cache_counter = [0, 0]  # live entries, high water
        self.read_caches = {}        # partition -> _ReadCache
        self.step_no = 0
        self.max_step_work = 0
        self.max_job_latency = 0
        self.late_jobs = 0
        self.pending_blocks = 0
        self.pending_high_water = 0

    @property
    def read_cache_high_water(self) -> int:
        return self._cache_counter[1]

    # -- engine interface ---------------------------------------------------------

    def write(self, partition: int, block_id: int, payload):
        eng = self.partitions
        lam = eng.lambda_for_next_write(partition)
        eng.writes[partition] = (eng.writes[partition] + 1) % self.config.write_cycle
        eng.total_writes += 1
        job = self._enqueue(partition, lam)
        if block_id != DUMMY_ID:
            job.beta[block_id] = payload
            self.posmap.set(block_id, pending_position(partition))
            self.pending_blocks += 1
            if self.pending_blocks > self.pending_high_water:
                self.pending_high_water = self.pending_blocks
        self._end_step()

    def read(self, partition: int, block_id: int, pos):
        payload = self._cp_read(partition, block_id, pos)
        self._end_step()
        return payload

    def flush(self):
        """Run every queued job to completion (used at shutdown/inspection)."""
        while self.queue:
            self._drain()

    # -- job queue -----------------------------------------------------------------

    def _enqueue(self, partition: int, lam: int) -> Job:
        old = self.waiting.get(partition)
        if old is not None:
            merged = Job(partition, max(old.lam, lam),
                         min(old.enqueued_step, self.step_no))
            merged.beta = old.beta
            old.cancelled = True
            self.waiting[partition] = merged
            self.queue.append(merged)
        else:
            merged = Job(partition, lam, self.step_no)
            self.waiting[partition] = merged
            self.queue.append(merged)
        self._check_queue_invariants(partition)
        return merged

    def _check_queue_invariants(self, partition: int):
        sizes = [j.size for j in self.queue
                 if j.partition == partition and not j.cancelled and j.run is None]
        assert len(sizes) <= 1, "a partition may hold only one queued job"
        active = self._active_job(partition)
        if active is not None:
            sizes.append(active.size)
        if sizes:
            assert sum(sizes) <= 2 * max(sizes), \
                "queued work exceeds twice the largest job"

    def _active_job(self, partition: int):
        if self.queue:
            head = self.queue[0]
            if head.run is not None and head.partition == partition:
                return head
        return None

    def _start_job(self, job: Job):
        eng = self.partitions
        p = job.partition
        self.waiting.pop(p, None)
        target = eng.target_at_or_above(p, job.lam)
        incoming = list(job.beta.items())
        self.pending_blocks -= len(incoming)
        cache = self.read_caches.setdefault(p, _ReadCache(self._cache_counter))
        beta = job.beta
        job.run = ShuffleRun(eng, p, target, incoming,
                             pending_alive=lambda bid: bid in beta,
                             read_cache=cache, relaxed_capacity=True)
        # the unread-real choice set of every source level is fixed now;
        # blocks already pulled by earlier reads sit in the read cache and
        # are not drawable again
        for l in job.run.source_levels:
            lev = eng.levels[p][l]
            if lev.virtual or lev.bits is None:
                job.run.sprime[l] = set()
            else:
                job.run.sprime[l] = {int(i) for i in (~lev.bits).nonzero()[0]
                                     if (l, int(i)) not in cache}

    def _drain(self) -> int:
        work = 0
        while work < self.budget and self.queue:
            job = self.queue[0]
            if job.cancelled:
                self.queue.popleft()
                continue
            if job.run is None:
                self._start_job(job)
            work += job.run.advance(self.budget - work)
            if job.run.done:
                self.queue.popleft()
                cache = self.read_caches.get(job.partition)
                if cache:
                    # entries for this job's levels must have been swept in;
                    # strays can only belong to a still-pending forced job
                    assert all(key[0] not in job.run._source_set for key in cache), \
                        "read cache must drain with its job"
                latency = self.step_no - job.enqueued_step
                if latency > self.max_job_latency:
                    self.max_job_latency = latency
                if latency > self.config.job_deadline:
                    self.late_jobs += 1
        assert work <= self.budget, "step exceeded its shuffle-work budget"
        return work

    def _end_step(self):
        work = self._drain()
        if work > self.max_step_work:
            self.max_step_work = work
        self.store.note_step()
        self.step_no += 1

    # -- concurrent read -------------------------------------------------------------

    def _cp_read(self, p: int, block_id: int, pos):
        eng = self.partitions
        active = self._active_job(p)
        run = active.run if active else None
        waiting = self.waiting.get(p)
        cache = self.read_caches.get(p)

        payload = None
        found_in_memory = False
        target_level = -1
        target_index = -1
        if block_id != DUMMY_ID:
            if pos is None:
                raise ValueError("real reads need the previous position")
            if pos.kind == POS_PENDING:
                if waiting is not None and block_id in waiting.beta:
                    payload = waiting.beta.pop(block_id)
                elif active is not None and block_id in active.beta:
                    payload = active.beta.pop(block_id)
                else:
                    raise IntegrityViolation(
                        f"pending block {block_id} not found in any write queue")
                self.pending_blocks -= 1
                found_in_memory = True
            elif pos.kind == POS_SERVER:
                level, index = pos.level, pos.index
                if run is not None and run.buffer_index is not None \
                        and block_id in run.buffer_index:
                    payload = run.consume_from_buffer(block_id)
                    found_in_memory = True
                elif run is not None and block_id in run.collected:
                    payload = run.consume_collected(block_id)
                    found_in_memory = True
                elif cache and (level, index) in cache:
                    got, payload = cache.pop((level, index))
                    if got != block_id:
                        raise IntegrityViolation("read cache holds a foreign block")
                    eng.note_real_removed(p, level, index)
                    found_in_memory = True
                else:
                    target_level, target_index = level, index
                    if run is not None:
                        # keep the shuffle from fetching this offset again
                        sp = run.sprime.get(level)
                        if sp is not None:
                            sp.discard(index)
                        run.steal_planned(level, index)
            else:
                raise ValueError(f"unexpected position kind {pos.kind}")

        requests = []
        actions = []  # (kind, level_state, offset, extra)
        for l in range(self.config.levels):
            lev = eng.levels[p][l]
            if not lev.filled:
                continue
            if l == target_level:
                offset = lev.crypto.offset(target_index)
                requests.append((eng._ref(p, l), offset))
                actions.append(("real", lev, offset, block_id))
                continue
            sprime = run.sprime.get(l) if run is not None else None
            if sprime is not None:
                if not sprime:
                    continue  # nothing fetchable: the client holds this level
                ordered = sorted(sprime)
                index = ordered[self.rng.randrange(len(ordered))]
                sprime.discard(index)
                run.steal_planned(l, index)
                offset = lev.crypto.offset(index)
                requests.append((eng._ref(p, l), offset))
                actions.append(("cache", lev, offset, index))
                continue
            if lev.cnt >= lev.size:
                self._note_exhausted(p, l)
                picked = self._draw_unread_real(p, l, lev)
                if picked is None:
                    continue  # fully consumed level: the skip is public knowledge
                offset = lev.crypto.offset(picked)
                requests.append((eng._ref(p, l), offset))
                actions.append(("cache", lev, offset, picked))
                continue
            offset = lev.crypto.offset(lev.cnt)
            lev.cnt += 1
            requests.append((eng._ref(p, l), offset))
            actions.append(("dummy", lev, offset, None))

        blobs = eng.store.fetch_blocks(requests) if requests else []

        for blob, (kind, lev, offset, extra) in zip(blobs, actions):
            if kind == "real":
                payload = eng._open_block(lev, offset, blob, expect_real=True,
                                          want_id=block_id)
                eng.note_real_removed(p, lev.index, target_index)
            elif kind == "dummy":
                eng._open_block(lev, offset, blob, expect_real=False,
                                want_id=DUMMY_ID)
            else:
                got, got_payload = self._open_drawn(lev, offset, blob)
                book = self.read_caches.setdefault(p, _ReadCache(self._cache_counter))
                book.insert((lev.index, extra), (got, got_payload))

        if block_id != DUMMY_ID and payload is None:
            raise IntegrityViolation(f"block {block_id} was not recovered")
        return payload

    def _open_drawn(self, lev, offset, blob):
        """Open a block drawn from a shuffling level (real, id unknown)."""
        if self.partitions.sim:
            got = lev.crypto.cipher.open_token(offset, int(blob))
            if got == DUMMY_ID:
                raise IntegrityViolation("drawn block was not a real block")
            return got, b""
        got, payload = lev.crypto.cipher.open(offset, blob)
        if got == DUMMY_ID:
            raise IntegrityViolation("drawn block was not a real block")
        return got, payload

    def _draw_unread_real(self, p, l, lev):
        if lev.bits is None or len(lev.bits) == 0:
            return None
        cache = self.read_caches.get(p)
        free = [int(i) for i in (~lev.bits).nonzero()[0]
                if not cache or (l, int(i)) not in cache]
        if not free:
            return None
        return free[self.rng.randrange(len(free))]

    def _note_exhausted(self, p: int, l: int):
        """A level ran out of dummies mid-read: queue a shuffle covering it."""
        eng = self.partitions
        if self.waiting.get(p) is None or self.waiting[p].lam < l:
            self._enqueue(p, min(l, eng.top))
        eng.forced_shuffles += 1
