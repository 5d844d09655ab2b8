"""The partition engine: level hierarchies, reads, and reshuffling writes.

Each of the P partitions holds L levels; level l has 2*2^l slots (the top
level 2*capacity) of which at most half are real when built by the
non-concurrent path.  A read fetches exactly one block from every filled
level in a single batch: the real block at its permuted offset from the
level that holds it, the next unread dummy everywhere else.  A write is a
reshuffle: unread blocks from the source levels are pulled into a client
buffer, merged with the incoming block, re-permuted under a fresh key and
written one level up.

Every write advances a per-partition counter; after exactly every 2^l
writes, levels 0..l-1 merge into level l, so the set of filled levels
encodes the counter in binary.  When a level runs out of unread dummies
(possible only when reads are not paired with writes), the engine forces
an early reshuffle covering that level; the trigger depends only on
counters the server already knows, so nothing leaks.

The shuffle itself is a resumable state machine (:class:`ShuffleRun`) so
the concurrent scheduler can execute it in bounded work slices; the
non-concurrent path simply runs it to completion.  Work is counted in
blocks crossing the client-server boundary: one unit per block fetched,
one per block sealed for upload.
"""

import numpy as np

from . import _kernels, vancodec
from .blockstore import (LevelRef, LevelUpload, UPLOAD_FIELD, UPLOAD_RAW,
                         UPLOAD_SIM_HALF)
from .crypto import IntegrityViolation, LevelCrypto, derive_key
from .types import DUMMY_ID, POS_SERVER, Position

# below this many blocks a shuffle stays on scalar code paths; above, numpy
_VECTOR_THRESHOLD = 64


class CapacityViolation(AssertionError):
    """More real blocks than a level can hold (unreachable under the
    partition-capacity bound; a failure here is a logic error)."""


class _Level:
    __slots__ = ("index", "size", "want", "filled", "virtual", "epoch",
                 "crypto", "cnt", "k", "bits", "compressed")

    def __init__(self, index: int, size: int):
        self.index = index
        self.size = size
        self.want = size // 2
        self.filled = False
        self.virtual = False
        self.epoch = 0
        self.crypto = None
        self.cnt = 0
        self.k = 0
        self.bits = None          # concurrent mode: per-real-slot consumed flags
        self.compressed = False   # built via compressed upload (dummies unverifiable)


class PartitionEngine:
    """State and operations for all partitions of one ORAM instance."""

    def __init__(self, config, store, posindex, master_key: bytes,
                 nonce_source=None, track_bits: bool = False):
        self.config = config
        self.store = store
        self.posindex = posindex
        self.master = master_key
        self.sim = config.payload_mode == "meta"
        self.nonce_source = nonce_source
        self.track_bits = track_bits
        p_count, l_count = config.partitions, config.levels
        self.top = l_count - 1
        self.levels = [[_Level(l, config.level_size(l)) for l in range(l_count)]
                       for _ in range(p_count)]
        self.writes = [0] * p_count          # write counter per partition
        self.real_load = [0] * p_count       # unread real blocks resident in p
        self.peak_real_load = 0
        self.forced_shuffles = 0
        self.reads_served = 0
        self.total_writes = 0

    # -- setup -----------------------------------------------------------------

    def setup(self, rng):
        """Choose random initial fill patterns (top level always filled)."""
        masks = [rng.getrandbits(self.top) if self.top else 0
                 for _ in range(self.config.partitions)]
        return self.setup_explicit(masks)

    def setup_explicit(self, fill_masks):
        """Apply caller-chosen fill patterns (the top bit is forced on);
        returns the per-partition masks to hand to the block store."""
        fills = []
        for p, mask in enumerate(fill_masks):
            mask |= 1 << self.top
            self.writes[p] = mask & ~(1 << self.top)
            fills.append(mask)
            for l in range(self.config.levels):
                if mask & (1 << l):
                    self._init_virtual(p, l)
        return fills

    def _init_virtual(self, p: int, l: int):
        lev = self.levels[p][l]
        lev.filled = True
        lev.virtual = True
        lev.epoch = 0
        lev.cnt = 0
        lev.k = 0
        lev.crypto = self._level_crypto(p, l, 0)
        if self.track_bits:
            lev.bits = np.zeros(0, dtype=bool)

    def _level_crypto(self, p: int, l: int, epoch: int) -> LevelCrypto:
        context = b"level%d" % p + b"/%d/%d" % (l, epoch)
        return LevelCrypto.from_context(
            self.master, context, self.levels[p][l].size,
            self.config.block_size, self.sim, self.nonce_source)

    # -- introspection ----------------------------------------------------------

    def fill_pattern(self, p: int) -> int:
        """Bitmask of filled non-top levels (the binary counter)."""
        mask = 0
        for l in range(self.top):
            if self.levels[p][l].filled:
                mask |= 1 << l
        return mask

    def filled_levels(self, p: int):
        return [l for l in range(self.config.levels) if self.levels[p][l].filled]

    def _ref(self, p: int, l: int) -> LevelRef:
        return LevelRef(p, l, self.levels[p][l].epoch)

    def server_real_blocks(self) -> int:
        return sum(self.real_load)

    # -- write-target selection ---------------------------------------------------

    def lambda_for_next_write(self, p: int) -> int:
        """The highest level the next write must cover (trailing-zeros rule)."""
        nxt = (self.writes[p] % self.config.write_cycle) + 1
        lam = (nxt & -nxt).bit_length() - 1
        return min(lam, self.top)

    def target_at_or_above(self, p: int, lam: int) -> int:
        for l in range(lam, self.top):
            if not self.levels[p][l].filled:
                return l
        return self.top

    def _target_above(self, p: int, cover: int) -> int:
        for l in range(cover + 1, self.top):
            if not self.levels[p][l].filled:
                return l
        return self.top

    # -- reads -----------------------------------------------------------------

    def read(self, p: int, block_id: int, pos_hint=None):
        """Fetch one block from every filled level of partition p in one
        batch; returns the payload for a real hit, None for a dummy read.

        ``pos_hint`` is the (level, index) the position map reported before
        being re-assigned; required when block_id is real.
        """
        extracted = None
        level_count = self.config.levels
        prow = self.levels[p]
        while True:
            want = block_id if extracted is None else DUMMY_ID
            target_level = -1
            target_index = -1
            if want != DUMMY_ID:
                if pos_hint is None:
                    raise ValueError("real reads need the position hint")
                target_level, target_index = pos_hint
                if not prow[target_level].filled:
                    raise IntegrityViolation(
                        f"position map points into unfilled level {target_level} "
                        f"of partition {p}")
            level_ids = []
            epochs = []
            offsets = []
            opens = []
            exhausted = -1
            for l in range(level_count):
                lev = prow[l]
                if not lev.filled:
                    continue
                if l == target_level:
                    index = target_index
                    is_real = True
                else:
                    index = lev.cnt
                    if index >= lev.size:
                        exhausted = l
                        break
                    is_real = False
                offset = int(lev.crypto.table()[index])
                level_ids.append(l)
                epochs.append(lev.epoch)
                offsets.append(offset)
                opens.append((lev, offset, is_real))
            if exhausted >= 0:
                pulled = self.force_reshuffle(
                    p, exhausted,
                    protect_hint=(block_id, pos_hint) if want != DUMMY_ID else None)
                if pulled is not None:
                    # the forced shuffle swallowed the level holding the
                    # requested block; it travelled along and is now local
                    extracted = pulled
                continue
            for lev, _, is_real in opens:
                if not is_real:
                    lev.cnt += 1
            if want != DUMMY_ID:
                self.note_real_removed(p, target_level, target_index)
            break

        blobs = self.store.fetch_read(p, level_ids, epochs, offsets)
        payload = extracted
        for blob, (lev, offset, is_real) in zip(blobs, opens):
            got = self._open_block(lev, offset, blob, expect_real=is_real,
                                   want_id=block_id if is_real else DUMMY_ID)
            if is_real:
                payload = got
        self.reads_served += 1
        return payload

    def note_real_removed(self, p: int, level: int, index: int):
        """A real block left this partition (it was read)."""
        self.real_load[p] -= 1
        lev = self.levels[p][level]
        if lev.bits is not None:
            lev.bits[index] = True

    def _open_block(self, lev: _Level, offset: int, blob, expect_real: bool,
                    want_id: int):
        """Decrypt and verify one fetched block; returns the payload."""
        if lev.virtual:
            if expect_real:
                raise IntegrityViolation("real block located in a zeroed level")
            return None
        if self.sim:
            if expect_real or not lev.compressed:
                got = lev.crypto.cipher.open_token(offset, int(blob))
                if got != want_id:
                    raise IntegrityViolation(
                        f"fetched block carries id {got}, expected {want_id}")
            return b"" if expect_real else None
        if expect_real or not lev.compressed:
            got, payload = lev.crypto.cipher.open(offset, blob)
            if got != want_id:
                raise IntegrityViolation(
                    f"fetched block carries id {got}, expected {want_id}")
            return payload if expect_real else None
        return None  # dummy from a compressed level: content is unverifiable

    # -- writes ------------------------------------------------------------------

    def write(self, p: int, block_id: int, payload):
        """Non-concurrent write: reshuffle into the counter's target level."""
        incoming = [] if block_id == DUMMY_ID else [(block_id, payload)]
        target = self.target_at_or_above(p, self.lambda_for_next_write(p))
        ShuffleRun(self, p, target, incoming).run_to_completion()
        self.writes[p] = (self.writes[p] + 1) % self.config.write_cycle
        self.total_writes += 1

    def force_reshuffle(self, p: int, cover: int, protect_hint=None):
        """Early reshuffle burying an exhausted level; advances the write
        counter to the next multiple of the target level's period.

        ``protect_hint`` carries an in-flight read's (block id, (level,
        index)): if the merge consumes that level, the block is pulled out
        and returned so the read can complete from client memory.
        """
        target = self._target_above(p, cover)
        protect = {}
        extract_id = None
        if protect_hint is not None:
            block_id, (level, index) = protect_hint
            if level < target or (target == self.top and level == self.top):
                protect = {level: index}
                extract_id = block_id
        run = ShuffleRun(self, p, target, [], protect=protect,
                         extract_id=extract_id)
        run.run_to_completion()
        self.forced_shuffles += 1
        if target == self.top:
            self.writes[p] = 0
        else:
            cycle = self.config.write_cycle
            self.writes[p] = (((self.writes[p] >> target) + 1) << target) % cycle
        return run.extracted

    def note_incoming_real(self, p: int, count: int):
        self.real_load[p] += count
        if self.real_load[p] > self.peak_real_load:
            self.peak_real_load = self.real_load[p]


class ShuffleRun:
    """Resumable reshuffle of the filled levels below ``target`` (plus the
    top level itself when target is the top) into ``target``."""

    FETCH, BUILD, UPLOAD, DONE = range(4)

    def __init__(self, engine: PartitionEngine, p: int, target: int, incoming,
                 pending_alive=None, read_cache=None, relaxed_capacity=False,
                 protect=None, extract_id=None):
        self.engine = engine
        self.p = p
        self.target = target
        self.incoming = list(incoming)
        self.pending_alive = pending_alive      # concurrent: id -> still pending?
        self.read_cache = read_cache            # concurrent: (level, index) -> (id, payload)
        self.relaxed_capacity = relaxed_capacity
        self.protect = protect or {}            # level -> index to fetch regardless
        self.extract_id = extract_id            # id pulled out for an in-flight read
        self.extracted = None
        self.stage = self.FETCH
        self.collected = {}                     # id -> payload, pulled from sources
        self.source_levels = [l for l in range(target)
                              if engine.levels[p][l].filled]
        if target == engine.top:
            self.source_levels.append(engine.top)
        self._source_set = set(self.source_levels)
        self._level_pos = 0
        self._plan = None           # (offsets list, offset -> pre-perm index)
        self.sprime = {}            # level -> set of fetchable unread real indices
        self.buffer_ids = None
        self.buffer_payloads = None
        self.buffer_index = {}      # id -> buffer position, while uploading
        self.new_level_bits = None
        self._sealed = None
        self._upload_pos = 0

    # -- source-level planning ------------------------------------------------

    def _plan_level(self, l: int):
        """Choose the offsets to fetch from source level l: every unread real
        block plus unread dummies, up to half the level size."""
        engine, p = self.engine, self.p
        lev = engine.levels[p][l]
        if lev.virtual:
            real_idx = []
        elif lev.bits is not None:
            real_idx = np.nonzero(~lev.bits)[0].tolist()
        else:
            meta = engine.store.fetch_meta(engine._ref(p, l))
            ids = lev.crypto.cipher.open_meta(meta)
            if len(ids) != lev.size:
                raise IntegrityViolation("level id list does not match its geometry")
            reals = ids[:lev.k].tolist() if lev.k <= 48 else ids[:lev.k]
            if lev.k <= 48:
                if any(b < 0 for b in reals):
                    raise IntegrityViolation("level id list holds a dummy in the real prefix")
            elif (ids[:lev.k] < 0).any():
                raise IntegrityViolation("level id list holds a dummy in the real prefix")
            real_idx = engine.posindex.unread_indices(reals, p, l)
        if l in self.protect and self.protect[l] not in real_idx:
            # a block mid-read looks stale (its map entry was already
            # re-assigned) but its bytes still live here: carry it along
            real_idx.append(self.protect[l])
            real_idx.sort()

        first_dummy = max(lev.cnt, lev.k)
        dummies_avail = lev.size - first_dummy
        need_dummies = min(max(0, lev.want - len(real_idx)), dummies_avail)
        indices = real_idx + list(range(first_dummy, first_dummy + need_dummies))
        lev.cnt = first_dummy + need_dummies

        to_fetch = []
        for idx in indices:
            if self.read_cache is not None and (l, idx) in self.read_cache:
                block_id, payload = self.read_cache.pop((l, idx))
                self.collected[block_id] = payload
            else:
                to_fetch.append(idx)
        # concurrent runs pre-populate the per-level unread-real sets at job
        # start; without interleaved reads there is nothing to track
        self.sprime.setdefault(l, set())

        table = lev.crypto.table()
        if len(to_fetch) > _VECTOR_THRESHOLD:
            offsets = table[np.asarray(to_fetch, dtype=np.int64)].tolist()
        else:
            offsets = [int(table[i]) for i in to_fetch]
        pre_by_offset = dict(zip(offsets, to_fetch))
        offsets.sort()
        return offsets, pre_by_offset

    def steal_planned(self, l: int, index: int) -> bool:
        """A concurrent read wants to fetch (level, pre-perm index) itself;
        drop it from this run's pending fetch plan if it is there."""
        if self._plan is None or self._level_pos >= len(self.source_levels) \
                or self.source_levels[self._level_pos] != l:
            return False
        offsets, pre_by_offset = self._plan
        lev = self.engine.levels[self.p][l]
        offset = lev.crypto.offset(index)
        if offset in pre_by_offset:
            offsets.remove(offset)
            del pre_by_offset[offset]
            return True
        return False

    def _fetch_chunk(self, l: int, budget: int) -> int:
        engine, p = self.engine, self.p
        lev = engine.levels[p][l]
        if self._plan is None:
            self._plan = self._plan_level(l)
        offsets, pre_by_offset = self._plan
        if not offsets:
            self._finish_source_level(l)
            return 0
        take = offsets[:budget] if budget < len(offsets) else list(offsets)
        blobs = engine.store.fetch_level(engine._ref(p, l), take)
        if not lev.virtual:
            self._ingest(lev, take, pre_by_offset, blobs)
        sprime = self.sprime.get(l)
        if sprime:
            for off in take:
                sprime.discard(pre_by_offset[off])
        remaining = offsets[len(take):]
        if remaining:
            self._plan = (remaining, pre_by_offset)
        else:
            self._finish_source_level(l)
        return len(take)

    def _ingest(self, lev: _Level, offsets, pre_by_offset, blobs):
        """Decrypt fetched blocks, keeping the real ones."""
        engine = self.engine
        if engine.sim:
            offs = np.asarray(offsets, dtype=np.uint64)
            toks = np.asarray(blobs, dtype=np.uint64)
            ids_out = np.empty(len(offs), dtype=np.int64)
            bad = _kernels.open_tokens(offs, toks, lev.crypto.cipher._np_salt,
                                       ids_out)
            if bad >= 0:
                raise IntegrityViolation("fetched block failed its integrity check")
            collected = self.collected
            for block_id in ids_out.tolist():
                if block_id >= 0:
                    collected[block_id] = b""
            return
        for off, blob in zip(offsets, blobs):
            if lev.compressed and pre_by_offset[off] >= lev.k:
                continue  # dummy from a compressed level: skip unverifiable open
            block_id, payload = lev.crypto.cipher.open(off, blob)
            if block_id != DUMMY_ID:
                self.collected[block_id] = payload

    def _finish_source_level(self, l: int):
        engine, p = self.engine, self.p
        lev = engine.levels[p][l]
        self.sprime.pop(l, None)
        self._plan = None
        self._level_pos += 1
        if l != engine.top:
            engine.store.mark_unfilled(engine._ref(p, l))
            lev.filled = False
            lev.virtual = False
            lev.bits = None

    # -- concurrent-read hooks ----------------------------------------------------

    def consume_collected(self, block_id: int):
        """A read takes a block that was fetched for this shuffle."""
        payload = self.collected.pop(block_id)
        self.engine.real_load[self.p] -= 1
        return payload

    def consume_from_buffer(self, block_id: int):
        """A read takes a block out of the level under construction; the
        uploaded copy (if any) stays behind as a stale block."""
        i = self.buffer_index.pop(block_id)
        if self.new_level_bits is not None:
            self.new_level_bits[i] = True
        self.engine.real_load[self.p] -= 1
        return self.buffer_payloads[i]

    def holds(self, block_id: int) -> bool:
        if block_id in self.collected:
            return True
        return self.buffer_index is not None and block_id in self.buffer_index

    # -- build ---------------------------------------------------------------------

    def _build(self):
        engine, p = self.engine, self.p
        lev = engine.levels[p][self.target]

        if self.read_cache is not None:
            for key in [k for k in self.read_cache if k[0] in self._source_set]:
                block_id, payload = self.read_cache.pop(key)
                self.collected[block_id] = payload
        if self.extract_id is not None and self.extract_id in self.collected:
            self.extracted = self.collected.pop(self.extract_id)
            engine.real_load[p] -= 1

        entries = list(self.collected.items())
        fresh = 0
        for block_id, payload in self.incoming:
            if self.pending_alive is not None and not self.pending_alive(block_id):
                continue  # consumed by a read while the job was queued
            entries.append((block_id, payload))
            fresh += 1
        self.collected = {}
        self.incoming = []

        k = len(entries)
        size = lev.size
        if k >= size:
            raise CapacityViolation(
                f"{k} real blocks cannot fit level {self.target} of size {size} "
                f"(partition {p})")
        if k > size // 2 and not self.relaxed_capacity:
            raise CapacityViolation(
                f"{k} real blocks into level {self.target} of size {size} "
                f"(partition {p})")

        self._new_epoch = lev.epoch + 1
        self._new_crypto = engine._level_crypto(p, self.target, self._new_epoch)
        self._new_k = k
        self.buffer_ids = [e[0] for e in entries]
        self.buffer_payloads = [e[1] for e in entries]
        self._ids_np = np.asarray(self.buffer_ids, dtype=np.int64) if k else \
            np.empty(0, dtype=np.int64)
        if engine.track_bits or self.pending_alive is not None:
            self.buffer_index = {bid: i for i, bid in enumerate(self.buffer_ids)}
            self.new_level_bits = (np.zeros(k, dtype=bool)
                                   if engine.track_bits else None)
        else:
            self.buffer_index = None  # nothing reads a buffer mid-shuffle
            self.new_level_bits = None
        engine.note_incoming_real(p, fresh)
        if k > _VECTOR_THRESHOLD:
            engine.posindex.set_server_batch(self._ids_np, p, self.target,
                                             np.arange(k))
        else:
            set_server = engine.posindex.set_server
            for i, block_id in enumerate(self.buffer_ids):
                set_server(block_id, p, self.target, i)
        self._sealed = (np.zeros(size, dtype=np.uint64) if engine.sim
                        else [None] * size)
        self._upload_pos = 0

    # -- upload ----------------------------------------------------------------------

    def _upload_chunk(self, budget: int) -> int:
        engine = self.engine
        lev = engine.levels[self.p][self.target]
        size, k = lev.size, self._new_k
        crypto = self._new_crypto
        start = self._upload_pos
        end = min(size, start + budget)
        if engine.sim:
            _kernels.seal_level(crypto.table(), self._ids_np,
                                crypto.cipher._np_salt, k, start, end,
                                self._sealed)
        else:
            zero = bytes(engine.config.block_size)
            for i in range(start, end):
                if i < k:
                    block_id, payload = self.buffer_ids[i], self.buffer_payloads[i]
                else:
                    block_id, payload = DUMMY_ID, zero
                off = crypto.offset(i)
                self._sealed[off] = crypto.cipher.seal(off, block_id, payload)
        self._upload_pos = end
        if end == size:
            self._store()
        return end - start

    def _store(self):
        engine, p = self.engine, self.p
        lev = engine.levels[p][self.target]
        size, k = lev.size, self._new_k
        crypto = self._new_crypto
        # the id list covers every slot (dummies included) so its size is
        # fixed by the level, revealing nothing about the real count
        full_ids = np.full(size, DUMMY_ID, dtype=np.int64)
        if k:
            full_ids[:k] = self._ids_np
        meta = crypto.cipher.seal_meta(full_ids)
        compress = engine.config.compression and k <= size // 2
        if engine.sim:
            mode = UPLOAD_SIM_HALF if compress else UPLOAD_RAW
            upload = LevelUpload(mode, self._sealed, size, meta, size)
        elif compress:
            vectors = [vancodec.bytes_to_elements(b) for b in self._sealed]
            pinned = [crypto.offset(i) for i in range(size // 2)]
            x = vancodec.compress_upload(vectors, pinned)
            upload = LevelUpload(UPLOAD_FIELD, x, size, meta, size)
        else:
            upload = LevelUpload(UPLOAD_RAW, list(self._sealed), size, meta, size)
        engine.store.store_level(LevelRef(p, self.target, lev.epoch), upload)

        lev.filled = True
        lev.virtual = False
        lev.epoch = self._new_epoch
        lev.crypto = crypto
        lev.k = k
        lev.cnt = k
        lev.bits = self.new_level_bits
        lev.compressed = compress
        self._sealed = None
        self.stage = self.DONE

    # -- driver ------------------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.stage == self.DONE

    def uploading(self) -> bool:
        return self.stage == self.UPLOAD

    def advance(self, budget: int) -> int:
        """Perform up to ``budget`` work units; returns work performed."""
        done = 0
        while done < budget and self.stage != self.DONE:
            if self.stage == self.FETCH:
                if self._level_pos >= len(self.source_levels):
                    self.stage = self.BUILD
                    continue
                done += self._fetch_chunk(self.source_levels[self._level_pos],
                                          budget - done)
            elif self.stage == self.BUILD:
                self._build()
                self.stage = self.UPLOAD
            elif self.stage == self.UPLOAD:
                done += self._upload_chunk(budget - done)
        return done

    def run_to_completion(self):
        while self.stage != self.DONE:
            self.advance(1 << 30)
