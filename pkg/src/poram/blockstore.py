"""The untrusted-server storage contract and its local backends.

A block store holds, per (partition, level): a filled flag, an epoch that
increments on every (re)construction, the sealed blocks, and the sealed
id-list metadata.  Requests identify levels as ``(partition, level,
epoch)`` so a stale request is rejected instead of silently served.

Levels that were declared filled at setup but never constructed are
*virtual*: the store keeps no blocks for them and synthesizes all-zero
sealed blocks on fetch (their transfer is counted normally).

All transfer accounting lives in the shared base class, so every backend
produces identical :class:`TransferStats` for identical request streams.
Byte counters always use the sealed wire size derived from the block size,
which keeps metadata-only simulation runs honest about bandwidth.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import vancodec


class ProtocolError(Exception):
    """A request violated the storage contract (bad level, offset, or epoch)."""


class LevelRef(NamedTuple):
    partition: int
    level: int
    epoch: int


class Geometry(NamedTuple):
    """Everything the server must know to size and validate storage."""
    partitions: int
    levels: int
    level_sizes: tuple
    sealed_size: int
    sim: bool
    delete_on_read: bool
    version: int = 1


UPLOAD_RAW = 0
UPLOAD_FIELD = 1      # Vandermonde-compressed field-element vectors
UPLOAD_SIM_HALF = 2   # sim tokens, charged at half the block count


class LevelUpload(NamedTuple):
    """One level's worth of upload: blocks plus sealed id-list metadata.

    mode UPLOAD_RAW:       ``blocks`` holds n_slots sealed blocks.
    mode UPLOAD_FIELD:     ``blocks`` holds n_slots/2 field-element vectors;
                           the server expands them to n_slots blocks.
    mode UPLOAD_SIM_HALF:  ``blocks`` holds n_slots sim tokens but transfer
                           is charged at n_slots/2 block equivalents.
    """
    mode: int
    blocks: object
    n_slots: int
    meta: object
    meta_entries: int


@dataclass
class TransferStats:
    blocks_up: int = 0
    blocks_down: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    meta_bytes: int = 0
    peak_server_blocks: int = 0
    resident_blocks: int = 0
    steps: int = 0
    max_step_work: int = 0
    record_steps: bool = False
    per_step_work: list = field(default_factory=list)
    _step_mark: int = 0

    _PACK = struct.Struct("<7Q")

    def pack(self) -> bytes:
        """Canonical serialization of the scalar counters (wire + diffing)."""
        return self._PACK.pack(self.blocks_up, self.blocks_down, self.bytes_up,
                               self.bytes_down, self.meta_bytes,
                               self.peak_server_blocks, self.resident_blocks)

    @classmethod
    def unpack(cls, raw: bytes) -> "TransferStats":
        vals = cls._PACK.unpack(raw)
        return cls(blocks_up=vals[0], blocks_down=vals[1], bytes_up=vals[2],
                   bytes_down=vals[3], meta_bytes=vals[4],
                   peak_server_blocks=vals[5], resident_blocks=vals[6])

    def note_step(self):
        moved = self.blocks_up + self.blocks_down
        work = moved - self._step_mark
        self._step_mark = moved
        self.steps += 1
        if work > self.max_step_work:
            self.max_step_work = work
        if self.record_steps:
            self.per_step_work.append(work)


class _Level:
    __slots__ = ("filled", "virtual", "epoch", "size", "resident",
                 "fetched", "meta_entries")

    def __init__(self, size: int):
        self.filled = False
        self.virtual = False
        self.epoch = 0
        self.size = size
        self.resident = 0
        self.fetched = None
        self.meta_entries = 0


class BlockStore:
    """Shared contract logic; subclasses provide raw block/meta storage."""

    def __init__(self):
        self.geometry = None
        self._stats = TransferStats()
        self._levels = {}

    # -- lifecycle ------------------------------------------------------------

    def setup(self, geometry: Geometry, fills):
        """Initialize storage; ``fills`` is a per-partition bitmask of levels
        that start filled (virtually: their blocks are implicit zeros)."""
        if geometry.version != 1:
            raise ProtocolError(f"unsupported version {geometry.version}")
        if len(fills) != geometry.partitions:
            raise ProtocolError("fill list does not match partition count")
        self.geometry = geometry
        self._levels = {}
        for p in range(geometry.partitions):
            for l in range(geometry.levels):
                lev = _Level(geometry.level_sizes[l])
                if fills[p] & (1 << l):
                    lev.filled = True
                    lev.virtual = True
                    lev.fetched = np.zeros(lev.size, dtype=bool)
                self._levels[(p, l)] = lev
        self._setup_storage()

    def _setup_storage(self):
        pass

    # -- helpers ----------------------------------------------------------------

    def _get_level(self, ref: LevelRef) -> _Level:
        lev = self._levels.get((ref.partition, ref.level))
        if lev is None:
            raise ProtocolError(f"no such level: {ref}")
        if not lev.filled:
            raise ProtocolError(f"level not filled: {ref}")
        if lev.epoch != ref.epoch:
            raise ProtocolError(f"stale epoch {ref.epoch} for {ref} (now {lev.epoch})")
        return lev

    def _zero_block(self):
        if self.geometry.sim:
            return 0
        return bytes(self.geometry.sealed_size)

    def _account_down(self, count: int):
        self._stats.blocks_down += count
        self._stats.bytes_down += count * self.geometry.sealed_size

    def _account_up(self, count: int):
        self._stats.blocks_up += count
        self._stats.bytes_up += count * self.geometry.sealed_size

    def _meta_bytes(self, entries: int):
        self._stats.meta_bytes += 24 + 8 * entries

    def _consume_one(self, ref: LevelRef, lev: _Level, off: int):
        if not 0 <= off < lev.size:
            raise ProtocolError(f"offset {off} outside level of size {lev.size}: {ref}")
        if lev.fetched[off]:
            raise ProtocolError(f"offset fetched twice within one epoch: {ref}")
        lev.fetched[off] = True
        if self.geometry.delete_on_read and not lev.virtual:
            lev.resident -= 1
            self._stats.resident_blocks -= 1

    def _consume_offsets(self, ref: LevelRef, lev: _Level, offsets):
        if len(offsets) <= 8:
            for off in offsets:
                self._consume_one(ref, lev, int(off))
            return
        offs = np.asarray(offsets, dtype=np.int64)
        if offs.min() < 0 or offs.max() >= lev.size:
            raise ProtocolError(f"offset outside level of size {lev.size}: {ref}")
        taken = lev.fetched[offs]
        if taken.any():
            raise ProtocolError(f"offset fetched twice within one epoch: {ref}")
        lev.fetched[offs] = True
        if self.geometry.delete_on_read and not lev.virtual:
            freed = len(offs)
            lev.resident -= freed
            self._stats.resident_blocks -= freed

    # -- contract operations ----------------------------------------------------

    def fetch_blocks(self, requests):
        """Fetch (LevelRef, offset) pairs; one logical round trip, reply in order."""
        out = []
        for ref, off in requests:
            lev = self._get_level(ref)
            self._consume_one(ref, lev, off)
            if lev.virtual:
                out.append(self._zero_block())
            else:
                out.append(self._load_slot(ref.partition, ref.level, off))
        self._account_down(len(out))
        return out

    def fetch_read(self, partition: int, levels, epochs, offsets):
        """One block per referenced level of one partition, in one round trip.

        Semantics and accounting are identical to ``fetch_blocks``; this
        entry point just avoids per-request tuple packing on the read path.
        """
        out = []
        table = self._levels
        for l, epoch, off in zip(levels, epochs, offsets):
            lev = table[(partition, l)]
            if not lev.filled:
                raise ProtocolError(f"level not filled: ({partition}, {l})")
            if lev.epoch != epoch:
                raise ProtocolError(
                    f"stale epoch {epoch} for ({partition}, {l}) (now {lev.epoch})")
            if not 0 <= off < lev.size or lev.fetched[off]:
                raise ProtocolError(
                    f"bad or repeated offset {off}: ({partition}, {l})")
            lev.fetched[off] = True
            if self.geometry.delete_on_read and not lev.virtual:
                lev.resident -= 1
                self._stats.resident_blocks -= 1
            if lev.virtual:
                out.append(self._zero_block())
            else:
                out.append(self._load_slot(partition, l, off))
        self._account_down(len(out))
        return out

    def fetch_level(self, ref: LevelRef, offsets):
        """Batch fetch from one level (hot path; same accounting as fetch_blocks)."""
        lev = self._get_level(ref)
        self._consume_offsets(ref, lev, offsets)
        self._account_down(len(offsets))
        if lev.virtual:
            zero = self._zero_block()
            if self.geometry.sim:
                return np.zeros(len(offsets), dtype=np.uint64)
            return [zero] * len(offsets)
        return self._load_slots(ref.partition, ref.level, offsets)

    def store_level(self, ref: LevelRef, upload: LevelUpload):
        lev = self._levels.get((ref.partition, ref.level))
        if lev is None:
            raise ProtocolError(f"no such level: {ref}")
        top = ref.level == self.geometry.levels - 1
        if lev.filled and not top:
            raise ProtocolError(f"level already filled: {ref}")
        if upload.n_slots != lev.size:
            raise ProtocolError(f"upload of {upload.n_slots} blocks into level "
                                f"of size {lev.size}: {ref}")

        if upload.mode == UPLOAD_RAW:
            blocks = upload.blocks
            charged = upload.n_slots
        elif upload.mode == UPLOAD_SIM_HALF:
            if not self.geometry.sim:
                raise ProtocolError("sim-compressed upload against a full-payload store")
            blocks = upload.blocks
            charged = upload.n_slots // 2
        elif upload.mode == UPLOAD_FIELD:
            if self.geometry.sim:
                raise ProtocolError("field-compressed upload against a sim store")
            vectors = vancodec.decompress_upload(upload.blocks, upload.n_slots)
            blocks = [vancodec.elements_to_bytes(v, self.geometry.sealed_size)
                      for v in vectors]
            charged = len(upload.blocks)
        else:
            raise ProtocolError(f"unknown upload mode {upload.mode}")

        if lev.filled:
            self._stats.resident_blocks -= lev.resident
        lev.filled = True
        lev.virtual = False
        lev.epoch += 1
        lev.resident = lev.size
        lev.fetched = np.zeros(lev.size, dtype=bool)
        lev.meta_entries = upload.meta_entries
        self._store_payload(ref.partition, ref.level, blocks)
        self._store_meta(ref.partition, ref.level, upload.meta)

        self._account_up(charged)
        self._meta_bytes(upload.meta_entries)
        self._stats.resident_blocks += lev.size
        if self._stats.resident_blocks > self._stats.peak_server_blocks:
            self._stats.peak_server_blocks = self._stats.resident_blocks

    def fetch_meta(self, ref: LevelRef):
        lev = self._get_level(ref)
        if lev.virtual:
            raise ProtocolError(f"virtual level has no stored metadata: {ref}")
        self._meta_bytes(lev.meta_entries)
        return self._load_meta(ref.partition, ref.level)

    def mark_unfilled(self, ref: LevelRef):
        lev = self._get_level(ref)
        self._stats.resident_blocks -= lev.resident
        lev.filled = False
        lev.virtual = False
        lev.resident = 0
        lev.fetched = None
        self._free_level(ref.partition, ref.level)

    def filled_state(self, partition: int):
        """Bitmask of filled levels plus per-level epochs (public knowledge)."""
        mask = 0
        epochs = []
        for l in range(self.geometry.levels):
            lev = self._levels[(partition, l)]
            if lev.filled:
                mask |= 1 << l
            epochs.append(lev.epoch)
        return mask, epochs

    def stats(self) -> TransferStats:
        return self._stats

    def note_step(self):
        self._stats.note_step()

    # -- storage hooks ---------------------------------------------------------

    def _load_slot(self, p: int, l: int, off: int):
        raise NotImplementedError

    def _load_slots(self, p: int, l: int, offsets: np.ndarray):
        raise NotImplementedError

    def _store_payload(self, p: int, l: int, blocks):
        raise NotImplementedError

    def _store_meta(self, p: int, l: int, meta):
        raise NotImplementedError

    def _load_meta(self, p: int, l: int):
        raise NotImplementedError

    def _free_level(self, p: int, l: int):
        raise NotImplementedError


class MemoryBlockStore(BlockStore):
    """Dict-of-arrays backend; the default for simulation."""

    def _setup_storage(self):
        self._data = {}
        self._meta = {}

    def _load_slot(self, p, l, off):
        blocks = self._data[(p, l)]
        if self.geometry.sim:
            return int(blocks[off])
        return blocks[off]

    def _load_slots(self, p, l, offsets):
        blocks = self._data[(p, l)]
        if self.geometry.sim:
            if len(offsets) <= 8:
                return [int(blocks[off]) for off in offsets]
            return blocks[np.asarray(offsets, dtype=np.int64)]
        return [blocks[int(off)] for off in offsets]

    def _store_payload(self, p, l, blocks):
        if self.geometry.sim:
            self._data[(p, l)] = np.asarray(blocks, dtype=np.uint64)
        else:
            self._data[(p, l)] = list(blocks)

    def _store_meta(self, p, l, meta):
        self._meta[(p, l)] = meta

    def _load_meta(self, p, l):
        return self._meta[(p, l)]

    def _free_level(self, p, l):
        self._data.pop((p, l), None)
        self._meta.pop((p, l), None)


class FileBlockStore(BlockStore):
    """One file per partition; levels and metadata live at fixed offsets.

    Layout per partition file:
        header:  magic 'PORF', version u8, levels u16, slot bytes u32
        per level: directory entry (filled u8, virtual u8, epoch u32,
                   meta entries u32), then at fixed offsets the level's
                   slots and a metadata region sized for the worst case.
    """

    MAGIC = b"PORF"
    _DIR_ENTRY = struct.Struct("<BBII")

    def __init__(self, directory: str):
        super().__init__()
        self.directory = directory

    def _slot_bytes(self) -> int:
        return 8 if self.geometry.sim else self.geometry.sealed_size

    def _meta_capacity(self, level: int) -> int:
        # worst case: one id per slot, 8 bytes each, plus sealing overhead
        return 64 + 8 * self.geometry.level_sizes[level]

    def _layout(self):
        header = 16
        dir_size = self._DIR_ENTRY.size * self.geometry.levels
        offsets = []
        pos = header + dir_size
        for l in range(self.geometry.levels):
            data_off = pos
            pos += self.geometry.level_sizes[l] * self._slot_bytes()
            meta_off = pos
            pos += self._meta_capacity(l)
            offsets.append((data_off, meta_off))
        return offsets, pos

    def _path(self, p: int) -> str:
        return os.path.join(self.directory, f"partition-{p:05d}.dat")

    def _setup_storage(self):
        os.makedirs(self.directory, exist_ok=True)
        self._offsets, total = self._layout()
        self._handles = {}
        header = self.MAGIC + struct.pack("<BHIx", 1, self.geometry.levels,
                                          self._slot_bytes())
        for p in range(self.geometry.partitions):
            fh = open(self._path(p), "w+b")
            fh.truncate(total)
            fh.seek(0)
            fh.write(header)
            self._handles[p] = fh
            self._flush_directory(p)

    def close(self):
        for fh in self._handles.values():
            fh.close()
        self._handles = {}

    def _flush_directory(self, p: int):
        fh = self._handles[p]
        fh.seek(16)
        for l in range(self.geometry.levels):
            lev = self._levels[(p, l)]
            fh.write(self._DIR_ENTRY.pack(int(lev.filled), int(lev.virtual),
                                          lev.epoch, lev.meta_entries))

    def _load_slot(self, p, l, off):
        fh = self._handles[p]
        sb = self._slot_bytes()
        fh.seek(self._offsets[l][0] + off * sb)
        raw = fh.read(sb)
        if self.geometry.sim:
            return struct.unpack("<Q", raw)[0]
        return raw

    def _load_slots(self, p, l, offsets):
        if self.geometry.sim:
            return np.asarray([self._load_slot(p, l, int(o)) for o in offsets],
                              dtype=np.uint64)
        return [self._load_slot(p, l, int(o)) for o in offsets]

    def _store_payload(self, p, l, blocks):
        fh = self._handles[p]
        fh.seek(self._offsets[l][0])
        if self.geometry.sim:
            fh.write(np.asarray(blocks, dtype=np.uint64).tobytes())
        else:
            fh.write(b"".join(blocks))
        self._flush_directory(p)

    def _store_meta(self, p, l, meta):
        fh = self._handles[p]
        if self.geometry.sim:
            ids, digest = meta
            raw = struct.pack("<IQ", len(ids), digest) + np.asarray(ids, dtype=np.int64).tobytes()
        else:
            raw = struct.pack("<I", len(meta)) + meta
        if len(raw) > self._meta_capacity(l):
            raise ProtocolError("metadata overflows its reserved region")
        fh.seek(self._offsets[l][1])
        fh.write(raw)

    def _load_meta(self, p, l):
        fh = self._handles[p]
        fh.seek(self._offsets[l][1])
        if self.geometry.sim:
            count, digest = struct.unpack("<IQ", fh.read(12))
            ids = np.frombuffer(fh.read(8 * count), dtype=np.int64)
            return (ids, digest)
        (length,) = struct.unpack("<I", fh.read(4))
        return fh.read(length)

    def _free_level(self, p, l):
        self._flush_directory(p)
