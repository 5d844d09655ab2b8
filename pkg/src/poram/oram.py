"""Assembly of one ORAM instance from a configuration.

Everything random in the system descends from the config seed through
labelled key derivation, so identical configurations replay identical
protocol transcripts: protocol coins (slot draws, eviction sampling),
initial fill patterns, encryption nonces, and level keys are all separate
deterministic streams.
"""

import random

from .amortizer import Amortizer
from .blockstore import Geometry, MemoryBlockStore
from .client import DirectEngine, OramClient
from .config import OramConfig
from .crypto import derive_key
from .partition import PartitionEngine
from .posmap import CounterCompressedPositionMap, PlainPositionMap


def _child_rng(master: bytes, label: bytes) -> random.Random:
    return random.Random(int.from_bytes(derive_key(master, b"rng-" + label), "little"))


def make_geometry(config: OramConfig) -> Geometry:
    return Geometry(partitions=config.partitions, levels=config.levels,
                    level_sizes=config.level_sizes,
                    sealed_size=config.sealed_block_size,
                    sim=config.payload_mode == "meta",
                    delete_on_read=config.delete_on_read)


class Oram:
    """A single (non-recursive) partitioned ORAM bound to a block store."""

    def __init__(self, config: OramConfig, store=None, posmap=None,
                 record_trace: bool = False, fill_masks=None, label: bytes = b""):
        self.config = config
        self.master = derive_key(config.seed.to_bytes(8, "little", signed=False),
                                 b"oram-master" + label)
        self.store = store if store is not None else MemoryBlockStore()

        if posmap is not None:
            self.posmap = posmap
        elif config.compressed_posmap:
            self.posmap = CounterCompressedPositionMap(
                config.n, config.partitions, derive_key(self.master, b"posmap"))
        else:
            self.posmap = PlainPositionMap(config.n, config.partitions)

        nonce_rng = _child_rng(self.master, b"nonce")
        self.engine = PartitionEngine(
            config, self.store, self.posmap, derive_key(self.master, b"levels"),
            nonce_source=lambda: nonce_rng.getrandbits(96).to_bytes(12, "little"),
            track_bits=config.concurrent)

        setup_rng = _child_rng(self.master, b"setup")
        if fill_masks is None:
            fills = self.engine.setup(setup_rng)
        else:
            fills = self.engine.setup_explicit(fill_masks)
        self.store.setup(make_geometry(config), fills)

        if config.concurrent:
            self.scheduler = Amortizer(config, self.engine, self.store,
                                       self.posmap, _child_rng(self.master, b"sprime"))
            engine_iface = self.scheduler
        else:
            self.scheduler = None
            engine_iface = DirectEngine(self.engine, self.store)

        self.client = OramClient(config, engine_iface, self.posmap,
                                 _child_rng(self.master, b"protocol"),
                                 record_trace=record_trace)

    # -- data operations -------------------------------------------------------

    def access(self, op: str, block_id: int, data=None, mutate=None):
        return self.client.access(op, block_id, data=data, mutate=mutate)

    def read(self, block_id: int):
        return self.client.read(block_id)

    def write(self, block_id: int, data):
        return self.client.write(block_id, data)

    # -- reporting ----------------------------------------------------------------

    def stats(self):
        return self.store.stats()

    def report(self) -> dict:
        stats = self.store.stats()
        out = {
            "accesses": self.client.accesses,
            "blocks_up": stats.blocks_up,
            "blocks_down": stats.blocks_down,
            "bytes_up": stats.bytes_up,
            "bytes_down": stats.bytes_down,
            "meta_bytes": stats.meta_bytes,
            "peak_server_blocks": stats.peak_server_blocks,
            "cache_high_water": self.client.cache.high_water,
            "peak_partition_load": self.engine.peak_real_load,
            "forced_shuffles": self.engine.forced_shuffles,
        }
        if self.scheduler is not None:
            out.update({
                "max_step_work": self.scheduler.max_step_work,
                "max_job_latency": self.scheduler.max_job_latency,
                "late_jobs": self.scheduler.late_jobs,
                "pending_high_water": self.scheduler.pending_high_water,
                "read_cache_high_water": self.scheduler.read_cache_high_water,
            })
        return out
