"""Wire protocol: server + client adapter against the in-memory backend."""

import random
import struct

import numpy as np
import pytest

from poram.blockstore import (Geometry, LevelRef, LevelUpload, MemoryBlockStore,
                              UPLOAD_RAW)
from poram.config import OramConfig
from poram.crypto import IntegrityViolation
from poram.oram import Oram, make_geometry
from poram.remote import (OP_ERROR, OP_FETCH_BLOCKS, RemoteBlockStore,
                          RemoteProtocolError, TransportError, start_server,
                          write_frame, read_frame)


@pytest.fixture
def remote_pair():
    backend = MemoryBlockStore()
    server, address = start_server(backend)
    store = RemoteBlockStore(address)
    yield backend, store
    store.close()
    server.shutdown()
    server.server_close()


def _sim_geometry(delete_on_read=False):
    return Geometry(partitions=2, levels=3, level_sizes=(2, 4, 8),
                    sealed_size=100, sim=True, delete_on_read=delete_on_read)


def test_setup_and_empty_fetch(remote_pair):
    _, store = remote_pair
    store.setup(_sim_geometry(), [0b100, 0])
    assert store.fetch_blocks([]) == []


def test_roundtrip_store_fetch_meta_unfill(remote_pair):
    backend, store = remote_pair
    store.setup(_sim_geometry(), [0, 0])
    meta = (np.asarray([5, -1], dtype=np.int64), 99)
    store.store_level(LevelRef(0, 0, 0), LevelUpload(
        UPLOAD_RAW, np.asarray([11, 22], dtype=np.uint64), 2, meta, 2))
    got = store.fetch_level(LevelRef(0, 0, 1), [0, 1])
    assert list(got) == [11, 22]
    ids, digest = store.fetch_meta(LevelRef(0, 0, 1))
    assert list(ids) == [5, -1] and digest == 99
    store.mark_unfilled(LevelRef(0, 0, 1))
    # stats travel: the remote view equals the backend's own counters
    assert store.stats().pack() == backend.stats().pack()


def test_unfilled_level_maps_to_error_frame(remote_pair):
    _, store = remote_pair
    store.setup(_sim_geometry(), [0, 0])
    with pytest.raises(RemoteProtocolError):
        store.fetch_blocks([(LevelRef(0, 0, 0), 0)])
    # the connection survives the error
    assert store.fetch_blocks([]) == []


def test_version_mismatch_rejected(remote_pair):
    _, store = remote_pair
    body = struct.pack(">BBIHII", 9, 0, 1, 2, 50, 4) + struct.pack(">I", 0b10)
    with pytest.raises(RemoteProtocolError, match="error 3"):
        store._call(0x06, body)


def test_malformed_frame_keeps_connection(remote_pair):
    _, store = remote_pair
    store.setup(_sim_geometry(), [0, 0])
    write_frame(store.sock, OP_FETCH_BLOCKS, b"\x00\x00")  # truncated count
    op, reply = read_frame(store.sock)
    assert op == OP_ERROR
    assert store.fetch_blocks([]) == []


def test_fetch_frame_size_independent_of_block_identity(remote_pair):
    # for a fixed number of referenced levels the frame size is constant
    _, store = remote_pair
    store.setup(_sim_geometry(), [0b111, 0b111])
    sizes = set()
    for p, offs in ((0, [0, 1, 2]), (1, [1, 3, 7]), (0, [1, 0, 5])):
        store.last_frame_sizes.clear()
        refs = [(LevelRef(p, l, 0), off) for l, off in zip(range(3), offs)]
        store.fetch_blocks(refs)
        sizes.update(store.last_frame_sizes)
    assert len(sizes) == 1


def _drive(store, ops=2000, seed=5):
    """A scripted contract-level workload reused for the differential test."""
    cfg = OramConfig(n=256, block_size=32, payload_mode="meta", seed=seed,
                     capacity_mode="analytic")
    oram = Oram(cfg, store=store)
    rng = random.Random(seed)
    for _ in range(ops):
        oram.access("write" if rng.random() < 0.5 else "read",
                    rng.randrange(256), data=b"")
    return oram


def test_differential_remote_vs_memory(remote_pair):
    _, remote_store = remote_pair
    mem = MemoryBlockStore()
    a = _drive(mem)
    b = _drive(remote_store)
    assert mem.stats().pack() == remote_store.stats().pack()
    assert mem.stats().blocks_down > 0


def test_full_mode_blocks_and_tamper_detection():
    backend = MemoryBlockStore()
    server, address = start_server(backend)
    store = RemoteBlockStore(address)
    try:
        cfg = OramConfig(n=64, block_size=16, payload_mode="full", seed=3,
                         capacity_mode="analytic")
        oram = Oram(cfg, store=store)
        oram.write(5, b"r" * 16)
        assert oram.read(5) == b"r" * 16

        # a malicious server flips one ciphertext bit in the exact slot the
        # next read of id 5 will fetch: the client must notice
        slot = oram.posmap.get(5).partition
        oram.client.evict(slot)
        pos = oram.posmap.get(5)
        lev = oram.engine.levels[pos.partition][pos.level]
        offset = lev.crypto.offset(pos.index)
        blocks = backend._data[(pos.partition, pos.level)]
        blocks[offset] = bytes([blocks[offset][0] ^ 1]) + blocks[offset][1:]
        with pytest.raises(IntegrityViolation):
            oram.read(5)
    finally:
        store.close()
        server.shutdown()
        server.server_close()
