"""Recursive position-map chain behaviour."""

import random

import pytest

from poram.config import OramConfig
from poram.oram import Oram
from poram.recursion import RecursiveOram, chain_capacities


def _cfg(**kw):
    defaults = dict(n=2**12, block_size=64, payload_mode="full", nu=1.0,
                    evict_algo="seq", piggyback=True, seed=21, recursive=True,
                    recursion_threshold=256, capacity_mode="analytic",
                    capacity_k=2.0, capacity_c=3.0)
    defaults.update(kw)
    return OramConfig(**defaults)


def test_chain_capacities_match_alpha_division():
    cfg = OramConfig(n=2**16, block_size=256, recursive=True,
                     recursion_threshold=1024)
    assert cfg.alpha == 8
    assert chain_capacities(cfg) == [2**16, 2**13, 2**10]


def test_depth_and_resident_map():
    cfg = _cfg()
    oram = RecursiveOram(cfg)
    # alpha = floor(64 / 24) = 2 at n=2^12
    assert cfg.alpha == 2
    assert oram.depth == len(chain_capacities(cfg)) - 1
    assert oram.resident_map_entries() <= cfg.recursion_threshold
    caps = oram.sizes
    assert all(caps[i] / caps[i + 1] >= 2 for i in range(len(caps) - 1))


def test_threshold_at_or_above_n_degenerates():
    cfg = _cfg(recursion_threshold=2**12)
    oram = RecursiveOram(cfg)
    assert oram.depth == 0
    # behaves exactly like the flat construction on the same seed
    flat = Oram(OramConfig(**{**cfg.__dict__, "recursive": False}),
                label=b"chain0")
    script = [(random.Random(3).randrange(2**12))]
    rng = random.Random(9)
    for _ in range(200):
        bid = rng.randrange(2**12)
        assert oram.read(bid) == flat.read(bid)


def test_recursive_oracle_equivalence():
    oram = RecursiveOram(_cfg())
    mirror = {}
    rng = random.Random(31)
    for step in range(1200):
        bid = rng.randrange(2**12)
        if rng.random() < 0.5:
            data = rng.randbytes(64)
            got = oram.write(bid, data)
            assert got == mirror.get(bid, bytes(64))
            mirror[bid] = data
        else:
            assert oram.read(bid) == mirror.get(bid, bytes(64))


def test_recursive_concurrent_oracle():
    oram = RecursiveOram(_cfg(concurrent=True, work_factor=4))
    mirror = {}
    rng = random.Random(41)
    for step in range(600):
        bid = rng.randrange(2**12)
        if rng.random() < 0.5:
            data = rng.randbytes(64)
            oram.write(bid, data)
            mirror[bid] = data
        else:
            assert oram.read(bid) == mirror.get(bid, bytes(64))


def test_one_inner_access_per_data_access():
    oram = RecursiveOram(_cfg())
    inner = oram.levels[1]
    before = inner.client.accesses
    for i in range(50):
        oram.read(i)
    assert inner.client.accesses == before + 50


def test_storage_report_shape():
    oram = RecursiveOram(_cfg())
    for i in range(100):
        oram.write(i, bytes(64))
    rep = oram.storage_report()
    assert rep["depth"] == oram.depth
    assert len(rep["levels"]) == oram.depth + 1
    assert rep["cache_high_water_total"] >= rep["levels"][0]["cache_high_water"]
    assert rep["shared_shuffle_buffer_blocks"] == 2 * oram.levels[0].config.capacity
    combined = oram.stats_combined()
    assert combined["blocks_down"] > 0


def test_zeroed_entries_read_as_zero_blocks():
    oram = RecursiveOram(_cfg())
    assert oram.read(17) == bytes(64)
    assert oram.read(2**12 - 1) == bytes(64)
