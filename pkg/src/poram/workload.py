"""Deterministic request-stream generators for experiments."""

import random

import numpy as np

ROUND_ROBIN = "roundrobin"
UNIFORM = "uniform"
ZIPF = "zipf"
SINGLE_HOT = "singlehot"

KINDS = (ROUND_ROBIN, UNIFORM, ZIPF, SINGLE_HOT)


class Workload:
    """Yields (is_write, block_id, version) triples, reproducibly.

    The round-robin pattern cycles 0..n-1, maximizing cache pressure (every
    access misses).  ``version`` increments per write of an id so payloads
    can be derived deterministically.
    """

    def __init__(self, kind: str, n: int, length: int, write_fraction: float = 0.5,
                 zipf_s: float = 1.2, seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"unknown workload kind {kind!r}")
        if length < 1:
            raise ValueError("workload length must be >= 1")
        self.kind = kind
        self.n = n
        self.length = length
        self.write_fraction = write_fraction
        self.zipf_s = zipf_s
        self.seed = seed

    def __iter__(self):
        rng = random.Random(self.seed ^ 0x9E3779B9)
        versions = {}
        cumulative = None
        if self.kind == ZIPF:
            weights = np.arange(1, self.n + 1, dtype=np.float64) ** (-self.zipf_s)
            cumulative = np.cumsum(weights)
            cumulative /= cumulative[-1]
        for t in range(self.length):
            if self.kind == ROUND_ROBIN:
                block_id = t % self.n
            elif self.kind == UNIFORM:
                block_id = rng.randrange(self.n)
            elif self.kind == SINGLE_HOT:
                block_id = 0
            else:
                block_id = int(np.searchsorted(cumulative, rng.random()))
            is_write = rng.random() < self.write_fraction
            if is_write:
                versions[block_id] = versions.get(block_id, 0) + 1
            yield is_write, block_id, versions.get(block_id, 0)


def payload_bytes(block_id: int, version: int, size: int) -> bytes:
    """Deterministic payload content for (id, version)."""
    if size == 0:
        return b""
    stamp = (block_id.to_bytes(8, "little") + version.to_bytes(8, "little"))
    if size <= 16:
        return stamp[:size]
    return (stamp * (size // 16 + 1))[:size]
