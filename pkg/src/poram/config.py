"""Global configuration and derived storage geometry.

The configuration captures every knob of the construction: capacity N,
block size B, partition count P, eviction behaviour, and the optimization
flags (compression, delete-on-read, concurrency, recursion).  A config can
be loaded from a flat ``key = value`` text file; CLI flags override file
values.
"""

import math
from dataclasses import dataclass, fields, replace

EVICT_SEQUENTIAL = "seq"
EVICT_RANDOM = "rand"

PAYLOAD_FULL = "full"
PAYLOAD_META = "meta"

CAPACITY_EMPIRICAL = "empirical"
CAPACITY_ANALYTIC = "analytic"
CAPACITY_PADDED = "padded"

# Fraction above sqrt(N) that a partition must be able to hold in practice
# (valid for large stores, N >= 2^20 or so).
EMPIRICAL_LOAD_FACTOR = 1.15

# Padded mode: sqrt(N) + PADDED_FACTOR * N^(1/4) * sqrt(ln N).  The maximum
# load of the balls-in-bins process has Poisson-shaped fluctuations of order
# N^(1/4), so a safe partition capacity needs this slack at small N, where
# the 1.15 factor undersizes badly.
PADDED_FACTOR = 2.0


@dataclass(frozen=True)
class OramConfig:
    """Parameters of one partitioned ORAM instance.

    n:                  total number of logical blocks (power of 4 recommended)
    block_size:         payload bytes per block (B)
    partitions:         partition count P; 0 means ceil(sqrt(n))
    nu:                 background eviction rate (evictions per access, >= 0)
    evict_algo:         "seq" (bounded-geometric sequential scan) or "rand"
    piggyback:          write back to the partition just read on every access
    concurrent:         spread shuffle work over steps with a job queue
    delete_on_read:     server frees a slot as soon as it is fetched
    compression:        halve level uploads with the shared-matrix codec
    recursive:          store the position map in smaller ORAM instances
    recursion_threshold: max entries kept in the resident top map
    compressed_posmap:  counter-based position map (PRF slot assignment)
    payload_mode:       "full" (real payload bytes) or "meta" (ids only,
                        byte counters derived analytically from block_size)
    capacity_mode:      "empirical" (1.15*sqrt(N) real blocks per partition)
                        or "analytic" (sqrt(N) + (k+c)*ln(N))
    work_factor:        w; concurrent mode performs w*log2(S) work per step
    max_cache_blocks:   0 = unbounded; otherwise forced evictions keep the
                        data cache at or below this many blocks
    seed:               master seed for every random choice in the system
    """

    n: int
    block_size: int = 4096
    partitions: int = 0
    nu: float = 1.0
    evict_algo: str = EVICT_SEQUENTIAL
    piggyback: bool = True
    concurrent: bool = False
    delete_on_read: bool = False
    compression: bool = False
    recursive: bool = False
    recursion_threshold: int = 1024
    compressed_posmap: bool = False
    payload_mode: str = PAYLOAD_FULL
    capacity_mode: str = CAPACITY_PADDED
    capacity_k: float = 1.0
    capacity_c: float = 2.0
    work_factor: int = 16
    max_cache_blocks: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.payload_mode not in (PAYLOAD_FULL, PAYLOAD_META):
            raise ValueError(f"unknown payload_mode: {self.payload_mode!r}")
        if self.payload_mode == PAYLOAD_FULL and self.block_size < 1:
            raise ValueError("block_size must be >= 1 in full payload mode")
        if self.evict_algo not in (EVICT_SEQUENTIAL, EVICT_RANDOM):
            raise ValueError(f"unknown evict_algo: {self.evict_algo!r}")
        if self.capacity_mode not in (CAPACITY_EMPIRICAL, CAPACITY_ANALYTIC,
                                      CAPACITY_PADDED):
            raise ValueError(f"unknown capacity_mode: {self.capacity_mode!r}")
        if self.nu < 0:
            raise ValueError("nu must be >= 0")
        if self.evict_algo == EVICT_RANDOM and self.nu != int(self.nu):
            raise ValueError("rand eviction requires an integer nu")
        if self.partitions == 0:
            root = math.isqrt(self.n)
            if root * root < self.n:
                root += 1
            object.__setattr__(self, "partitions", root)
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.recursive and self.compressed_posmap:
            raise ValueError("recursive mode does not support the compressed position map")
        if self.work_factor < 1:
            raise ValueError("work_factor must be >= 1")

    # ---- derived geometry -------------------------------------------------

    @property
    def levels(self) -> int:
        """Number of levels per partition: one per power of two up to sqrt(N)."""
        return max(1, int(math.log2(self.n)) // 2 + 1)

    @property
    def capacity(self) -> int:
        """Max real blocks a single partition must hold (S)."""
        root = math.sqrt(self.n)
        if self.capacity_mode == CAPACITY_ANALYTIC:
            extra = (self.capacity_k + self.capacity_c) * math.log(max(self.n, 2))
            return math.ceil(root + extra)
        if self.capacity_mode == CAPACITY_PADDED:
            pad = PADDED_FACTOR * (self.n ** 0.25) * math.sqrt(math.log(max(self.n, 3)))
            return math.ceil(root + pad)
        return math.ceil(EMPIRICAL_LOAD_FACTOR * root)

    @property
    def top_level(self) -> int:
        return self.levels - 1

    def level_size(self, level: int) -> int:
        """Slots in a level: 2*2^l, except the top level which has 2*capacity."""
        if level == self.top_level:
            return 2 * self.capacity
        return 2 << level

    @property
    def level_sizes(self) -> tuple:
        return tuple(self.level_size(l) for l in range(self.levels))

    @property
    def write_cycle(self) -> int:
        """Writes between top-level rebuilds (the binary-counter period)."""
        return 1 << (self.levels - 1)

    @property
    def step_budget(self) -> int:
        """Shuffle work units allowed per time step in concurrent mode."""
        return self.work_factor * max(1, math.ceil(math.log2(max(self.capacity, 2))))

    @property
    def job_deadline(self) -> int:
        """Steps within which every queued shuffle job must complete (tau)."""
        return self.partitions

    @property
    def sealed_block_size(self) -> int:
        """Wire bytes of one sealed block: nonce(12) + id(8) + payload + tag(16)."""
        return 12 + 8 + self.block_size + 16

    def meta_wire_size(self, real_count: int) -> int:
        """Wire bytes of a sealed level id-list with ``real_count`` entries."""
        return 24 + 8 * real_count

    @property
    def alpha(self) -> int:
        """Position-map compression rate per recursion level."""
        return max(2, int(self.block_size // (2 * math.log2(max(self.n, 4)))))


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config field {name}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw, 0)
    if kind is float:
        return float(raw)
    return raw.strip()


_FIELD_TYPES = {
    "n": int, "block_size": int, "partitions": int, "nu": float,
    "evict_algo": str, "piggyback": bool, "concurrent": bool,
    "delete_on_read": bool, "compression": bool, "recursive": bool,
    "recursion_threshold": int, "compressed_posmap": bool,
    "payload_mode": str, "capacity_mode": str, "capacity_k": float,
    "capacity_c": float, "work_factor": int, "max_cache_blocks": int,
    "seed": int,
}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines into a dict of typed config fields."""
    assert set(_FIELD_TYPES) == {f.name for f in fields(OramConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown field {key!r}")
        out[key] = _coerce(key, _FIELD_TYPES[key], raw)
    return out


def load_config(path: str, overrides: dict | None = None) -> OramConfig:
    """Build an OramConfig from a file plus optional override values."""
    with open(path, "r", encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    if "n" not in values:
        raise ValueError("config must define n")
    return OramConfig(**values)


def with_overrides(config: OramConfig, **kwargs) -> OramConfig:
    """Copy a config with some fields replaced."""
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
