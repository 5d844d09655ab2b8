"""Experiment harness: bandwidth runs, correctness oracle, bound validation.

Every run is deterministic given (config, workload, seed): RNG streams
derive from the config seed, wall time never enters the CSV, and floats
are formatted to six significant digits, so identical inputs produce
byte-identical output files.
"""

import logging
import math
import random
import sys
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .client import READ, WRITE
from .config import OramConfig, with_overrides
from .oram import Oram
from .recursion import RecursiveOram
from .workload import Workload, payload_bytes

log = logging.getLogger("poram.simulator")

CSV_COLUMNS = (
    "n", "block_size", "partitions", "nu", "evict_algo", "piggyback",
    "concurrent", "recursive", "compression", "delete_on_read", "payload_mode",
    "capacity_mode", "workload", "ops", "write_fraction", "seed",
    "blocks_up", "blocks_down", "bytes_up", "bytes_down", "meta_bytes",
    "overhead", "cache_high_water", "cache_ratio", "partition_peak",
    "partition_ratio", "peak_server_blocks", "server_ratio",
    "forced_shuffles", "max_step_work", "max_job_latency", "late_jobs",
    "recursion_depth",
)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


@dataclass
class ExperimentResult:
    fields: dict
    trace: list | None = None

    def row(self) -> str:
        return ",".join(_fmt(self.fields[c]) for c in CSV_COLUMNS)

    def __getitem__(self, key):
        return self.fields[key]


def csv_text(results) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(r.row() for r in results)
    return "\n".join(lines) + "\n"


def build_system(config: OramConfig, store=None, record_trace: bool = False):
    if config.recursive:
        if store is not None:
            raise ValueError("recursive runs manage their own stores")
        return RecursiveOram(config, record_trace=record_trace)
    return Oram(config, store=store, record_trace=record_trace)


def run_experiment(config: OramConfig, workload: Workload, store=None,
                   record_trace: bool = False,
                   progress: bool = False) -> ExperimentResult:
    """Drive one full run and collect the stats row."""
    system = build_system(config, store=store, record_trace=record_trace)
    size = config.block_size if config.payload_mode == "full" else 0
    tick = max(1, workload.length // 20)
    for t, (is_write, block_id, version) in enumerate(workload):
        if is_write:
            system.access(WRITE, block_id,
                          data=payload_bytes(block_id, version, size))
        else:
            system.access(READ, block_id)
        if progress and (t + 1) % tick == 0:
            log.info("progress: %d/%d ops", t + 1, workload.length)
    scheds = ([l.scheduler for l in system.levels] if config.recursive
              else [system.scheduler])
    for sched in scheds:
        if sched is not None:
            sched.flush()

    report = system.report()
    root = math.sqrt(config.n)
    ops = workload.length
    moved = report["blocks_up"] + report["blocks_down"]
    fields = {
        "n": config.n, "block_size": config.block_size,
        "partitions": config.partitions, "nu": config.nu,
        "evict_algo": config.evict_algo, "piggyback": config.piggyback,
        "concurrent": config.concurrent, "recursive": config.recursive,
        "compression": config.compression,
        "delete_on_read": config.delete_on_read,
        "payload_mode": config.payload_mode,
        "capacity_mode": config.capacity_mode,
        "workload": workload.kind, "ops": ops,
        "write_fraction": workload.write_fraction, "seed": config.seed,
        "blocks_up": report["blocks_up"], "blocks_down": report["blocks_down"],
        "bytes_up": report["bytes_up"], "bytes_down": report["bytes_down"],
        "meta_bytes": report["meta_bytes"],
        "overhead": moved / ops,
        "cache_high_water": report["cache_high_water"],
        "cache_ratio": report["cache_high_water"] / root,
        "partition_peak": report["peak_partition_load"],
        "partition_ratio": report["peak_partition_load"] / root,
        "peak_server_blocks": report["peak_server_blocks"],
        "server_ratio": report["peak_server_blocks"] / config.n,
        "forced_shuffles": report["forced_shuffles"],
        "max_step_work": report.get("max_step_work", 0),
        "max_job_latency": report.get("max_job_latency", 0),
        "late_jobs": report.get("late_jobs", 0),
        "recursion_depth": report.get("recursion_depth", 0),
    }
    trace = None
    if record_trace:
        client = system.data.client if config.recursive else system.client
        trace = client.trace
    return ExperimentResult(fields, trace)


# ---------------------------------------------------------------------------
# correctness oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleOutcome:
    ok: bool
    ops: int
    divergence: str = ""


def run_oracle_check(config: OramConfig, workload: Workload,
                     store=None) -> OracleOutcome:
    """Replay the workload against the ORAM and a reference dictionary."""
    if config.payload_mode != "full":
        raise ValueError("the oracle needs real payloads (payload_mode=full)")
    system = build_system(config, store=store)
    mirror = {}
    zero = bytes(config.block_size)
    for t, (is_write, block_id, version) in enumerate(workload):
        try:
            if is_write:
                data = payload_bytes(block_id, version, config.block_size)
                got = system.access(WRITE, block_id, data=data)
                expect = mirror.get(block_id, zero)
                mirror[block_id] = data
            else:
                got = system.access(READ, block_id)
                expect = mirror.get(block_id, zero)
        except Exception as exc:  # a broken protocol is a divergence too
            return OracleOutcome(False, t + 1, f"op {t}: id {block_id}: {exc!r}")
        if got != expect:
            return OracleOutcome(False, t + 1,
                                 f"op {t}: id {block_id} returned "
                                 f"{got[:16]!r}.. want {expect[:16]!r}..")
    return OracleOutcome(True, workload.length)


# ---------------------------------------------------------------------------
# bound validation
# ---------------------------------------------------------------------------

def slot_chain_stationary(rho: float, states: int) -> np.ndarray:
    """pi_i = rho^i (1 - rho) truncated to ``states`` entries."""
    i = np.arange(states)
    return (rho ** i) * (1 - rho)


@dataclass
class MarkovReport:
    rho: float
    tv_distance: float
    empirical_mean: float
    expected_mean: float
    steps: int

    @property
    def mean_error(self) -> float:
        return abs(self.empirical_mean - self.expected_mean) / self.expected_mean


def markov_slot_check(p: float, q: float, steps: int, seed: int = 0) -> MarkovReport:
    """Simulate the single-slot birth-death chain and compare its empirical
    law against the closed form.

    Per step two independent coins fire: with probability p a block
    arrives, with probability q one departs (when present); both at once
    cancel out.  That yields up/down rates p(1-q) and q(1-p), hence the
    stationary ratio rho = p(1-q) / (q(1-p)).  Only the state-changing
    steps are walked explicitly; dwell times weight the empirical law.
    """
    up = p * (1 - q)
    down = q * (1 - p)
    rng = np.random.default_rng(seed)
    u = rng.random(steps)
    event_idx = np.nonzero(u < up + down)[0]
    arrivals = u[event_idx] < up

    occupancy = 0
    dwell = {}
    prev = 0
    for idx, arrive in zip(event_idx.tolist(), arrivals.tolist()):
        dwell[occupancy] = dwell.get(occupancy, 0) + (idx - prev)
        prev = idx
        if arrive:
            occupancy += 1
        elif occupancy > 0:
            occupancy -= 1
    dwell[occupancy] = dwell.get(occupancy, 0) + (steps - prev)

    states = max(dwell) + 1
    counts = np.zeros(states)
    for state, ticks in dwell.items():
        counts[state] = ticks
    empirical = counts / counts.sum()

    rho = (p * (1 - q)) / (q * (1 - p))
    theory = slot_chain_stationary(rho, states)
    tail = 1.0 - theory.sum()
    tv = 0.5 * (np.abs(empirical - theory).sum() + tail)
    emp_mean = float((np.arange(states) * empirical).sum())
    return MarkovReport(rho=rho, tv_distance=float(tv),
                        empirical_mean=emp_mean,
                        expected_mean=rho / (1 - rho), steps=steps)


def cache_capacity_bound(n: int, k: float, c: float) -> float:
    """High-probability cap on total cache blocks over n^k requests."""
    return math.sqrt(n) + 4 * math.sqrt(k + c) * (n ** 0.25) * math.sqrt(math.log(n))


def partition_capacity_bound(n: int, k: float, c: float) -> float:
    """High-probability cap on one partition's real-block load."""
    return math.sqrt(n) + (k + c) * math.log(n)


# ---------------------------------------------------------------------------
# obliviousness statistics
# ---------------------------------------------------------------------------

def uniform_chi2_pvalue(trace, partitions: int) -> float:
    counts = np.bincount(np.asarray(trace), minlength=partitions)
    return float(scipy_stats.chisquare(counts).pvalue)


def lag_pair_chi2_pvalue(trace, partitions: int, bins: int = 16) -> float:
    """Independence of consecutive reads, on a coarsened partition grid."""
    arr = np.asarray(trace) * bins // partitions
    table = np.zeros((bins, bins))
    np.add.at(table, (arr[:-1], arr[1:]), 1)
    return float(scipy_stats.chi2_contingency(table + 1e-9).pvalue)


def two_trace_chi2_pvalue(trace_a, trace_b, partitions: int) -> float:
    counts = np.vstack([
        np.bincount(np.asarray(trace_a), minlength=partitions),
        np.bincount(np.asarray(trace_b), minlength=partitions),
    ])
    return float(scipy_stats.chi2_contingency(counts).pvalue)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def nonincreasing(values, slack: float = 0.0) -> bool:
    return all(b <= a + slack for a, b in zip(values, values[1:]))


def strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


@dataclass
class SweepOutcome:
    results: list
    monotone_ok: bool
    axis: str


def run_sweep(axis: str, values, base: OramConfig, workload_kind: str = "roundrobin",
              ops: int | None = None, progress: bool = False) -> SweepOutcome:
    """One run_experiment per grid point, plus the trend check."""
    results = []
    for v in values:
        if axis == "eviction-rate":
            cfg = with_overrides(base, nu=float(v))
        elif axis == "client-storage-k":
            cap = max(1, int(float(v) * math.sqrt(base.n)))
            cfg = with_overrides(base, max_cache_blocks=cap)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        wl = Workload(workload_kind, cfg.n, ops or 3 * cfg.n, seed=cfg.seed)
        log.info("sweep %s = %s", axis, v)
        results.append(run_experiment(cfg, wl, progress=progress))
    if not results:
        return SweepOutcome([], True, axis)
    if axis == "eviction-rate":
        ok = nonincreasing([r["cache_high_water"] for r in results])
    else:
        ok = nonincreasing([r["overhead"] for r in results],
                           slack=0.02 * results[0]["overhead"])
    return SweepOutcome(results, ok, axis)
