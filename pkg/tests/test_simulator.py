"""Simulator harness: determinism, oracle, Markov check, sweeps, CLI."""

import math
import random
import subprocess
import sys

import numpy as np
import pytest

from poram.config import OramConfig, with_overrides
from poram.simulator import (CSV_COLUMNS, csv_text, markov_slot_check,
                             run_experiment, run_oracle_check, run_sweep,
                             slot_chain_stationary, two_trace_chi2_pvalue,
                             uniform_chi2_pvalue)
from poram.workload import Workload, payload_bytes


def _cfg(**kw):
    defaults = dict(n=256, block_size=16, payload_mode="meta", nu=1.0,
                    evict_algo="seq", piggyback=True, seed=33,
                    capacity_mode="analytic", capacity_k=2.0, capacity_c=3.0)
    defaults.update(kw)
    return OramConfig(**defaults)


def test_workload_kinds_and_determinism():
    wl = Workload("roundrobin", 8, 20, seed=1)
    ids = [bid for _, bid, _ in wl]
    assert ids[:10] == list(range(8)) + [0, 1]
    a = list(Workload("zipf", 100, 50, seed=2))
    b = list(Workload("zipf", 100, 50, seed=2))
    assert a == b
    hot = [bid for _, bid, _ in Workload("singlehot", 100, 30, seed=3)]
    assert set(hot) == {0}
    with pytest.raises(ValueError):
        Workload("bogus", 8, 5)


def test_payload_bytes_deterministic_and_sized():
    assert payload_bytes(5, 1, 0) == b""
    assert len(payload_bytes(5, 1, 100)) == 100
    assert payload_bytes(5, 1, 100) == payload_bytes(5, 1, 100)
    assert payload_bytes(5, 1, 100) != payload_bytes(5, 2, 100)


def test_run_experiment_row_and_determinism():
    cfg = _cfg()
    wl = Workload("roundrobin", cfg.n, 600, seed=cfg.seed)
    a = run_experiment(cfg, wl)
    b = run_experiment(cfg, Workload("roundrobin", cfg.n, 600, seed=cfg.seed))
    assert csv_text([a]) == csv_text([b])          # byte-identical CSV
    assert a["overhead"] > 1
    assert len(a.row().split(",")) == len(CSV_COLUMNS)


def test_different_seed_changes_csv():
    cfg = _cfg()
    wl = Workload("roundrobin", cfg.n, 300, seed=cfg.seed)
    a = run_experiment(cfg, wl)
    cfg2 = with_overrides(cfg, seed=34)
    b = run_experiment(cfg2, Workload("roundrobin", cfg2.n, 300, seed=cfg2.seed))
    assert a.row() != b.row()


def test_oracle_pass_and_divergence_detection():
    cfg = _cfg(payload_mode="full")
    out = run_oracle_check(cfg, Workload("uniform", cfg.n, 400, seed=5))
    assert out.ok

    # harness self-test: skipping a single position-map update must surface
    # as a reported failure, not pass silently
    from poram import posmap as posmap_mod
    original = posmap_mod.PlainPositionMap.set_server
    state = {"calls": 0}

    def skipping(self, block_id, partition, level, index):
        state["calls"] += 1
        if state["calls"] == 100:
            return  # drop exactly one update
        original(self, block_id, partition, level, index)

    posmap_mod.PlainPositionMap.set_server = skipping
    try:
        bad = run_oracle_check(_cfg(payload_mode="full", seed=77),
                               Workload("uniform", 256, 4000, seed=6))
    finally:
        posmap_mod.PlainPositionMap.set_server = original
    assert not bad.ok
    assert bad.divergence


def test_oracle_requires_full_payloads():
    with pytest.raises(ValueError):
        run_oracle_check(_cfg(payload_mode="meta"),
                         Workload("uniform", 256, 10, seed=1))


def test_markov_slot_check_against_closed_form():
    # spec-pinned example: p=1/4, q=1/2 gives rho=1/3, pi0=2/3, pi1=2/9
    pi = slot_chain_stationary(1 / 3, 3)
    assert pi[0] == pytest.approx(2 / 3)
    assert pi[1] == pytest.approx(2 / 9)
    report = markov_slot_check(0.25, 0.5, 400_000, seed=1)
    assert report.rho == pytest.approx((0.25 * 0.5) / (0.5 * 0.75))
    assert report.tv_distance < 0.02
    assert report.mean_error < 0.05


def test_sweep_eviction_rate_monotone_and_empty():
    base = _cfg(n=256)
    outcome = run_sweep("eviction-rate", [0.5, 2.0, 4.0], base, ops=1500)
    assert outcome.monotone_ok
    caches = [r["cache_high_water"] for r in outcome.results]
    assert caches[0] > caches[-1]

    empty = run_sweep("eviction-rate", [], base)
    assert empty.monotone_ok and empty.results == []
    assert csv_text(empty.results) == ",".join(CSV_COLUMNS) + "\n"


def test_sweep_cache_cap_axis():
    base = _cfg(n=256, nu=1.0)
    outcome = run_sweep("client-storage-k", [1.0, 4.0], base, ops=1500)
    assert len(outcome.results) == 2
    assert outcome.results[0]["overhead"] >= outcome.results[1]["overhead"] * 0.98


def test_trace_statistics_uniform():
    cfg = _cfg(n=1024, seed=11)
    wl = Workload("roundrobin", cfg.n, 4000, seed=cfg.seed)
    res = run_experiment(cfg, wl, record_trace=True)
    assert len(res.trace) == 4000
    assert uniform_chi2_pvalue(res.trace, cfg.partitions) > 0.001

    hot = run_experiment(cfg, Workload("singlehot", cfg.n, 4000, seed=cfg.seed),
                         record_trace=True)
    assert uniform_chi2_pvalue(hot.trace, cfg.partitions) > 0.001
    assert two_trace_chi2_pvalue(res.trace, hot.trace, cfg.partitions) > 0.001


# -- CLI ---------------------------------------------------------------------------


def _run_cli(*argv):
    return subprocess.run([sys.executable, "-m", "poram.cli", *argv],
                          capture_output=True, text=True, timeout=300)


def test_cli_simulate_csv_deterministic(tmp_path):
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    base = ("simulate", "--n", "256", "--payload", "meta", "--ops", "400",
            "--capacity", "analytic", "--seed", "5")
    assert _run_cli(*base, "--csv", str(out_a)).returncode == 0
    assert _run_cli(*base, "--csv", str(out_b)).returncode == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    header = out_a.read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)


def test_cli_config_file_with_flag_override(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("n = 256\nblock_size = 16\nnu = 1.0\nseed = 3\n"
                    "payload_mode = meta\ncapacity_mode = analytic\n")
    out = _run_cli("simulate", "--config", str(conf), "--nu", "2.0",
                   "--ops", "200", "--csv", "-")
    assert out.returncode == 0
    row = out.stdout.splitlines()[1].split(",")
    assert row[CSV_COLUMNS.index("nu")] == "2"


def test_cli_oracle_exit_code():
    out = _run_cli("oracle", "--n", "256", "--block-size", "16", "--ops", "300",
                   "--capacity", "analytic", "--capacity-k", "2",
                   "--capacity-c", "3", "--seed", "2")
    assert out.returncode == 0
    assert "PASS" in out.stdout


def test_cli_sweep_empty_grid(tmp_path):
    out = _run_cli("sweep", "--n", "256", "--payload", "meta", "--capacity",
                   "analytic", "--axis", "eviction-rate", "--values", "",
                   "--csv", "-")
    assert out.returncode == 0
    assert out.stdout.splitlines()[0] == ",".join(CSV_COLUMNS)
