"""Command-line harness: simulate, oracle, validate-bounds, sweep, serve."""

import argparse
import logging
import sys
import time

from . import simulator
from .blockstore import FileBlockStore, MemoryBlockStore
from .config import OramConfig, load_config, parse_config_text, with_overrides
from .remote import serve as serve_store
from .simulator import (ExperimentResult, OracleOutcome, cache_capacity_bound,
                        csv_text, markov_slot_check, partition_capacity_bound,
                        run_experiment, run_oracle_check, run_sweep)
from .workload import KINDS, Workload

log = logging.getLogger("poram")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--n", type=int)
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--partitions", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--evict", choices=("seq", "rand"), dest="evict_algo")
    p.add_argument("--piggyback", action=argparse.BooleanOptionalAction)
    p.add_argument("--concurrent", action=argparse.BooleanOptionalAction)
    p.add_argument("--recursive", action=argparse.BooleanOptionalAction)
    p.add_argument("--compress", action=argparse.BooleanOptionalAction,
                   dest="compression")
    p.add_argument("--delete-on-read", action=argparse.BooleanOptionalAction,
                   dest="delete_on_read")
    p.add_argument("--compressed-posmap", action=argparse.BooleanOptionalAction,
                   dest="compressed_posmap")
    p.add_argument("--payload", choices=("full", "meta"), dest="payload_mode")
    p.add_argument("--capacity", choices=("empirical", "analytic"),
                   dest="capacity_mode")
    p.add_argument("--capacity-k", type=float, dest="capacity_k")
    p.add_argument("--capacity-c", type=float, dest="capacity_c")
    p.add_argument("--work-factor", type=int, dest="work_factor")
    p.add_argument("--max-cache-blocks", type=int, dest="max_cache_blocks")
    p.add_argument("--recursion-threshold", type=int, dest="recursion_threshold")
    p.add_argument("--seed", type=int)


_CONFIG_KEYS = ("n", "block_size", "partitions", "nu", "evict_algo",
                "piggyback", "concurrent", "recursive", "compression",
                "delete_on_read", "compressed_posmap", "payload_mode",
                "capacity_mode", "capacity_k", "capacity_c", "work_factor",
                "max_cache_blocks", "recursion_threshold", "seed")


def _build_config(args) -> OramConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    if args.config:
        return load_config(args.config, overrides)
    values = {k: v for k, v in overrides.items() if v is not None}
    if "n" not in values:
        raise SystemExit("either --config or --n is required")
    return OramConfig(**values)


def _add_workload_flags(p: argparse.ArgumentParser):
    p.add_argument("--workload", choices=KINDS, default="roundrobin")
    p.add_argument("--ops", type=int, help="request count (default 3N)")
    p.add_argument("--write-fraction", type=float, default=0.5)
    p.add_argument("--zipf-s", type=float, default=1.2)


def _workload(args, cfg: OramConfig) -> Workload:
    return Workload(args.workload, cfg.n, args.ops or 3 * cfg.n,
                    write_fraction=args.write_fraction, zipf_s=args.zipf_s,
                    seed=cfg.seed)


def _write_csv(path: str, results):
    text = csv_text(results)
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_simulate(args) -> int:
    cfg = _build_config(args)
    workload = _workload(args, cfg)
    started = time.monotonic()
    result = run_experiment(cfg, workload, progress=True)
    elapsed = time.monotonic() - started
    log.info("run finished in %.1f s (excluded from the CSV)", elapsed)
    _write_csv(args.csv, [result])
    log.info("overhead %.2f blocks/access, cache %.0f (%.2f sqrt(N)), "
             "partition peak %.2f sqrt(N), server peak %.2f N",
             result["overhead"], result["cache_high_water"],
             result["cache_ratio"], result["partition_ratio"],
             result["server_ratio"])
    return 0


def _oracle_configs(cfg: OramConfig, all_modes: bool):
    if not all_modes:
        yield "configured", cfg
        return
    for evict in ("seq", "rand"):
        for concurrent in (False, True):
            for recursive in (False, True):
                nu = 2.0 if evict == "rand" else 1.0
                label = (f"{evict}+{'conc' if concurrent else 'sync'}"
                         f"+{'rec' if recursive else 'flat'}")
                yield label, with_overrides(cfg, evict_algo=evict, nu=nu,
                                            concurrent=concurrent,
                                            recursive=recursive)


def _cmd_oracle(args) -> int:
    cfg = _build_config(args)
    if cfg.payload_mode != "full":
        cfg = with_overrides(cfg, payload_mode="full")
    failures = 0
    for label, sub_cfg in _oracle_configs(cfg, args.all_modes):
        workload = _workload(args, sub_cfg)
        outcome = run_oracle_check(sub_cfg, workload)
        status = "PASS" if outcome.ok else f"FAIL ({outcome.divergence})"
        print(f"oracle {label}: {status} [{outcome.ops} ops]")
        failures += 0 if outcome.ok else 1
    return 1 if failures else 0


def _cmd_validate_bounds(args) -> int:
    cfg = _build_config(args)
    k, c = args.k, args.c
    checks = []

    report = markov_slot_check(1.0 / cfg.partitions, 2.0 / cfg.partitions,
                               args.chain_steps, seed=cfg.seed)
    checks.append(("slot chain TV distance "
                   f"{report.tv_distance:.4f} < 0.02", report.tv_distance < 0.02))
    checks.append((f"slot chain mean {report.empirical_mean:.4f} within 5% of "
                   f"{report.expected_mean:.4f}", report.mean_error < 0.05))

    cache_cfg = with_overrides(cfg, evict_algo="rand", nu=2.0, piggyback=False,
                               payload_mode="meta")
    cache_bound = cache_capacity_bound(cfg.n, k, c)
    part_bound = partition_capacity_bound(cfg.n, k, c)
    worst_cache = worst_part = 0
    for s in range(args.seeds):
        run_cfg = with_overrides(cache_cfg, seed=cfg.seed + s)
        res = run_experiment(run_cfg, Workload("roundrobin", cfg.n, 3 * cfg.n,
                                               seed=run_cfg.seed))
        worst_cache = max(worst_cache, res["cache_high_water"])
        worst_part = max(worst_part, res["partition_peak"])
    checks.append((f"cache high water {worst_cache} <= {cache_bound:.1f} "
                   f"over {args.seeds} seeds", worst_cache <= cache_bound))
    checks.append((f"partition load {worst_part} <= {part_bound:.1f} "
                   f"over {args.seeds} seeds", worst_part <= part_bound))

    conc_cfg = with_overrides(cfg, concurrent=True, payload_mode="meta")
    res = run_experiment(conc_cfg, Workload("roundrobin", cfg.n, 3 * cfg.n,
                                            seed=conc_cfg.seed))
    checks.append((f"per-step shuffle work {res['max_step_work']} <= "
                   f"{conc_cfg.step_budget}",
                   res["max_step_work"] <= conc_cfg.step_budget))
    checks.append((f"job latency {res['max_job_latency']} <= "
                   f"{conc_cfg.job_deadline}; late jobs {res['late_jobs']}",
                   res["late_jobs"] == 0))

    failures = 0
    for label, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}: {label}")
        failures += 0 if ok else 1
    return 1 if failures else 0


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    values = [float(v) for v in args.values.split(",")] if args.values else []
    outcome = run_sweep(args.axis, values, cfg, workload_kind=args.workload,
                        ops=args.ops, progress=False)
    _write_csv(args.csv, outcome.results)
    print(f"sweep {args.axis}: monotonicity "
          f"{'ok' if outcome.monotone_ok else 'VIOLATED'}")
    return 0 if outcome.monotone_ok else 1


def _cmd_serve(args) -> int:
    host, _, port = args.bind.rpartition(":")
    backend = (FileBlockStore(args.dir) if args.backend == "file"
               else MemoryBlockStore())
    log.info("serving %s backend on %s:%s", args.backend, host or "0.0.0.0",
             port)
    serve_store((host or "0.0.0.0", int(port)), backend)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poram",
        description="Partitioned ORAM simulator and block-store server")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one experiment run, CSV out")
    _add_config_flags(p)
    _add_workload_flags(p)
    p.add_argument("--csv", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("oracle", help="replay against a reference dictionary")
    _add_config_flags(p)
    _add_workload_flags(p)
    p.add_argument("--all-modes", action="store_true",
                   help="run all evict/concurrent/recursive combinations")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("validate-bounds",
                       help="empirical checks of the capacity theorems")
    _add_config_flags(p)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--chain-steps", type=int, default=10_000_000)
    p.set_defaults(func=_cmd_validate_bounds)

    p = sub.add_parser("sweep", help="grid of runs along one axis")
    _add_config_flags(p)
    _add_workload_flags(p)
    p.add_argument("--axis", choices=("eviction-rate", "client-storage-k"),
                   required=True)
    p.add_argument("--values", default="", help="comma-separated grid")
    p.add_argument("--csv", default="-")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("serve", help="run a block-store server")
    p.add_argument("--bind", default="127.0.0.1:7354")
    p.add_argument("--backend", choices=("mem", "file"), default="mem")
    p.add_argument("--dir", default="./poram-store")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
