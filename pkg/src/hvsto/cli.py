"""hvsto command line: cluster config, benchmarks, leakage analysis.

Examples:
    hvsto cluster init --config c.json --nodes 5
    hvsto bench snapshot-latency --depths 10 --out r.csv --plot
    hvsto bench bootstorm --vms 1..11 --cache on,off,nfs-like --nodes 5 --out b.csv
    hvsto bench scale --nodes 1..5 --servers 1..3 --out s.csv
    hvsto leakage --synthetic --N 100 --n 1..25 --s 4096,8192 \\
        --monte-carlo 10000 --seed 7 --out l.csv --report l.json
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import bench, leakage
from .placement import NodeRegistry, NodeSpec, save_cluster_config

DEFAULT_TRACE_BYTES = int(20.86 * 2**30)

_CACHE_MODES = {"on": "multi-cache", "off": "multi-nocache",
                "nfs-like": "single-nocache"}


def parse_range(text) -> list[int]:
    """'1..11' -> [1..11]; '5' -> [5]; '1,3,5' -> [1, 3, 5]."""
    if ".." in text:
        lo, _, hi = text.partition("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",")]


def _maybe_plot(args, rows):
    if getattr(args, "plot", False):
        from . import plots

        prefix = os.path.splitext(args.out)[0]
        for path in plots.render_figures(rows, prefix):
            print(f"wrote {path}")


def cmd_cluster_init(args):
    registry = NodeRegistry(
        [NodeSpec(i, args.capacity_blocks) for i in range(args.nodes)],
        salt=args.salt)
    save_cluster_config(args.config, registry, args.block_size)
    print(f"wrote {args.config}")
    return 0


def cmd_snapshot_latency(args):
    rows = bench.run_snapshot_latency(depths=args.depths, nodes=args.nodes,
                                      seed=args.seed)
    bench.write_rows(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    _maybe_plot(args, rows)
    return 0


def cmd_bootstorm(args):
    modes = []
    for token in args.cache.split(","):
        mode = _CACHE_MODES.get(token.strip())
        if mode is None:
            print(f"unknown cache mode {token!r}; use on|off|nfs-like",
                  file=sys.stderr)
            return 2
        modes.append(mode)
    rows = bench.run_bootstorm(vm_counts=parse_range(args.vms), modes=modes,
                               nodes=args.nodes, seed=args.seed)
    bench.write_rows(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    _maybe_plot(args, rows)
    return 0


def cmd_scale(args):
    rows = bench.run_scalability(storage_nodes=parse_range(args.nodes),
                                 servers=parse_range(args.servers),
                                 vms_per_server=args.vms_per_server,
                                 transactions=args.transactions,
                                 seed=args.seed)
    bench.write_rows(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    _maybe_plot(args, rows)
    return 0


def cmd_leakage(args):
    if args.trace:
        trace = leakage.load_trace(args.trace)
    else:
        trace = leakage.synthetic_trace(args.total_bytes, args.seed,
                                        count=args.files)
    rows, reports = bench.run_leakage_sweep(
        trace, args.N, parse_range(args.n),
        [int(s) for s in args.s.split(",")],
        mc_trials=args.monte_carlo, seed=args.seed)
    bench.write_rows(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    if args.report:
        payload = {
            "trace_files": len(trace),
            "trace_bytes": sum(r.size for r in trace),
            "points": [r.to_dict(include_per_record=args.per_file)
                       for r in reports],
        }
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
        print(f"wrote {args.report}")
    _maybe_plot(args, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvsto", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    cluster = sub.add_parser("cluster", help="cluster configuration")
    cluster_sub = cluster.add_subparsers(dest="cluster_command", required=True)
    init = cluster_sub.add_parser("init", help="write a cluster config file")
    init.add_argument("--config", required=True)
    init.add_argument("--nodes", type=int, default=5)
    init.add_argument("--capacity-blocks", type=int, default=1 << 20)
    init.add_argument("--block-size", type=int, default=4096)
    init.add_argument("--salt", type=int, default=0)
    init.set_defaults(func=cmd_cluster_init)

    bench_p = sub.add_parser("bench", help="run a benchmark sweep")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)

    snap = bench_sub.add_parser("snapshot-latency",
                                help="read latency vs snapshot depth")
    snap.add_argument("--depths", type=int, default=10)
    snap.add_argument("--nodes", type=int, default=5)
    snap.add_argument("--seed", type=int, default=7)
    snap.add_argument("--out", required=True)
    snap.add_argument("--plot", action="store_true")
    snap.set_defaults(func=cmd_snapshot_latency)

    boot = bench_sub.add_parser("bootstorm", help="concurrent VM boot makespan")
    boot.add_argument("--vms", default="1..11")
    boot.add_argument("--cache", default="on,off,nfs-like",
                      help="comma list of on|off|nfs-like")
    boot.add_argument("--nodes", type=int, default=5)
    boot.add_argument("--seed", type=int, default=7)
    boot.add_argument("--out", required=True)
    boot.add_argument("--plot", action="store_true")
    boot.set_defaults(func=cmd_bootstorm)

    scale = bench_sub.add_parser("scale", help="throughput vs storage nodes")
    scale.add_argument("--nodes", default="1..5")
    scale.add_argument("--servers", default="1..3")
    scale.add_argument("--vms-per-server", type=int, default=4)
    scale.add_argument("--transactions", type=int, default=200)
    scale.add_argument("--seed", type=int, default=7)
    scale.add_argument("--out", required=True)
    scale.add_argument("--plot", action="store_true")
    scale.set_defaults(func=cmd_scale)

    leak = sub.add_parser("leakage", help="leakage ratio sweep over (n, s)")
    source = leak.add_mutually_exclusive_group(required=True)
    source.add_argument("--trace", help="trace CSV: name,size_bytes per line")
    source.add_argument("--synthetic", action="store_true",
                        help="generate a log-normal synthetic trace")
    leak.add_argument("--total-bytes", type=int, default=DEFAULT_TRACE_BYTES)
    leak.add_argument("--files", type=int, default=None,
                      help="fix the synthetic trace file count")
    leak.add_argument("--N", type=int, required=True, dest="N")
    leak.add_argument("--n", required=True, help="compromised-node sweep, e.g. 1..25")
    leak.add_argument("--s", required=True, help="block sizes, e.g. 4096,8192")
    leak.add_argument("--monte-carlo", type=int, default=None,
                      help="add Monte Carlo columns with this many trials")
    leak.add_argument("--seed", type=int, default=7)
    leak.add_argument("--out", required=True)
    leak.add_argument("--report", help="also write a JSON report")
    leak.add_argument("--per-file", action="store_true",
                      help="include per-file probabilities in the report")
    leak.add_argument("--plot", action="store_true")
    leak.set_defaults(func=cmd_leakage)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
