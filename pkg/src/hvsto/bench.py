"""Benchmark harness: experiment sweeps over the simulated cluster.

All results are in simulated time under the configured cost model; a
fixed seed makes every sweep byte-reproducible. Rows are flat
(experiment, param, metric, value, unit, seed) records serialized to CSV
with the `experiment,param,metric,value,unit,seed` header.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .appliance import Appliance
from .hybrid_cache import CacheConfig
from .leakage import (
    LeakageScenario,
    TraceRecord,
    expected_leakage,
    monte_carlo_leakage,
)
from .mapping import MappingStore
from .node_store import (
    CostModel,
    IndexBlockService,
    IoRequest,
    Op,
    Status,
    StorageCluster,
)
from .placement import NodeRegistry, NodeSpec

CSV_HEADER = "experiment,param,metric,value,unit,seed"

# Seed-stream tags so each experiment draws from its own substream.
_STREAM_SNAPSHOT, _STREAM_BOOT, _STREAM_SCALE = 1, 2, 3


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    param: str
    metric: str
    value: float
    unit: str
    seed: int


def _format_value(value):
    if isinstance(value, bool):
        raise TypeError("boolean result values are not allowed")
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([r.experiment, r.param, r.metric,
                               _format_value(r.value), r.unit, str(r.seed)]))
    return "\n".join(lines) + "\n"


def write_rows(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(rows_to_csv(rows))


def rows_by_metric(rows, metric) -> dict:
    return {r.param: r.value for r in rows if r.metric == metric}


def parse_param(param) -> dict:
    out = {}
    for part in param.split(";"):
        key, _, val = part.partition("=")
        out[key] = val
    return out


def make_cluster(nodes, capacity_blocks=1 << 20, block_size=4096,
                 cost: CostModel | None = None, salt=0) -> StorageCluster:
    registry = NodeRegistry([NodeSpec(i, capacity_blocks) for i in range(nodes)],
                            salt=salt)
    return StorageCluster(registry, block_size, cost or CostModel())


_pattern_cache: dict = {}


def _pattern_block(i, block_size):
    key = (i & 0xFF, block_size)
    block = _pattern_cache.get(key)
    if block is None:
        block = _pattern_cache.setdefault(key, bytes([i & 0xFF]) * block_size)
    return block


class ChainMapper:
    """Delta-chain version mapping, the qcow-style comparison point.

    Each snapshot opens a fresh delta table; resolving an inherited block
    walks the chain and pays one remote metadata fetch per ancestor table
    consulted.
    """

    def __init__(self):
        self.deltas = [{}]

    def snapshot(self):
        self.deltas.append({})

    def write(self, vblock, addr):
        self.deltas[-1][vblock] = addr

    def lookup(self, vblock):
        """Returns (addr | None, ancestor tables consulted)."""
        hops = 0
        for delta in reversed(self.deltas):
            addr = delta.get(vblock)
            if addr is not None:
                return addr, hops
            hops += 1
        return None, hops - 1


def run_snapshot_latency(depths=10, bytes_per_read=2 * 2**20, nodes=5, seed=7,
                         block_size=4096, cost: CostModel | None = None):
    """Read the same region 5x at snapshot depths 0..depths, for the
    depth-3 index and for the chain baseline."""
    cost = cost or CostModel()
    nblocks = bytes_per_read // block_size
    rows = []

    # Depth-3 index side: metadata served through the SSD cache, data read
    # remotely every time so the index path is what varies.
    cluster = make_cluster(nodes, block_size=block_size, cost=cost)
    appl = Appliance(cluster, cache_config=CacheConfig(64 * 2**20, block_size))
    image, _ = appl.create_image(block_size, max(nblocks * 2, 16))
    session = appl.attach("vm0", image)
    for vb in range(nblocks):
        appl.write(session, vb * block_size, _pattern_block(vb, block_size))
    appl.flush_write_cache(session, "full")
    store = appl.store

    hvsto_latency = {}
    hvsto_fetches = {}
    for depth in range(depths + 1):
        lookups0 = store.stats.lookups
        fetches0 = store.stats.node_fetches
        t0 = session.clock_us
        for _ in range(5):
            for vb in range(nblocks):
                addr = appl.resolve(session, vb)
                resp = cluster.dispatch(
                    IoRequest(Op.READ, addr=addr, request_id=cluster.next_request_id()),
                    at=session.clock_us)
                session.clock_us = resp.completed_at_us
        hvsto_latency[depth] = (session.clock_us - t0) / 5
        hvsto_fetches[depth] = ((store.stats.node_fetches - fetches0)
                                / (store.stats.lookups - lookups0))
        if depth < depths:
            store.snapshot(session.head)

    # Chain baseline: no caches, every inherited lookup pays per-ancestor
    # remote metadata fetches.
    cluster2 = make_cluster(nodes, block_size=block_size, cost=cost)
    store2 = MappingStore(IndexBlockService(cluster2))
    chain = ChainMapper()
    chain_image, chain_v0 = store2.create_image(block_size, max(nblocks * 2, 16))
    head = chain_v0
    for vb in range(nblocks):
        key = store2.new_data_key(head)
        addr = cluster2.alloc_block(key)
        cluster2.write_block(addr, _pattern_block(vb, block_size))
        chain.write(vb, addr)
    hop_cost = cost.remote_rtt_us + cost.remote_media_us
    lane = cluster2.simulated_now()
    chain_latency = {}
    chain_fetches = {}
    for depth in range(depths + 1):
        t0 = lane
        hops_total = 0
        lookups = 0
        for _ in range(5):
            for vb in range(nblocks):
                addr, hops = chain.lookup(vb)
                lane += hops * hop_cost
                hops_total += hops
                lookups += 1
                resp = cluster2.dispatch(
                    IoRequest(Op.READ, addr=addr, request_id=cluster2.next_request_id()),
                    at=lane)
                lane = resp.completed_at_us
        chain_latency[depth] = (lane - t0) / 5
        chain_fetches[depth] = hops_total / lookups
        if depth < depths:
            chain.snapshot()

    for depth in range(depths + 1):
        param = f"depth={depth}"
        rows.append(ResultRow("snapshot-latency", param, "hvsto_mean_pass_us",
                              hvsto_latency[depth], "us", seed))
        rows.append(ResultRow("snapshot-latency", param, "chain_mean_pass_us",
                              chain_latency[depth], "us", seed))
        rows.append(ResultRow("snapshot-latency", param, "hvsto_fetches_per_lookup",
                              hvsto_fetches[depth], "count", seed))
        rows.append(ResultRow("snapshot-latency", param, "chain_fetches_per_lookup",
                              chain_fetches[depth], "count", seed))
    return rows


BOOT_MODES = ("multi-cache", "multi-nocache", "single-nocache")


def _boot_scripts(vm_count, boot_reads, golden_blocks, seed):
    """Boot read scripts: an 80% shared prefix over the hot region plus a
    per-VM tail over the whole image."""
    hot_blocks = max(1, golden_blocks // 8)
    shared_len = int(boot_reads * 0.8)
    shared = np.random.default_rng([seed, _STREAM_BOOT, 0]).integers(
        0, hot_blocks, size=shared_len).tolist()
    scripts = []
    for vm in range(vm_count):
        rng = np.random.default_rng([seed, _STREAM_BOOT, vm + 1])
        tail = rng.integers(0, golden_blocks, size=boot_reads - shared_len).tolist()
        scripts.append(shared + tail)
    return scripts


def _build_golden(appl, block_size, golden_blocks):
    cluster, store = appl.cluster, appl.store
    image, v0 = store.create_image(block_size, golden_blocks)
    for vb in range(golden_blocks):
        key = store.new_data_key(v0)
        addr = cluster.alloc_block(key)
        cluster.write_block(addr, _pattern_block(vb, block_size))
        store.map_write(v0, vb, addr)
    store.snapshot(v0)
    appl.register_golden(v0)
    return v0


def run_bootstorm(vm_counts=range(1, 12), modes=BOOT_MODES, nodes=5, seed=7,
                  block_size=4096, cost: CostModel | None = None,
                  boot_reads=2048, golden_blocks=16384, ssd_bytes=32 * 2**20):
    """Boot 1..V VMs concurrently off a shared golden image and record the
    makespan from first start to last finish."""
    cost = cost or CostModel()
    rows = []
    for mode in modes:
        node_count = 1 if mode == "single-nocache" else nodes
        for vm_count in vm_counts:
            cluster = make_cluster(node_count, block_size=block_size, cost=cost)
            cfg = CacheConfig(ssd_bytes, block_size) if mode == "multi-cache" else None
            appl = Appliance(cluster, cache_config=cfg)
            golden = _build_golden(appl, block_size, golden_blocks)
            store = appl.store
            images = [store.clone_image(golden)[0] for _ in range(vm_count)]
            t0 = cluster.simulated_now()
            sessions = []
            for i, image in enumerate(images):
                s = appl.attach(f"vm{i}", image)
                s.clock_us = t0
                sessions.append(s)
            scripts = _boot_scripts(vm_count, boot_reads, golden_blocks, seed)

            heap = [(t0, i, 0) for i in range(vm_count)]
            heapq.heapify(heap)
            while heap:
                _, i, pos = heapq.heappop(heap)
                session = sessions[i]
                vb = scripts[i][pos]
                appl.read(session, vb * block_size, block_size)
                if pos + 1 < len(scripts[i]):
                    heapq.heappush(heap, (session.clock_us, i, pos + 1))
            makespan = max(s.clock_us for s in sessions) - t0
            rows.append(ResultRow("bootstorm", f"mode={mode};vms={vm_count}",
                                  "makespan_us", makespan, "us", seed))
    return rows


def _scale_file_plan(files, seed, vm_tag, slot_blocks=8, block_size=4096):
    rng = np.random.default_rng([seed, _STREAM_SCALE, vm_tag])
    sizes = rng.integers(1024, 16385, size=files).tolist()
    plan = []
    for i, size in enumerate(sizes):
        plan.append({"start": i * slot_blocks, "size": int(size),
                     "blocks": (int(size) + block_size - 1) // block_size})
    return plan, rng


def run_scalability(storage_nodes=range(1, 6), servers=range(1, 4),
                    vms_per_server=4, files=500, transactions=200, seed=7,
                    block_size=4096, cost: CostModel | None = None,
                    ssd_bytes=32 * 2**20, slot_blocks=8):
    """Postmark-like create + 50/50 read/append mix; reports transactions
    per simulated second per virtualization server."""
    cost = cost or CostModel()
    rows = []
    capacity = files * slot_blocks + slot_blocks
    for server_count in servers:
        for node_count in storage_nodes:
            cluster = make_cluster(node_count, block_size=block_size, cost=cost)
            store = MappingStore(IndexBlockService(cluster))
            appliances = [
                Appliance(cluster, store=store, name=f"srv{j}",
                          cache_config=CacheConfig(ssd_bytes, block_size,
                                                   per_vm_write_buffer=64 * 1024))
                for j in range(server_count)
            ]
            vms = []  # (appliance, session, plan, rng, server index)
            for j, appl in enumerate(appliances):
                for k in range(vms_per_server):
                    image, _ = store.create_image(block_size, capacity)
                    session = appl.attach(f"srv{j}-vm{k}", image)
                    plan, rng = _scale_file_plan(files, seed, j * vms_per_server + k,
                                                 slot_blocks, block_size)
                    vms.append((appl, session, plan, rng, j))

            # Create phase: lay every file out in its slot.
            for appl, session, plan, _, _ in vms:
                for entry in plan:
                    appl.write(session, entry["start"] * block_size,
                               _pattern_block(entry["start"], block_size)[:entry["size"]])
                appl.flush_write_cache(session, "full")

            # Barrier, then the timed transaction phase.
            barrier = max(s.clock_us for _, s, _, _, _ in vms)
            for _, session, _, _, _ in vms:
                session.clock_us = barrier
            heap = [(barrier, i, 0) for i in range(len(vms))]
            heapq.heapify(heap)
            while heap:
                _, i, done = heapq.heappop(heap)
                appl, session, plan, rng, _ = vms[i]
                entry = plan[int(rng.integers(0, len(plan)))]
                if rng.integers(0, 2) == 0:
                    appl.read(session, entry["start"] * block_size, entry["size"])
                else:
                    # Append one block, staying inside the file's slot.
                    offset = entry["start"] + min(entry["blocks"], slot_blocks - 1)
                    appl.write(session, offset * block_size,
                               _pattern_block(offset, block_size))
                    entry["blocks"] = min(entry["blocks"] + 1, slot_blocks - 1)
                if done + 1 < transactions:
                    heapq.heappush(heap, (session.clock_us, i, done + 1))
            param = f"nodes={node_count};servers={server_count}"
            tps_values = []
            for j in range(server_count):
                lanes = [s.clock_us for _, s, _, _, srv in vms if srv == j]
                span_s = (max(lanes) - barrier) / 1e6
                tps_values.append(vms_per_server * transactions / span_s)
            rows.append(ResultRow("scalability", param, "tps_per_server",
                                  sum(tps_values) / len(tps_values), "tps", seed))
            rows.append(ResultRow("scalability", param, "tps_aggregate",
                                  sum(tps_values), "tps", seed))
    return rows


def run_leakage_sweep(trace: list[TraceRecord], total_nodes, n_values, s_values,
                      mc_trials: int | None = None, seed=7):
    """Closed-form (and optionally Monte Carlo) leakage per (n, s) point."""
    rows = []
    reports = []
    for s in s_values:
        for n in n_values:
            scenario = LeakageScenario(total_nodes, n, s)
            report = expected_leakage(trace, scenario)
            reports.append(report)
            param = f"n={n};s={s}"
            rows.append(ResultRow("leakage", param, "leak_ratio",
                                  report.ratio, "ratio", seed))
            rows.append(ResultRow("leakage", param, "expected_leaked_bytes",
                                  report.expected_bytes, "bytes", seed))
            if mc_trials:
                est = monte_carlo_leakage(trace, scenario, mc_trials, [seed, n, s])
                rows.append(ResultRow("leakage", param, "mc_ratio",
                                      est.ratio, "ratio", seed))
                rows.append(ResultRow("leakage", param, "mc_stderr_bytes",
                                      est.stderr_bytes, "bytes", seed))
    return rows, reports
