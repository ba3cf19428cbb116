"""Leakage analysis for small-block sharded storage.

A file of l bytes sliced into s-byte blocks needs ceil(l/s) blocks to
reconstruct (one block when l < s); with blocks placed independently and
uniformly over N nodes, compromising n specific nodes recovers the file
with probability (n/N)**blocks. Expected leaked bytes over a trace is
the probability-weighted byte sum, and the leakage ratio divides by the
trace total.

The Monte Carlo estimator replays the placement experiment per trial: a
compromised set of n nodes is sampled, every block of every file is
dropped on an i.i.d. uniform node, and the file counts as leaked only
when all of its blocks land on compromised nodes. Whether a given file's
blocks all landed on the compromised set is evaluated lazily through the
number of placements until the first non-compromised node (a geometric
draw), which is distribution-identical to placing every block and far
cheaper for multi-megabyte files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError, TraceFormatError


@dataclass(frozen=True)
class TraceRecord:
    name: str
    size: int  # bytes

    def __post_init__(self):
        if self.size < 1:
            raise ScenarioError(f"trace record {self.name!r} has size < 1")


@dataclass(frozen=True)
class LeakageScenario:
    """n of N storage nodes compromised, s-byte blocks.

    vm_count is carried for reporting only; the closed forms do not use it.
    """

    total_nodes: int
    compromised_nodes: int
    block_size: int
    vm_count: int = 0

    def __post_init__(self):
        if self.total_nodes < 1:
            raise ScenarioError("need at least one storage node")
        if not 1 <= self.compromised_nodes <= self.total_nodes:
            raise ScenarioError(
                f"compromised nodes must lie in [1, {self.total_nodes}]")
        if self.block_size < 1:
            raise ScenarioError("block size must be >= 1")


@dataclass
class LeakageReport:
    scenario: LeakageScenario
    per_record: list[float]
    expected_bytes: float
    total_bytes: int

    @property
    def ratio(self) -> float:
        return self.expected_bytes / self.total_bytes

    def to_dict(self, include_per_record=False) -> dict:
        out = {
            "scenario": {
                "N": self.scenario.total_nodes,
                "n": self.scenario.compromised_nodes,
                "block_size": self.scenario.block_size,
                "vm_count": self.scenario.vm_count,
            },
            "expected_leaked_bytes": self.expected_bytes,
            "total_bytes": self.total_bytes,
            "leakage_ratio": self.ratio,
        }
        if include_per_record:
            out["per_record"] = self.per_record
        return out


def required_blocks(size: int, block_size: int) -> int:
    """Blocks an attacker needs to reconstruct a file of `size` bytes."""
    if size < 1 or block_size < 1:
        raise ScenarioError("sizes must be >= 1")
    if size < block_size:
        return 1
    return math.ceil(size / block_size)


def leak_probability(size: int, block_size: int, n: int, total: int) -> float:
    """Probability the file leaks when n of `total` nodes are compromised."""
    if n > total:
        raise ScenarioError("compromised nodes exceed the cluster size")
    if n < 1 or total < 1:
        raise ScenarioError("node counts must be >= 1")
    return (n / total) ** required_blocks(size, block_size)


def expected_leakage(trace: list[TraceRecord], scenario: LeakageScenario) -> LeakageReport:
    """Closed-form expected leaked bytes and ratio over a trace."""
    if not trace:
        raise ScenarioError("trace is empty")
    per_record = [
        leak_probability(r.size, scenario.block_size,
                         scenario.compromised_nodes, scenario.total_nodes)
        for r in trace
    ]
    expected = sum(p * r.size for p, r in zip(per_record, trace))
    return LeakageReport(scenario, per_record, expected, sum(r.size for r in trace))


@dataclass
class MonteCarloEstimate:
    mean_bytes: float
    stderr_bytes: float
    trials: int
    total_bytes: int

    @property
    def ratio(self) -> float:
        return self.mean_bytes / self.total_bytes


def monte_carlo_leakage(trace: list[TraceRecord], scenario: LeakageScenario,
                        trials: int, seed: int,
                        chunk: int = 1000) -> MonteCarloEstimate:
    """Simulate the block-placement experiment; deterministic for a seed."""
    if not trace:
        raise ScenarioError("trace is empty")
    if trials < 1:
        raise ScenarioError("need at least one trial")
    n, total = scenario.compromised_nodes, scenario.total_nodes
    sizes = np.array([r.size for r in trace], dtype=np.float64)
    blocks = np.array(
        [required_blocks(r.size, scenario.block_size) for r in trace],
        dtype=np.int64)
    rng = np.random.default_rng(seed)
    totals = np.empty(trials, dtype=np.float64)
    miss_p = 1.0 - n / total
    done = 0
    while done < trials:
        batch = min(chunk, trials - done)
        # The compromised set's identity does not change the leak law
        # (placement is uniform), but sample it to keep the experiment
        # faithful to the protocol and the stream seed-stable.
        for _ in range(batch):
            rng.choice(total, size=n, replace=False)
        if miss_p == 0.0:
            leaked = np.ones((batch, len(trace)), dtype=bool)
        else:
            placements_until_miss = rng.geometric(miss_p, size=(batch, len(trace)))
            leaked = placements_until_miss > blocks
        totals[done:done + batch] = leaked @ sizes
        done += batch
    mean = float(np.mean(totals))
    stderr = 0.0
    if trials > 1:
        stderr = float(np.std(totals, ddof=1) / math.sqrt(trials))
    return MonteCarloEstimate(mean, stderr, trials, int(sizes.sum()))


def load_trace(path) -> list[TraceRecord]:
    """Read a `name,size_bytes` CSV (no header, UTF-8)."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            name, sep, size_text = line.rpartition(",")
            if not sep:
                raise TraceFormatError(
                    f"line {lineno}: expected 'name,size_bytes'", lineno)
            try:
                size = int(size_text)
            except ValueError:
                raise TraceFormatError(
                    f"line {lineno}: size {size_text!r} is not an integer", lineno)
            if size < 1:
                raise TraceFormatError(f"line {lineno}: size must be >= 1", lineno)
            records.append(TraceRecord(name, size))
    if not records:
        raise TraceFormatError("trace file is empty", None)
    return records


def save_trace(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        for r in records:
            writer.writerow([r.name, r.size])


def synthetic_trace(total_bytes: int, seed: int, count: int | None = None,
                    median_size: int = 16384, sigma: float = 1.8,
                    ) -> list[TraceRecord]:
    """Log-normal file-size trace normalized to hit `total_bytes` (within 1%).

    With a fixed `count` the draws are rescaled to the target; otherwise
    files are drawn until the running total reaches it and the last file
    is trimmed, so the total is met exactly.
    """
    if total_bytes < 1:
        raise ScenarioError("target total must be >= 1 byte")
    rng = np.random.default_rng(seed)
    mu = math.log(median_size)
    if count is not None:
        raw = rng.lognormal(mu, sigma, size=count)
        scale = total_bytes / raw.sum()
        sizes = np.maximum(1, np.rint(raw * scale).astype(np.int64))
    else:
        sizes = []
        running = 0
        while running < total_bytes:
            size = max(1, int(round(rng.lognormal(mu, sigma))))
            if running + size > total_bytes:
                size = total_bytes - running
                if size < 1:
                    break
            sizes.append(size)
            running += size
    return [TraceRecord(f"file-{i:06d}", int(s)) for i, s in enumerate(sizes)]
