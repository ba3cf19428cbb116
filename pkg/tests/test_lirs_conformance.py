"""Decision-for-decision conformance of the LIRS policy against the
independent reference simulator on synthetic traces."""

import numpy as np
import pytest

from hvsto.hybrid_cache import LirsPolicy
from lirs_reference import ReferenceLirs

TRACE_LEN = 10_000


def loop_trace(seed):
    # Cyclic sweep slightly wider than the cache, the classic LRU-killer.
    rng = np.random.default_rng([seed, 31])
    width = 300
    out = []
    while len(out) < TRACE_LEN:
        out.extend(range(width))
        if rng.integers(0, 4) == 0:
            out.append(int(rng.integers(0, width)))
    return out[:TRACE_LEN]


def scan_trace(seed):
    # A resident hot set interleaved with long one-touch scans.
    rng = np.random.default_rng([seed, 32])
    out = []
    scan_next = 10_000
    while len(out) < TRACE_LEN:
        for _ in range(int(rng.integers(3, 10))):
            out.append(int(rng.integers(0, 200)))
        for _ in range(int(rng.integers(20, 120))):
            out.append(scan_next)
            scan_next += 1
    return out[:TRACE_LEN]


def mixed_trace(seed):
    rng = np.random.default_rng([seed, 33])
    out = []
    while len(out) < TRACE_LEN:
        kind = rng.integers(0, 3)
        if kind == 0:  # skewed point accesses
            out.extend(int(x) for x in rng.zipf(1.4, size=30) % 600)
        elif kind == 1:  # sequential burst
            start = int(rng.integers(0, 1500))
            out.extend(range(start, start + int(rng.integers(5, 40))))
        else:  # uniform noise
            out.extend(int(x) for x in rng.integers(0, 1500, size=20))
    return out[:TRACE_LEN]


TRACES = {"loop": loop_trace, "scan": scan_trace, "mixed": mixed_trace}


@pytest.mark.parametrize("name", sorted(TRACES))
@pytest.mark.parametrize("capacity,hir", [(256, 2), (100, 1), (64, 8)])
def test_decision_for_decision_match(name, capacity, hir):
    trace = TRACES[name](7)
    policy = LirsPolicy(capacity, hir)
    reference = ReferenceLirs(capacity, hir)
    for step, key in enumerate(trace):
        got = policy.access(key)
        want = reference.access(key)
        assert got == want, f"{name}@{step}: key {key}: {got} != {want}"
        assert policy.resident == reference.resident
