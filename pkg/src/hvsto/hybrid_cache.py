"""Local SSD cache model: three fixed partitions with distinct policies.

25% of the SSD caches index-node blocks under an LRU whose two-stage
eviction first refreshes protection marks (index blocks of the latest
version of every attached image are protected) and then drops the oldest
unprotected entry; if everything is protected the incoming block is
simply not admitted. 50% caches shared golden-image data blocks under
LIRS, which keeps blocks with small reuse distance resident and lets
one-touch scans flow through the small HIR region. The remaining 25% is
split evenly among attached VMs for their private read cache and write
buffer; reads detect sequential runs and request a prefetch window, and
writes coalesce in the buffer until it fills.

Partition budgets are asserted after every mutation.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

LIR = 0
HIR = 1


@dataclass
class CacheConfig:
    total_capacity: int
    block_size: int = 4096
    metadata_frac: float = 0.25
    image_frac: float = 0.50
    active_frac: float = 0.25
    per_vm_write_buffer: int = 100 * 2**20
    prefetch_window: int = 32
    sequential_threshold: int = 2
    lirs_hir_fraction: float = 0.01

    def __post_init__(self):
        if abs(self.metadata_frac + self.image_frac + self.active_frac - 1.0) > 1e-9:
            raise ValueError("cache partition fractions must sum to 1")
        if self.total_capacity < 0:
            raise ValueError("total capacity must be >= 0")

    def _aligned(self, frac):
        return int(self.total_capacity * frac) // self.block_size * self.block_size

    @property
    def metadata_capacity(self):
        return self._aligned(self.metadata_frac)

    @property
    def image_capacity(self):
        return self._aligned(self.image_frac)

    @property
    def active_capacity(self):
        return self._aligned(self.active_frac)


class MetadataCache:
    """Protected LRU over index-node blocks.

    protected_provider returns the set of currently protected addresses;
    it is consulted at eviction time (stage one of the two-stage rule).
    """

    def __init__(self, capacity_bytes, block_size, protected_provider=None):
        self.capacity = capacity_bytes
        self.block_size = block_size
        self.protected_provider = protected_provider
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.bypasses = 0
        self.on_evict = None

    @property
    def used_bytes(self):
        return len(self._entries) * self.block_size

    def get(self, addr):
        with self._lock:
            data = self._entries.get(addr)
            if data is None:
                self.misses += 1
                return None
            self._entries.move_to_end(addr)
            self.hits += 1
            return data

    def put(self, addr, data) -> bool:
        """Admit a block; False when every resident entry is protected."""
        with self._lock:
            if addr in self._entries:
                self._entries[addr] = data
                self._entries.move_to_end(addr)
                return True
            if self.capacity < self.block_size:
                self.bypasses += 1
                return False
            while self.used_bytes + self.block_size > self.capacity:
                # Stage one: refresh protection marks from the resident VMs.
                protected = self.protected_provider() if self.protected_provider else ()
                # Stage two: drop the oldest unprotected entry.
                victim = next((a for a in self._entries if a not in protected), None)
                if victim is None:
                    self.bypasses += 1
                    return False
                del self._entries[victim]
                self.evictions += 1
                if self.on_evict is not None:
                    self.on_evict(victim)
            self._entries[addr] = data
            assert self.used_bytes <= self.capacity
            return True

    def invalidate(self, addr):
        with self._lock:
            self._entries.pop(addr, None)

    def __contains__(self, addr):
        return addr in self._entries


class LirsPolicy:
    """LIRS replacement decisions over opaque keys.

    Stack S holds recency (LIR blocks plus HIR blocks, resident or not);
    queue Q holds resident HIR blocks in eviction order. The bottom of S
    is always LIR.
    """

    def __init__(self, capacity, hir_capacity=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        if hir_capacity is None:
            hir_capacity = max(1, capacity // 100)
        self.hir_target = min(max(1, hir_capacity), capacity)
        self.lir_target = capacity - self.hir_target
        self.S: OrderedDict = OrderedDict()  # oldest first
        self.Q: OrderedDict = OrderedDict()  # eviction side first
        self.status: dict = {}
        self.resident: set = set()
        self.lir_count = 0

    def access(self, key):
        """One reference to `key`; returns (hit, evicted_key_or_None)."""
        if key in self.resident:
            if self.status[key] == LIR:
                self.S.move_to_end(key)
                self._prune()
            elif key in self.S:
                # Resident HIR with small reuse distance: promote to LIR.
                self.status[key] = LIR
                self.lir_count += 1
                self.S.move_to_end(key)
                self.Q.pop(key, None)
                self._demote_while_over()
            else:
                self.S[key] = None
                self.Q.move_to_end(key)
            return True, None

        evicted = None
        if self.lir_count < self.lir_target:
            # Warm-up: fill the LIR set before anything becomes HIR.
            self.status[key] = LIR
            self.lir_count += 1
            self.S[key] = None
            self.resident.add(key)
            return False, None
        if len(self.resident) >= self.capacity:
            victim, _ = self.Q.popitem(last=False)
            self.resident.remove(victim)
            if victim not in self.S:
                del self.status[victim]
            evicted = victim
        if key in self.S:
            # Non-resident HIR seen again within the stack: straight to LIR.
            self.status[key] = LIR
            self.lir_count += 1
            self.S.move_to_end(key)
            self.resident.add(key)
            self._demote_while_over()
        else:
            self.status[key] = HIR
            self.S[key] = None
            self.Q[key] = None
            self.resident.add(key)
        return False, evicted

    def _demote_while_over(self):
        while self.lir_count > self.lir_target:
            bottom, _ = self.S.popitem(last=False)
            self.status[bottom] = HIR
            self.lir_count -= 1
            self.Q[bottom] = None
            self._prune()

    def _prune(self):
        while self.S:
            bottom = next(iter(self.S))
            if self.status.get(bottom) == LIR:
                return
            del self.S[bottom]
            if bottom not in self.resident:
                del self.status[bottom]


class ImageCache:
    """Golden-image block cache: LIRS policy plus the block bytes."""

    def __init__(self, capacity_bytes, block_size, hir_fraction=0.01):
        self.block_size = block_size
        self.capacity_blocks = capacity_bytes // block_size
        self._policy = None
        if self.capacity_blocks >= 1:
            hir = max(1, int(self.capacity_blocks * hir_fraction))
            self._policy = LirsPolicy(self.capacity_blocks, hir)
        self._data: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    @property
    def used_bytes(self):
        return len(self._data) * self.block_size

    def get(self, key):
        with self._lock:
            data = self._data.get(key)
            if data is None:
                self.misses += 1
                return None
            self._policy.access(key)
            self.hits += 1
            return data

    def put(self, key, data):
        if self._policy is None:
            return
        with self._lock:
            if key in self._data:
                self._data[key] = data
                self._policy.access(key)
                return
            _, evicted = self._policy.access(key)
            if evicted is not None:
                self._data.pop(evicted, None)
                self.evictions += 1
            self._data[key] = data
            assert len(self._data) <= self.capacity_blocks

    def invalidate(self, key):
        with self._lock:
            self._data.pop(key, None)

    def __contains__(self, key):
        return key in self._data


class _VmCache:
    def __init__(self):
        self.read: OrderedDict = OrderedDict()
        self.buffer: dict = {}
        self.read_cap = 0
        self.buffer_cap = 0
        self.last_vblock = -2
        self.run_len = 0


class ActiveCache:
    """Per-VM read cache + write buffer inside the active partition."""

    def __init__(self, capacity_bytes, block_size, per_vm_buffer, prefetch_window,
                 sequential_threshold=2):
        self.capacity = capacity_bytes
        self.block_size = block_size
        self.per_vm_buffer = per_vm_buffer
        self.prefetch_window = prefetch_window
        self.sequential_threshold = sequential_threshold
        self._vms: dict = {}
        self.read_hits = 0
        self.read_misses = 0
        self.evictions = 0

    @property
    def used_bytes(self):
        return sum((len(vc.read) + len(vc.buffer)) * self.block_size
                   for vc in self._vms.values())

    def attach(self, vm) -> list:
        if vm in self._vms:
            raise ValueError(f"vm {vm} already attached to the active cache")
        self._vms[vm] = _VmCache()
        return self._rebalance()

    def detach(self, vm):
        self._vms.pop(vm, None)
        self._rebalance()

    def _rebalance(self) -> list:
        """Split the partition evenly; returns VMs whose buffer now overflows."""
        need_flush = []
        if not self._vms:
            return need_flush
        per_vm = self.capacity // len(self._vms)
        for vm, vc in self._vms.items():
            vc.buffer_cap = min(self.per_vm_buffer, per_vm)
            vc.read_cap = per_vm - vc.buffer_cap
            while len(vc.read) * self.block_size > vc.read_cap:
                vc.read.popitem(last=False)
                self.evictions += 1
            if len(vc.buffer) * self.block_size > vc.buffer_cap:
                need_flush.append(vm)
        self._check_budget()
        return need_flush

    def active_read(self, vm, vblock):
        """Probe caches for one block; returns (data|None, prefetch vblocks)."""
        vc = self._vms[vm]
        if vblock == vc.last_vblock + 1:
            vc.run_len += 1
        else:
            vc.run_len = 1
        vc.last_vblock = vblock
        prefetch = []
        if vc.run_len >= self.sequential_threshold:
            prefetch = list(range(vblock + 1, vblock + 1 + self.prefetch_window))
        data = vc.buffer.get(vblock)
        if data is not None:
            self.read_hits += 1
            return data, prefetch
        data = vc.read.get(vblock)
        if data is not None:
            vc.read.move_to_end(vblock)
            self.read_hits += 1
            return data, prefetch
        self.read_misses += 1
        return None, prefetch

    def is_cached(self, vm, vblock):
        vc = self._vms[vm]
        return vblock in vc.buffer or vblock in vc.read

    def admit_read(self, vm, vblock, data):
        vc = self._vms[vm]
        if vc.read_cap < self.block_size:
            return
        if vblock in vc.read:
            vc.read.move_to_end(vblock)
        vc.read[vblock] = data
        while len(vc.read) * self.block_size > vc.read_cap:
            vc.read.popitem(last=False)
            self.evictions += 1
        self._check_budget()

    def active_write(self, vm, vblock, data) -> str:
        """Buffer a block write; returns 'buffered' or 'flush-triggered'."""
        vc = self._vms[vm]
        # The buffer shadows the read cache only until the next flush, so
        # a stale read-cache copy must go now.
        vc.read.pop(vblock, None)
        vc.buffer[vblock] = data
        self._check_budget()
        if len(vc.buffer) * self.block_size >= vc.buffer_cap:
            return "flush-triggered"
        return "buffered"

    def buffered(self, vm, vblock):
        return self._vms[vm].buffer.get(vblock)

    def buffer_len(self, vm):
        return len(self._vms[vm].buffer)

    def take_buffer(self, vm) -> dict:
        vc = self._vms[vm]
        buf, vc.buffer = vc.buffer, {}
        return buf

    def _check_budget(self):
        assert self.used_bytes <= self.capacity, "active partition over budget"


class HybridCache:
    """The three SSD partitions plus flush accounting."""

    def __init__(self, config: CacheConfig, protected_provider=None):
        self.config = config
        self.meta = MetadataCache(config.metadata_capacity, config.block_size,
                                  protected_provider)
        self.image = ImageCache(config.image_capacity, config.block_size,
                                config.lirs_hir_fraction)
        self.active = ActiveCache(config.active_capacity, config.block_size,
                                  config.per_vm_write_buffer, config.prefetch_window,
                                  config.sequential_threshold)
        self.flush_counts = {"full": 0, "save": 0, "migrate": 0}

    def record_flush(self, cause):
        self.flush_counts[cause] += 1

    def check_budgets(self):
        assert self.meta.used_bytes <= self.config.metadata_capacity
        assert self.image.used_bytes <= self.config.image_capacity
        assert self.active.used_bytes <= self.config.active_capacity

    def stats_report(self) -> dict:
        """JSON-able cache statistics."""
        return {
            "metadata": {
                "hits": self.meta.hits, "misses": self.meta.misses,
                "evictions": self.meta.evictions, "bypasses": self.meta.bypasses,
                "used_bytes": self.meta.used_bytes,
            },
            "image": {
                "hits": self.image.hits, "misses": self.image.misses,
                "evictions": self.image.evictions,
                "used_bytes": self.image.used_bytes,
            },
            "active": {
                "read_hits": self.active.read_hits,
                "read_misses": self.active.read_misses,
                "evictions": self.active.evictions,
                "used_bytes": self.active.used_bytes,
            },
            "flushes": dict(self.flush_counts),
        }
