import pytest

from hvsto.hybrid_cache import (
    ActiveCache,
    CacheConfig,
    HybridCache,
    ImageCache,
    LirsPolicy,
    MetadataCache,
)
from hvsto.placement import BlockAddress

BS = 512


def block(i):
    return bytes([i & 0xFF]) * BS


class TestCacheConfig:
    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            CacheConfig(1 << 20, BS, metadata_frac=0.3, image_frac=0.5,
                        active_frac=0.3)

    def test_partition_capacities_block_aligned(self):
        cfg = CacheConfig(10_000, BS)
        for cap in (cfg.metadata_capacity, cfg.image_capacity, cfg.active_capacity):
            assert cap % BS == 0
        assert cfg.metadata_capacity <= 10_000 * 0.25
        assert cfg.image_capacity <= 10_000 * 0.50
        assert cfg.active_capacity <= 10_000 * 0.25


class TestMetadataCache:
    def test_put_then_get_hits(self):
        cache = MetadataCache(4 * BS, BS)
        a = BlockAddress(0, 1)
        assert cache.put(a, block(1))
        assert cache.get(a) == block(1)
        assert cache.hits == 1

    def test_protected_survives_older_position(self):
        # Capacity 2: A (protected) then B; C evicts B, not the older A.
        protected = {BlockAddress(0, 1)}
        cache = MetadataCache(2 * BS, BS, protected_provider=lambda: protected)
        a, b, c = (BlockAddress(0, i) for i in (1, 2, 3))
        cache.put(a, block(1))
        cache.put(b, block(2))
        assert cache.put(c, block(3))
        assert a in cache and c in cache
        assert b not in cache
        assert cache.evictions == 1

    def test_all_protected_bypasses_admission(self):
        protected = {BlockAddress(0, 1), BlockAddress(0, 2)}
        cache = MetadataCache(2 * BS, BS, protected_provider=lambda: protected)
        a, b, c = (BlockAddress(0, i) for i in (1, 2, 3))
        cache.put(a, block(1))
        cache.put(b, block(2))
        assert not cache.put(c, block(3))
        assert cache.bypasses == 1
        assert a in cache and b in cache and c not in cache

    def test_protection_marks_refreshed_at_eviction(self):
        # Stage one re-reads the provider, so unprotecting takes effect on
        # the next eviction without any explicit cache update.
        marks = {BlockAddress(0, 1), BlockAddress(0, 2)}
        cache = MetadataCache(2 * BS, BS, protected_provider=lambda: set(marks))
        a, b, c = (BlockAddress(0, i) for i in (1, 2, 3))
        cache.put(a, block(1))
        cache.put(b, block(2))
        assert not cache.put(c, block(3))
        marks.discard(BlockAddress(0, 1))
        assert cache.put(c, block(3))
        assert a not in cache

    def test_budget_never_exceeded(self):
        cache = MetadataCache(3 * BS, BS)
        for i in range(50):
            cache.put(BlockAddress(0, i), block(i))
            assert cache.used_bytes <= 3 * BS


class TestLirsPolicy:
    def test_alternating_pair_all_hits_after_warmup(self):
        policy = LirsPolicy(2, 1)
        policy.access("a")
        policy.access("b")
        for _ in range(50):
            hit_a, _ = policy.access("a")
            hit_b, _ = policy.access("b")
            assert hit_a and hit_b

    def test_scan_pollutes_only_hir_region(self):
        capacity = 100
        policy = LirsPolicy(capacity)  # hir target 1
        hot = [f"hot{i}" for i in range(capacity - 1)]
        for key in hot:
            policy.access(key)
        for key in hot:
            assert policy.access(key)[0]
        # One-touch scan of 2x capacity.
        for i in range(2 * capacity):
            policy.access(f"scan{i}")
        for key in hot:
            assert key in policy.resident

    def test_one_touch_evicted_before_twice_accessed(self):
        policy = LirsPolicy(4, 1)
        for key in ("a", "b", "c"):
            policy.access(key)
            policy.access(key)
        policy.access("x")  # one-touch
        _, evicted = policy.access("y")
        assert evicted == "x"
        assert all(k in policy.resident for k in ("a", "b", "c"))

    def test_resident_count_bounded(self):
        policy = LirsPolicy(8, 2)
        for i in range(100):
            policy.access(i % 13)
            assert len(policy.resident) <= 8


class TestImageCache:
    def test_get_miss_then_put_then_hit(self):
        cache = ImageCache(4 * BS, BS)
        key = BlockAddress(1, 1)
        assert cache.get(key) is None
        cache.put(key, block(1))
        assert cache.get(key) == block(1)

    def test_eviction_drops_bytes(self):
        cache = ImageCache(2 * BS, BS)
        for i in range(10):
            cache.put(BlockAddress(0, i), block(i))
            assert cache.used_bytes <= 2 * BS

    def test_zero_capacity_disabled(self):
        cache = ImageCache(0, BS)
        cache.put(BlockAddress(0, 1), block(1))
        assert cache.get(BlockAddress(0, 1)) is None


class TestActiveCache:
    def make(self, blocks=16, buffer_blocks=4, window=8):
        return ActiveCache(blocks * BS, BS, buffer_blocks * BS, window)

    def test_sequential_reads_trigger_prefetch_window(self):
        cache = self.make(window=8)
        cache.attach("vm")
        _, prefetch = cache.active_read("vm", 5)
        assert prefetch == []
        _, prefetch = cache.active_read("vm", 6)
        assert prefetch == list(range(7, 15))

    def test_random_reads_no_prefetch(self):
        cache = self.make()
        cache.attach("vm")
        for vblock in (9, 2, 7, 1, 4):
            _, prefetch = cache.active_read("vm", vblock)
            assert prefetch == []

    def test_read_your_writes(self):
        cache = self.make()
        cache.attach("vm")
        cache.admit_read("vm", 3, block(1))
        cache.active_write("vm", 3, block(2))
        data, _ = cache.active_read("vm", 3)
        assert data == block(2)

    def test_buffer_threshold_triggers_flush(self):
        cache = self.make(buffer_blocks=4)
        cache.attach("vm")
        for vblock in range(3):
            assert cache.active_write("vm", vblock, block(vblock)) == "buffered"
        assert cache.active_write("vm", 3, block(3)) == "flush-triggered"

    def test_same_block_coalesces_last_wins(self):
        cache = self.make(buffer_blocks=4)
        cache.attach("vm")
        cache.active_write("vm", 2, block(1))
        cache.active_write("vm", 2, block(9))
        buf = cache.take_buffer("vm")
        assert buf == {2: block(9)}

    def test_rebalance_on_attach_flags_oversized_buffers(self):
        cache = ActiveCache(8 * BS, BS, per_vm_buffer=4 * BS, prefetch_window=2)
        cache.attach("a")
        for vblock in range(3):
            cache.active_write("a", vblock, block(vblock))
        # Splitting 8 blocks over 4 VMs leaves 2 per VM; a's 3 dirty blocks
        # no longer fit its share.
        cache.attach("b")
        cache.attach("c")
        need_flush = cache.attach("d")
        assert need_flush == ["a"]

    def test_budget_bounded_under_churn(self):
        cache = ActiveCache(8 * BS, BS, per_vm_buffer=2 * BS, prefetch_window=2)
        cache.attach("a")
        cache.attach("b")
        for i in range(200):
            vm = "a" if i % 2 else "b"
            cache.admit_read(vm, i % 7, block(i))
            if cache.active_write(vm, i % 3, block(i)) == "flush-triggered":
                cache.take_buffer(vm)
            assert cache.used_bytes <= 8 * BS


class TestHybridCache:
    def test_stats_report_shape(self):
        hybrid = HybridCache(CacheConfig(64 * BS, BS))
        hybrid.record_flush("full")
        hybrid.record_flush("save")
        report = hybrid.stats_report()
        assert set(report) == {"metadata", "image", "active", "flushes"}
        assert report["flushes"] == {"full": 1, "save": 1, "migrate": 0}
        for part in ("metadata", "image"):
            assert {"hits", "misses"} <= set(report[part])
