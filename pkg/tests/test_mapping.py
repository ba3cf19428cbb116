import threading

import numpy as np
import pytest

from fuzz_drivers import build_store, run_mapping_fuzz
from hvsto.errors import (
    CapacityError,
    HvstoError,
    NotFoundError,
    RangeError,
    ReadOnlyError,
)
from hvsto.mapping import (
    MODE_READONLY,
    MODE_WRITEABLE,
    IndexEntry,
    IndexNode,
    VersionId,
    decode_index_node,
    encode_index_node,
)
from hvsto.placement import BlockAddress


def write_block(cluster, store, head, vblock, data):
    addr = cluster.alloc_block(store.new_data_key(head))
    cluster.write_block(addr, data)
    store.map_write(head, vblock, addr)
    return addr


def read_vblock(cluster, store, version, vblock):
    addr = store.lookup(version, vblock)
    return None if addr is None else cluster.read_block(addr)


def pattern(i, block_size=512):
    return bytes([i & 0xFF]) * block_size


class TestCreateImage:
    def test_fresh_image_is_fully_unmapped(self):
        _, store = build_store(block_size=4096)
        _, v0 = store.create_image(4096, 1024)
        for vblock in (0, 7, 1023):
            assert store.lookup(v0, vblock) is None

    def test_zero_capacity_rejected(self):
        _, store = build_store()
        with pytest.raises((ValueError, HvstoError)):
            store.create_image(4096, 0)

    def test_bad_block_size_rejected(self):
        _, store = build_store()
        for bs in (100, 256, 3000, 1 << 17):
            with pytest.raises(ValueError):
                store.create_image(bs, 16)

    def test_capacity_beyond_three_levels_rejected(self):
        _, store = build_store()
        # 512-byte nodes hold at most 23 entries -> 23^3 addressable blocks.
        with pytest.raises(CapacityError):
            store.create_image(512, 23**3 + 1)

    def test_large_image_fanout_covers_capacity(self):
        cluster, store = build_store(block_size=8192, capacity_blocks=1 << 20)
        image, v0 = store.create_image(8192, 2**20)
        assert store.fanout(image) ** 3 >= 2**20
        last = 2**20 - 1
        data = pattern(3, 8192)
        write_block(cluster, store, v0, last, data)
        assert read_vblock(cluster, store, v0, last) == data


class TestLookup:
    def test_unknown_version_not_found(self):
        _, store = build_store()
        store.create_image(512, 16)
        with pytest.raises(NotFoundError):
            store.lookup(VersionId(1, 99), 0)

    def test_vblock_out_of_range(self):
        _, store = build_store()
        _, v0 = store.create_image(512, 16)
        with pytest.raises(RangeError):
            store.lookup(v0, 16)

    def test_snapshot_inherits_content(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        write_block(cluster, store, v0, 7, pattern(7))
        v1 = store.snapshot(v0)
        assert read_vblock(cluster, store, v1, 7) == pattern(7)

    def test_inherited_lookup_is_exactly_three_fetches_at_any_depth(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        write_block(cluster, store, v0, 9, pattern(9))
        head = v0
        for _ in range(10):
            head = store.snapshot(head)
        before = store.stats.node_fetches
        assert store.lookup(head, 9) is not None
        assert store.stats.node_fetches - before == 3


class TestMapWrite:
    def test_first_write_allocates_three_nodes(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        before = store.stats.nodes_created
        write_block(cluster, store, v0, 5, pattern(5))
        assert store.stats.nodes_created - before == 3  # root+interior+leaf

    def test_first_write_after_snapshot_owns_exactly_three_nodes(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 64)
        write_block(cluster, store, v0, 5, pattern(5))
        v0_nodes = set(store.head_index_addrs(image))
        v1 = store.snapshot(v0)
        created_before_write = store.stats.nodes_created
        write_block(cluster, store, v1, 5, pattern(6))
        # The write itself copies at most the interior and leaf; together
        # with the snapshot root the new version owns exactly 3 nodes.
        assert store.stats.nodes_created - created_before_write <= 3
        v1_nodes = set(store.head_index_addrs(image))
        assert len(v1_nodes - v0_nodes) == 3
        assert len(v0_nodes & v1_nodes) == 0  # single-path image: all copied
        # The old version still reads its own data.
        assert read_vblock(cluster, store, v0, 5) == pattern(5)
        assert read_vblock(cluster, store, v1, 5) == pattern(6)

    def test_write_shares_untouched_siblings(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 20**3)
        # Two blocks in different root subtrees.
        write_block(cluster, store, v0, 0, pattern(1))
        write_block(cluster, store, v0, 20**3 - 1, pattern(2))
        v0_nodes = set(store.head_index_addrs(image))
        v1 = store.snapshot(v0)
        write_block(cluster, store, v1, 0, pattern(3))
        v1_nodes = set(store.head_index_addrs(image))
        # The far subtree (interior+leaf) is still shared with v0.
        assert len(v0_nodes & v1_nodes) == 2

    def test_write_through_readonly_version_rejected(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        store.snapshot(v0)
        with pytest.raises(ReadOnlyError):
            store.map_write(v0, 1, BlockAddress(0, 0))

    def test_sharing_economy_at_most_three_nodes_per_write(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 256)
        head = v0
        rng = np.random.default_rng(3)
        for i in range(200):
            if i % 17 == 0:
                head = store.snapshot(head)
            before = store.stats.nodes_created
            write_block(cluster, store, head, int(rng.integers(0, 256)), pattern(i))
            assert store.stats.nodes_created - before <= 3


class TestSnapshot:
    def test_preserves_all_content(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 32)
        for vblock in (0, 3, 31):
            write_block(cluster, store, v0, vblock, pattern(vblock))
        v1 = store.snapshot(v0)
        for vblock in range(32):
            assert read_vblock(cluster, store, v1, vblock) == \
                read_vblock(cluster, store, v0, vblock)

    def test_creates_exactly_one_node(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        write_block(cluster, store, v0, 1, pattern(1))
        head = v0
        for _ in range(5):
            before = store.stats.nodes_created
            head = store.snapshot(head)
            assert store.stats.nodes_created - before == 1

    def test_snapshot_of_readonly_rejected(self):
        _, store = build_store()
        _, v0 = store.create_image(512, 16)
        store.snapshot(v0)
        with pytest.raises(ReadOnlyError):
            store.snapshot(v0)

    def test_ten_snapshot_chain_reads_identically(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 16)
        write_block(cluster, store, v0, 2, pattern(2))
        versions = [v0]
        for _ in range(10):
            versions.append(store.snapshot(versions[-1]))
        reference = [read_vblock(cluster, store, v0, vb) for vb in range(16)]
        for version in versions:
            got = [read_vblock(cluster, store, version, vb) for vb in range(16)]
            assert got == reference

    def test_version_log_order_and_parenthood(self):
        _, store = build_store()
        image, v0 = store.create_image(512, 16)
        v1 = store.snapshot(v0)
        v2 = store.snapshot(v1)
        log = store.version_log(image)
        assert [e.version for e in log] == [v0, v1, v2]
        assert [e.timestamp for e in log] == sorted(e.timestamp for e in log)
        assert v2.parent == v1 and v1.parent == v0 and v0.parent is None


def raw_marking_traversal(cluster, store, version):
    """Independent reachability oracle: decode node blocks straight off the
    cluster (works for read-only versions, whose nodes are all durable)."""
    marked = set()
    root = store.root_address(version)
    if root is None:
        return marked
    stack = [root]
    while stack:
        addr = stack.pop()
        if addr in marked:
            continue
        data = cluster.read_block(addr)
        if data is None:
            continue
        marked.add(addr)
        node = decode_index_node(data)
        for entry in node.entries:
            if node.level == 2:
                marked.add(entry.child)
            else:
                stack.append(entry.child)
    return marked


class TestGarbageCollection:
    def test_single_version_nothing_reclaimed(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 16)
        write_block(cluster, store, v0, 1, pattern(1))
        assert store.collect_garbage(image, {v0}) == 0

    def test_retain_must_include_head(self):
        _, store = build_store()
        image, v0 = store.create_image(512, 16)
        v1 = store.snapshot(v0)
        with pytest.raises(HvstoError):
            store.collect_garbage(image, {v0})
        store.collect_garbage(image, {v0, v1})

    def test_full_rewrite_reclaims_all_old_blocks(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 8)
        created0 = store.stats.nodes_created
        for vblock in range(8):
            write_block(cluster, store, v0, vblock, pattern(vblock))
        v0_index_nodes = store.stats.nodes_created - created0
        v1 = store.snapshot(v0)
        for vblock in range(8):
            write_block(cluster, store, v1, vblock, pattern(vblock + 100))
        freed = []
        count = store.collect_garbage(image, {v1}, on_free=freed.append)
        # All 8 v0 data blocks plus every v0-owned index node go away.
        assert count == len(freed) == 8 + v0_index_nodes
        for vblock in range(8):
            assert read_vblock(cluster, store, v1, vblock) == pattern(vblock + 100)

    def test_reads_identical_before_and_after_gc(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 32)
        head = v0
        rng = np.random.default_rng(5)
        live = [v0]
        for i in range(40):
            write_block(cluster, store, head, int(rng.integers(0, 32)), pattern(i))
            if i % 10 == 9:
                head = store.snapshot(head)
                live.append(head)
        retain = {live[0], live[-1], head}
        before = {
            v: [read_vblock(cluster, store, v, vb) for vb in range(32)]
            for v in retain
        }
        store.collect_garbage(image, retain)
        for v in retain:
            got = [read_vblock(cluster, store, v, vb) for vb in range(32)]
            assert got == before[v]

    def test_reclaimed_disjoint_from_marked(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 32)
        head = v0
        rng = np.random.default_rng(6)
        live = [v0]
        for i in range(60):
            write_block(cluster, store, head, int(rng.integers(0, 32)), pattern(i))
            if i % 12 == 11:
                head = store.snapshot(head)
                live.append(head)
        retain = {live[1], live[3], head}
        marked = set()
        for version in retain:
            if version != head:
                marked |= raw_marking_traversal(cluster, store, version)
            for vblock in range(32):
                addr = store.lookup(version, vblock)
                if addr is not None:
                    marked.add(addr)
        freed = []
        store.collect_garbage(image, retain, on_free=freed.append)
        assert marked.isdisjoint(freed)

    def test_version_ids_never_reused_after_gc(self):
        cluster, store = build_store()
        image, v0 = store.create_image(512, 16)
        v1 = store.snapshot(v0)
        v2 = store.snapshot(v1)
        store.collect_garbage(image, {v2})
        v3 = store.snapshot(v2)
        assert v3.seq > v2.seq > v1.seq


class TestDepthInvariant:
    def test_ten_thousand_random_lookups_fetch_exactly_three(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 128)
        rng = np.random.default_rng(8)
        head = v0
        written = set()
        versions = [v0]
        mapped_at = {v0: []}
        for i in range(120):
            vblock = int(rng.integers(0, 128))
            write_block(cluster, store, head, vblock, pattern(i))
            written.add(vblock)
            mapped_at[head] = sorted(written)
            if i % 11 == 10:
                head = store.snapshot(head)
                versions.append(head)
                mapped_at[head] = sorted(written)
        candidates = [v for v in versions if mapped_at[v]]
        for _ in range(10_000):
            version = candidates[int(rng.integers(0, len(candidates)))]
            mapped = mapped_at[version]
            vblock = mapped[int(rng.integers(0, len(mapped)))]
            before = store.stats.node_fetches
            assert store.lookup(version, vblock) is not None
            assert store.stats.node_fetches - before == 3


class TestCowIsolation:
    def test_writes_to_new_head_never_change_old_version(self):
        cluster, store = build_store()
        _, v0 = store.create_image(512, 64)
        rng = np.random.default_rng(9)
        for i in range(30):
            write_block(cluster, store, v0, int(rng.integers(0, 64)), pattern(i))
        frozen = [read_vblock(cluster, store, v0, vb) for vb in range(64)]
        v1 = store.snapshot(v0)
        for i in range(200):
            write_block(cluster, store, v1, int(rng.integers(0, 64)), pattern(i + 50))
            vb = int(rng.integers(0, 64))
            assert read_vblock(cluster, store, v0, vb) == frozen[vb]


class TestOracleFuzz:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_full_copy_reference(self, seed):
        run_mapping_fuzz(seed)


class TestSerialization:
    def test_golden_bytes(self):
        node = IndexNode(2, VersionId(1, 0),
                         [IndexEntry(5, BlockAddress(2, 9), MODE_WRITEABLE)])
        raw = encode_index_node(node, 512)
        assert len(raw) == 512
        expected_prefix = (
            b"\x02"                              # level
            b"\x01\x00"                          # entry count
            b"\x00\x00\x00\x00\x01\x00\x00\x00"  # owner (image 1, seq 0)
            b"\x05\x00\x00\x00\x00\x00\x00\x00"  # key
            b"\x02\x00\x00\x00"                  # node id
            b"\x09\x00\x00\x00\x00\x00\x00\x00"  # local id
            b"\x01"                              # mode
        )
        assert raw.startswith(expected_prefix)
        assert raw[len(expected_prefix):] == b"\x00" * (512 - len(expected_prefix))

    def test_roundtrip(self):
        entries = [IndexEntry(k, BlockAddress(k % 3, k * 7), MODE_READONLY)
                   for k in range(0, 40, 4)]
        node = IndexNode(1, VersionId(6, 12), entries)
        back = decode_index_node(encode_index_node(node, 1024))
        assert back.level == 1
        assert back.owner == VersionId(6, 12)
        assert back.entries == entries

    def test_node_too_big_for_block_rejected(self):
        entries = [IndexEntry(k, BlockAddress(0, k), MODE_READONLY)
                   for k in range(50)]
        with pytest.raises(CapacityError):
            encode_index_node(IndexNode(1, VersionId(1, 0), entries), 512)


class TestConcurrency:
    def test_independent_images_mutate_concurrently(self):
        cluster, store = build_store(block_size=512)
        errors = []

        def worker(tag):
            try:
                _, head = store.create_image(512, 32)
                for i in range(50):
                    write_block(cluster, store, head, i % 32, pattern(i))
                    if i % 10 == 9:
                        head = store.snapshot(head)
                for vb in range(32):
                    store.lookup(head, vb)
            except Exception as exc:  # pragma: no cover
                errors.append((tag, exc))

        threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
