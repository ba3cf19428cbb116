"""Per-image block index: a fixed depth-3 tree with copy-on-write snapshots.

Every image maps virtual block numbers to physical block addresses through
exactly three index levels (root -> interior -> leaf), whatever the
snapshot depth. A snapshot creates one new root whose entries are
read-only links into the previous tree; the first write under an
inherited path copies just that path into the new version and leaves
every sibling shared.

Index nodes are themselves stored as blocks through the placement layer.
Nodes owned by the writeable head live in an in-memory dirty set
(write-back) and are serialized out exactly once, when the version is
frozen by the next snapshot - so no index block is ever rewritten in
place.

Node serialization (little-endian, padded with zeros to the block size):

    header:  u8 level | u16 entry count | u64 owner
    entry:   u64 key | u32 node_id | u64 local_id | u8 mode

where owner packs the owning version as (image << 32) | seq, and mode is
1 when the child is owned by the same version as the node (writeable)
and 0 when it refers into an ancestor version (read-only).
"""

from __future__ import annotations

import struct
import threading
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

from .errors import (
    CapacityError,
    ConflictError,
    HvstoError,
    NotFoundError,
    RangeError,
    ReadOnlyError,
)
from .placement import BlockAddress, PlacementKey

MODE_READONLY = 0
MODE_WRITEABLE = 1

MIN_FANOUT = 16

_NODE_HEADER = struct.Struct("<BHQ")
_NODE_ENTRY = struct.Struct("<QIQB")

CAUSE_SNAPSHOT = "explicit-snapshot"
CAUSE_REWRITE_AVOIDANCE = "rewrite-avoidance"
CAUSE_WRITE_CACHE_FLUSH = "write-cache-flush"

_CAUSES = {CAUSE_SNAPSHOT, CAUSE_REWRITE_AVOIDANCE, CAUSE_WRITE_CACHE_FLUSH}


@dataclass(frozen=True)
class VersionId:
    """Identity of one image version; the parent link forms the version tree."""

    image: int
    seq: int
    parent: "VersionId | None" = field(default=None, compare=False, repr=False)


class IndexEntry(NamedTuple):
    key: int
    child: BlockAddress
    mode: int


class VersionLogEntry(NamedTuple):
    version: VersionId
    cause: str
    timestamp: int


@dataclass
class IndexNode:
    level: int  # 0 root, 1 interior, 2 leaf
    owner: VersionId
    entries: list[IndexEntry]

    def find(self, key) -> IndexEntry | None:
        i = bisect_left(self.entries, key, key=lambda e: e.key)
        if i < len(self.entries) and self.entries[i].key == key:
            return self.entries[i]
        return None

    def set_entry(self, key, child, mode) -> None:
        i = bisect_left(self.entries, key, key=lambda e: e.key)
        entry = IndexEntry(key, child, mode)
        if i < len(self.entries) and self.entries[i].key == key:
            self.entries[i] = entry
        else:
            self.entries.insert(i, entry)


def encode_index_node(node: IndexNode, block_size: int) -> bytes:
    owner = (node.owner.image << 32) | node.owner.seq
    parts = [_NODE_HEADER.pack(node.level, len(node.entries), owner)]
    for e in node.entries:
        parts.append(_NODE_ENTRY.pack(e.key, e.child.node_id, e.child.local_id, e.mode))
    raw = b"".join(parts)
    if len(raw) > block_size:
        raise CapacityError("index node exceeds block size")
    return raw + b"\x00" * (block_size - len(raw))


def decode_index_node(data: bytes) -> IndexNode:
    level, count, owner = _NODE_HEADER.unpack_from(data)
    end = _NODE_HEADER.size + count * _NODE_ENTRY.size
    entries = [
        IndexEntry(key, BlockAddress(node_id, local_id), mode)
        for key, node_id, local_id, mode
        in _NODE_ENTRY.iter_unpack(data[_NODE_HEADER.size:end])
    ]
    return IndexNode(level, VersionId(owner >> 32, owner & 0xFFFFFFFF), entries)


class IndexBlockIO(Protocol):
    """Backing store for index-node blocks (the cluster, in practice)."""

    def alloc_index(self, image: int, owner_seq: int, salt: int) -> BlockAddress: ...
    def write_block(self, addr: BlockAddress, data: bytes) -> None: ...
    def read_block(self, addr: BlockAddress) -> bytes | None: ...
    def free_block(self, addr: BlockAddress) -> None: ...


@dataclass
class MappingStats:
    lookups: int = 0
    node_fetches: int = 0
    nodes_created: int = 0
    nodes_written: int = 0
    blocks_freed: int = 0


@dataclass
class _VersionMeta:
    parent: VersionId | None
    root: BlockAddress | None
    writeable: bool
    owned_index: set[BlockAddress] = field(default_factory=set)
    owned_data: set[BlockAddress] = field(default_factory=set)
    frozen_reachable: frozenset[BlockAddress] | None = None


class _ImageState:
    def __init__(self, image, block_size, capacity, fanout):
        self.image = image
        self.block_size = block_size
        self.capacity = capacity
        self.fanout = fanout
        self.versions: dict[VersionId, _VersionMeta] = {}
        self.head: VersionId | None = None
        self.next_seq = 0
        self.dirty: dict[BlockAddress, IndexNode] = {}
        self.head_reachable: set[BlockAddress] = set()
        self.salt = 0
        self.log: list[VersionLogEntry] = []
        self.lock = threading.RLock()
        self.attached = False

    def next_salt(self):
        self.salt += 1
        return self.salt


def _icbrt_ceil(n: int) -> int:
    f = max(1, round(n ** (1.0 / 3.0)))
    while f**3 < n:
        f += 1
    while f > 1 and (f - 1) ** 3 >= n:
        f -= 1
    return f


def max_fanout(block_size: int) -> int:
    return (block_size - _NODE_HEADER.size) // _NODE_ENTRY.size


class MappingStore:
    """All image indexes of one cluster, keyed by image id.

    Mutations to a single image are serialized by a per-image lock
    (single-writer); reads of read-only versions go straight to the node
    blocks and may run concurrently.
    """

    def __init__(self, service: IndexBlockIO):
        self._service = service
        self._images: dict[int, _ImageState] = {}
        self._data_owner: dict[BlockAddress, VersionId] = {}
        self._next_image = 1
        self._ts = 0
        self._global_lock = threading.Lock()
        self.stats = MappingStats()

    # -- image lifecycle -------------------------------------------------

    def create_image(self, block_size: int, capacity: int) -> tuple[int, VersionId]:
        if block_size < 512 or block_size > 65536 or block_size & (block_size - 1):
            raise ValueError("block size must be a power of two in [512B, 64KB]")
        if capacity < 1:
            raise ValueError("capacity must be >= 1 virtual block")
        fanout = max(MIN_FANOUT, _icbrt_ceil(capacity))
        if fanout > max_fanout(block_size):
            raise CapacityError(
                f"capacity {capacity} exceeds the addressable range of a "
                f"3-level index with {block_size}-byte nodes"
            )
        with self._global_lock:
            image = self._next_image
            self._next_image += 1
        st = _ImageState(image, block_size, capacity, fanout)
        v0 = VersionId(image, 0)
        st.next_seq = 1
        st.versions[v0] = _VersionMeta(parent=None, root=None, writeable=True)
        st.head = v0
        st.log.append(VersionLogEntry(v0, CAUSE_SNAPSHOT, self._tick()))
        with self._global_lock:
            self._images[image] = st
        return image, v0

    def clone_image(self, base: VersionId) -> tuple[int, VersionId]:
        """New image whose first version links read-only into `base`'s tree.

        The base must already be frozen (read-only); this is how per-VM
        disks are registered against a shared golden image.
        """
        base_st = self._state(base.image)
        base_meta = self._meta(base)
        if base_meta.writeable:
            raise ConflictError("clone base must be a read-only version")
        with self._global_lock:
            image = self._next_image
            self._next_image += 1
        st = _ImageState(image, base_st.block_size, base_st.capacity, base_st.fanout)
        v0 = VersionId(image, 0, parent=base)
        st.next_seq = 1
        meta = _VersionMeta(parent=base, root=None, writeable=True)
        if base_meta.root is not None:
            base_root = self._fetch_node(base_st, base_meta.root, None)
            root = IndexNode(0, v0, [IndexEntry(e.key, e.child, MODE_READONLY)
                                     for e in base_root.entries])
            addr = self._service.alloc_index(image, v0.seq, st.next_salt())
            st.dirty[addr] = root
            meta.owned_index.add(addr)
            meta.root = addr
            self.stats.nodes_created += 1
            st.head_reachable.add(addr)
        if base_meta.frozen_reachable:
            st.head_reachable |= base_meta.frozen_reachable
        st.versions[v0] = meta
        st.head = v0
        st.log.append(VersionLogEntry(v0, CAUSE_SNAPSHOT, self._tick()))
        with self._global_lock:
            self._images[image] = st
        return image, v0

    # -- introspection ---------------------------------------------------

    def image_exists(self, image) -> bool:
        return image in self._images

    def block_size(self, image) -> int:
        return self._state(image).block_size

    def capacity(self, image) -> int:
        return self._state(image).capacity

    def fanout(self, image) -> int:
        return self._state(image).fanout

    def head_version(self, image) -> VersionId:
        return self._state(image).head

    def versions(self, image) -> list[VersionId]:
        return list(self._state(image).versions)

    def version_log(self, image) -> list[VersionLogEntry]:
        return list(self._state(image).log)

    def head_index_addrs(self, image) -> frozenset[BlockAddress]:
        """Index-node blocks reachable from the current head root."""
        return frozenset(self._state(image).head_reachable)

    def root_address(self, version) -> BlockAddress | None:
        return self._meta(version).root

    def data_owner(self, addr) -> VersionId | None:
        return self._data_owner.get(addr)

    def new_data_key(self, version: VersionId) -> PlacementKey:
        """Fresh placement key for a data block of this version."""
        st = self._state(version.image)
        with st.lock:
            return PlacementKey(st.image, version.seq, "data", st.next_salt())

    def acquire_image(self, image) -> None:
        st = self._state(image)
        with st.lock:
            if st.attached:
                raise ConflictError(f"image {image} is already attached")
            st.attached = True

    def release_image(self, image) -> None:
        st = self._state(image)
        with st.lock:
            st.attached = False

    # -- core operations -------------------------------------------------

    def lookup(self, version: VersionId, vblock: int,
               reader: Callable[[BlockAddress], bytes | None] | None = None,
               ) -> BlockAddress | None:
        """Resolve a virtual block; None when never written in this version
        or any ancestor. A mapped block costs exactly 3 node fetches."""
        st = self._state(version.image)
        meta = self._meta(version)
        if not 0 <= vblock < st.capacity:
            raise RangeError(f"vblock {vblock} outside capacity {st.capacity}")
        self.stats.lookups += 1
        if meta.root is None:
            return None
        f = st.fanout
        node = self._fetch_node(st, meta.root, reader)
        for key in ((vblock // (f * f)) * f * f, (vblock // f) * f):
            entry = node.find(key)
            if entry is None:
                return None
            node = self._fetch_node(st, entry.child, reader)
        entry = node.find(vblock)
        return entry.child if entry is not None else None

    def map_write(self, version: VersionId, vblock: int, addr: BlockAddress) -> None:
        """Point vblock at a freshly written data block, copying any
        read-only index nodes on the path into this version."""
        st = self._state(version.image)
        meta = self._meta(version)
        if not meta.writeable or version != st.head:
            raise ReadOnlyError(f"{version} is not the writeable head")
        if not 0 <= vblock < st.capacity:
            raise RangeError(f"vblock {vblock} outside capacity {st.capacity}")
        f = st.fanout
        with st.lock:
            if meta.root is None:
                root = self._new_node(st, meta, version, level=0)
                meta.root = root.addr
            else:
                root = self._owned_node(st, meta, version, meta.root)
                if root.addr != meta.root:
                    meta.root = root.addr
            node = root
            for level, key in ((1, (vblock // (f * f)) * f * f), (2, (vblock // f) * f)):
                entry = node.node.find(key)
                if entry is None:
                    child = self._new_node(st, meta, version, level=level)
                elif entry.mode == MODE_WRITEABLE:
                    child = _Owned(entry.child, st.dirty[entry.child])
                else:
                    child = self._cow_node(st, meta, version, entry.child)
                node.node.set_entry(key, child.addr, MODE_WRITEABLE)
                node = child
            node.node.set_entry(vblock, addr, MODE_WRITEABLE)
            meta.owned_data.add(addr)
            with self._global_lock:
                self._data_owner[addr] = version

    def snapshot(self, version: VersionId, cause: str = CAUSE_SNAPSHOT,
                 node_sink: Callable[[BlockAddress, bytes], None] | None = None,
                 ) -> VersionId:
        """Freeze `version` and return a new writeable head.

        Freezing writes the version's dirty index nodes out exactly once;
        the new head is a single fresh root carrying read-only links to
        the previous root's children.
        """
        if cause not in _CAUSES:
            raise ValueError(f"unknown snapshot cause {cause!r}")
        st = self._state(version.image)
        meta = self._meta(version)
        if not meta.writeable or version != st.head:
            raise ReadOnlyError(f"cannot snapshot non-writeable {version}")
        with st.lock:
            prev_root = None
            if meta.root is not None:
                prev_root = self._fetch_node(st, meta.root, None)
            for naddr in sorted(st.dirty):
                data = encode_index_node(st.dirty[naddr], st.block_size)
                self._service.write_block(naddr, data)
                self.stats.nodes_written += 1
                if node_sink is not None:
                    node_sink(naddr, data)
            st.dirty.clear()
            meta.writeable = False
            meta.frozen_reachable = frozenset(st.head_reachable)

            new_vid = VersionId(st.image, st.next_seq, parent=version)
            st.next_seq += 1
            entries = []
            if prev_root is not None:
                entries = [IndexEntry(e.key, e.child, MODE_READONLY)
                           for e in prev_root.entries]
            new_meta = _VersionMeta(parent=version, root=None, writeable=True)
            naddr = self._service.alloc_index(st.image, new_vid.seq, st.next_salt())
            st.dirty[naddr] = IndexNode(0, new_vid, entries)
            new_meta.owned_index.add(naddr)
            new_meta.root = naddr
            self.stats.nodes_created += 1
            if meta.root is not None:
                st.head_reachable.discard(meta.root)
            st.head_reachable.add(naddr)
            st.versions[new_vid] = new_meta
            st.head = new_vid
            st.log.append(VersionLogEntry(new_vid, cause, self._tick()))
            return new_vid

    def collect_garbage(self, image: int, retain: set[VersionId],
                        on_free: Callable[[BlockAddress], None] | None = None,
                        ) -> int:
        """Drop versions outside `retain` (and non-ancestors) and free every
        block of this image unreachable from all retained roots."""
        st = self._state(image)
        retain = set(retain)
        with st.lock:
            for v in retain:
                if v not in st.versions:
                    raise NotFoundError(f"retain set names unknown version {v}")
            if st.head not in retain:
                raise HvstoError("retain set must include the writeable head")

            keep = set(retain)
            for v in retain:
                p = st.versions[v].parent
                while p is not None and p.image == image and p in st.versions:
                    if p in keep:
                        break
                    keep.add(p)
                    p = st.versions[p].parent

            image_index = set()
            tracked = set()
            for meta in st.versions.values():
                image_index |= meta.owned_index
                tracked |= meta.owned_index | meta.owned_data

            marked: set[BlockAddress] = set()
            for v in retain:
                root = st.versions[v].root
                if root is None:
                    continue
                stack = [root]
                while stack:
                    naddr = stack.pop()
                    if naddr in marked or naddr not in image_index:
                        continue
                    marked.add(naddr)
                    node = self._fetch_node(st, naddr, None)
                    for entry in node.entries:
                        if node.level == 2:
                            marked.add(entry.child)
                        else:
                            stack.append(entry.child)

            free_set = tracked - marked
            for addr in sorted(free_set):
                self._service.free_block(addr)
                if on_free is not None:
                    on_free(addr)
            self.stats.blocks_freed += len(free_set)
            with self._global_lock:
                for addr in free_set:
                    self._data_owner.pop(addr, None)
            for meta in st.versions.values():
                meta.owned_index -= free_set
                meta.owned_data -= free_set
            for v in list(st.versions):
                if v not in keep:
                    del st.versions[v]
            return len(free_set)

    # -- internals --------------------------------------------------------

    def _tick(self):
        with self._global_lock:
            self._ts += 1
            return self._ts

    def _state(self, image) -> _ImageState:
        st = self._images.get(image)
        if st is None:
            raise NotFoundError(f"unknown image {image}")
        return st

    def _meta(self, version) -> _VersionMeta:
        st = self._state(version.image)
        meta = st.versions.get(version)
        if meta is None:
            raise NotFoundError(f"unknown version {version}")
        return meta

    def _fetch_node(self, st, addr, reader) -> IndexNode:
        self.stats.node_fetches += 1
        node = st.dirty.get(addr)
        if node is not None:
            return node
        data = reader(addr) if reader is not None else self._service.read_block(addr)
        if data is None:
            raise NotFoundError(f"index node {addr} unreadable")
        return decode_index_node(data)

    def _new_node(self, st, meta, version, level) -> "_Owned":
        addr = self._service.alloc_index(st.image, version.seq, st.next_salt())
        node = IndexNode(level, version, [])
        st.dirty[addr] = node
        meta.owned_index.add(addr)
        st.head_reachable.add(addr)
        self.stats.nodes_created += 1
        return _Owned(addr, node)

    def _cow_node(self, st, meta, version, orig_addr) -> "_Owned":
        orig = self._fetch_node(st, orig_addr, None)
        node = IndexNode(orig.level, version,
                         [IndexEntry(e.key, e.child, MODE_READONLY) for e in orig.entries])
        addr = self._service.alloc_index(st.image, version.seq, st.next_salt())
        st.dirty[addr] = node
        meta.owned_index.add(addr)
        st.head_reachable.discard(orig_addr)
        st.head_reachable.add(addr)
        self.stats.nodes_created += 1
        return _Owned(addr, node)

    def _owned_node(self, st, meta, version, addr) -> "_Owned":
        node = st.dirty.get(addr)
        if node is not None and node.owner == version:
            return _Owned(addr, node)
        return self._cow_node(st, meta, version, addr)


class _Owned(NamedTuple):
    addr: BlockAddress
    node: IndexNode
