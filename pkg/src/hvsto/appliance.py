"""The local storage appliance: per-VM virtual disk sessions.

A session gives one VM byte-addressed access to its image, transparently
routing through the hybrid cache, the block index, placement and the
node store. Reads are served in priority order (write buffer, active
read cache, image cache for golden blocks, then remote); writes coalesce
in the per-VM write buffer, and a full buffer triggers the
rewrite-avoidance flush: snapshot, allocate fresh blocks, write, map.

Each session carries its own simulated-time lane so many sessions can
drive one cluster concurrently; contention shows up through the per-node
queues.
"""

from __future__ import annotations

from .errors import ConflictError, HvstoError, NotFoundError, RangeError
from .hybrid_cache import CacheConfig, HybridCache
from .mapping import CAUSE_WRITE_CACHE_FLUSH, MappingStore, VersionId
from .node_store import IndexBlockService, IoRequest, Op, Status, StorageCluster

_FLUSH_CAUSES = ("full", "save", "migrate")


class VDiskSession:
    """One VM's open handle on its image."""

    def __init__(self, appliance, vm_id, image):
        self.appliance = appliance
        self.vm_id = vm_id
        self.image = image
        self.block_size = appliance.store.block_size(image)
        self.capacity = appliance.store.capacity(image)
        self.open = True
        self.clock_us = appliance.cluster.simulated_now()
        self._fallback_buffer: dict = {}

    @property
    def head(self) -> VersionId:
        return self.appliance.store.head_version(self.image)

    def read(self, offset, length) -> bytes:
        return self.appliance.read(self, offset, length)

    def write(self, offset, data) -> None:
        self.appliance.write(self, offset, data)

    def save(self) -> VersionId:
        return self.appliance.save_or_migrate(self)


class Appliance:
    """Storage appliance of one virtualization server."""

    def __init__(self, cluster: StorageCluster, store: MappingStore | None = None,
                 cache_config: CacheConfig | None = None, name="srv0"):
        self.cluster = cluster
        self.store = store if store is not None else MappingStore(IndexBlockService(cluster))
        self.name = name
        self.sessions: dict = {}
        self.golden_images: set[int] = set()
        self.cache = None
        if cache_config is not None:
            self.cache = HybridCache(cache_config, protected_provider=self._protected_addrs)

    # -- image management --------------------------------------------------

    def create_image(self, block_size, capacity):
        return self.store.create_image(block_size, capacity)

    def register_golden(self, version: VersionId) -> None:
        """Mark an image as an administrator-maintained base image; its
        blocks become eligible for the shared LIRS image cache."""
        self.golden_images.add(version.image)

    def register_image_from_golden(self, golden: VersionId):
        """Clone a per-VM image off a golden version."""
        return self.store.clone_image(golden)

    def collect_garbage(self, image, retain) -> int:
        return self.store.collect_garbage(image, retain, on_free=self._invalidate)

    def _invalidate(self, addr):
        if self.cache is not None:
            self.cache.meta.invalidate(addr)
            self.cache.image.invalidate(addr)

    def _protected_addrs(self):
        protected = set()
        for session in self.sessions.values():
            if session.open:
                protected |= self.store.head_index_addrs(session.image)
        return protected

    # -- sessions ------------------------------------------------------------

    def attach(self, vm_id, image) -> VDiskSession:
        if not self.store.image_exists(image):
            raise NotFoundError(f"unknown image {image}")
        if vm_id in self.sessions:
            raise ConflictError(f"vm {vm_id} already has an open session")
        self.store.acquire_image(image)
        session = VDiskSession(self, vm_id, image)
        self.sessions[vm_id] = session
        if self.cache is not None:
            for other_vm in self.cache.active.attach(vm_id):
                self.flush_write_cache(self.sessions[other_vm], "full")
        return session

    def save_or_migrate(self, session) -> VersionId:
        self._require_open(session)
        head = self.flush_write_cache(session, "save")
        session.open = False
        self.sessions.pop(session.vm_id, None)
        if self.cache is not None:
            self.cache.active.detach(session.vm_id)
        self.store.release_image(session.image)
        return head

    def _require_open(self, session):
        if not session.open:
            raise HvstoError("session is closed")

    # -- data path -------------------------------------------------------

    def read(self, session, offset, length) -> bytes:
        self._require_open(session)
        if offset < 0 or length < 0 or offset + length > session.capacity * session.block_size:
            raise RangeError("read outside the virtual disk")
        if length == 0:
            return b""
        bs = session.block_size
        out = bytearray()
        for vblock in range(offset // bs, (offset + length - 1) // bs + 1):
            block = self._read_block(session, vblock)
            lo = max(offset, vblock * bs) - vblock * bs
            hi = min(offset + length, (vblock + 1) * bs) - vblock * bs
            out += block[lo:hi]
        return bytes(out)

    def write(self, session, offset, data) -> None:
        self._require_open(session)
        if offset < 0 or offset + len(data) > session.capacity * session.block_size:
            raise RangeError("write outside the virtual disk")
        if not data:
            return
        bs = session.block_size
        for vblock in range(offset // bs, (offset + len(data) - 1) // bs + 1):
            lo = max(offset, vblock * bs)
            hi = min(offset + len(data), (vblock + 1) * bs)
            piece = data[lo - offset:hi - offset]
            if len(piece) == bs:
                block = bytes(piece)
            else:
                # Partial block: read-modify-write in the buffer.
                current = bytearray(self._read_block(session, vblock))
                current[lo - vblock * bs:hi - vblock * bs] = piece
                block = bytes(current)
            if self.cache is not None:
                if self.cache.active.active_write(session.vm_id, vblock, block) == "flush-triggered":
                    self.flush_write_cache(session, "full")
            else:
                session._fallback_buffer[vblock] = block
        if self.cache is None and session._fallback_buffer:
            self.flush_write_cache(session, "full")

    def flush_write_cache(self, session, cause) -> VersionId:
        """Drain the write buffer into a fresh version (rewrite avoidance)."""
        if cause not in _FLUSH_CAUSES:
            raise ValueError(f"unknown flush cause {cause!r}")
        self._require_open(session)
        if self.cache is not None:
            buffer = self.cache.active.take_buffer(session.vm_id)
        else:
            buffer, session._fallback_buffer = session._fallback_buffer, {}
        if not buffer:
            return session.head
        store, cluster = self.store, self.cluster
        with cluster.issued_at(session.clock_us) as lane:
            head = store.snapshot(session.head, CAUSE_WRITE_CACHE_FLUSH,
                                  node_sink=self._admit_meta)
            for vblock in sorted(buffer):
                key = store.new_data_key(head)
                addr = cluster.alloc_block(key)
                cluster.write_block(addr, buffer[vblock])
                store.map_write(head, vblock, addr)
        session.clock_us = lane.at
        if self.cache is not None:
            self.cache.record_flush(cause)
        return head

    def _admit_meta(self, addr, data):
        if self.cache is not None:
            self.cache.meta.put(addr, data)

    def resolve(self, session, vblock):
        """Resolve through the block index, index fetches going through the
        metadata cache when present."""
        cost = self.cluster.cost

        def reader(addr):
            if self.cache is not None:
                data = self.cache.meta.get(addr)
                if data is not None:
                    session.clock_us += cost.local_ssd_us
                    return data
            resp = self.cluster.dispatch(
                IoRequest(Op.READ, addr=addr, request_id=self.cluster.next_request_id()),
                at=session.clock_us)
            session.clock_us = resp.completed_at_us
            if resp.status != Status.OK:
                return None
            if self.cache is not None:
                self.cache.meta.put(addr, resp.payload)
            return resp.payload

        return self.store.lookup(session.head, vblock, reader=reader)

    def _remote_read(self, session, addr) -> bytes:
        resp = self.cluster.dispatch(
            IoRequest(Op.READ, addr=addr, request_id=self.cluster.next_request_id()),
            at=session.clock_us)
        session.clock_us = resp.completed_at_us
        if resp.status != Status.OK:
            raise NotFoundError(f"data block {addr} unreadable: {resp.status.name}")
        return resp.payload

    def _is_golden_block(self, addr) -> bool:
        owner = self.store.data_owner(addr)
        return owner is not None and owner.image in self.golden_images

    def _read_block(self, session, vblock) -> bytes:
        bs = session.block_size
        if self.cache is not None:
            data, prefetch = self.cache.active.active_read(session.vm_id, vblock)
            if prefetch:
                self._issue_prefetch(session, prefetch)
            if data is not None:
                session.clock_us += self.cluster.cost.local_ssd_us
                return data
        addr = self.resolve(session, vblock)
        if addr is None:
            return b"\x00" * bs
        if self.cache is not None and self._is_golden_block(addr):
            data = self.cache.image.get(addr)
            if data is not None:
                session.clock_us += self.cluster.cost.local_ssd_us
                return data
            data = self._remote_read(session, addr)
            self.cache.image.put(addr, data)
            return data
        data = self._remote_read(session, addr)
        if self.cache is not None:
            self.cache.active.admit_read(session.vm_id, vblock, data)
        return data

    def _issue_prefetch(self, session, vblocks):
        """Fetch the prefetch window in parallel and admit what is mapped."""
        targets = []
        for vblock in vblocks:
            if vblock >= session.capacity:
                continue
            if self.cache.active.is_cached(session.vm_id, vblock):
                continue
            addr = self.resolve(session, vblock)
            if addr is not None:
                targets.append((vblock, addr))
        if not targets:
            return
        start = session.clock_us
        done = start
        for vblock, addr in targets:
            resp = self.cluster.dispatch(
                IoRequest(Op.READ, addr=addr, request_id=self.cluster.next_request_id()),
                at=start)
            done = max(done, resp.completed_at_us)
            if resp.status != Status.OK:
                continue
            if self._is_golden_block(addr):
                self.cache.image.put(addr, resp.payload)
            else:
                self.cache.active.admit_read(session.vm_id, vblock, resp.payload)
        session.clock_us = done
