"""Simulated storage nodes and the request transport.

Each node owns a block table and a single-server FIFO queue; the cluster
routes requests in three steps (pick destination, transfer, execute
locally) and advances a simulated microsecond clock. The serial resource
on a node is the media service time; requesters additionally pay the
network round trip, so requests to distinct nodes overlap while requests
to one node serialize.

The wire encoding (used by the optional loopback TCP transport and the
golden-file tests) is little-endian, length-prefixed:

    request:  u32 length | u64 request_id | u8 op | u32 node_id |
              u64 local_id | payload
    response: u32 length | u64 request_id | u8 status | u32 served_by |
              u64 local_id | payload
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import IntEnum

from .errors import AllocationError, CapacityError
from .placement import BlockAddress, BlockAllocator, NodeRegistry, PlacementKey, place


class Op(IntEnum):
    READ = 1
    WRITE = 2
    ALLOC = 3
    FREE = 4


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    FULL = 2
    ERROR = 3


@dataclass
class IoRequest:
    op: Op
    addr: BlockAddress | None = None
    payload: bytes | None = None
    request_id: int = 0
    # Placement key for ALLOC routing when no target node was chosen yet.
    key: PlacementKey | None = None


@dataclass
class IoResponse:
    request_id: int
    status: Status
    payload: bytes | None = None
    served_by: int = -1
    # ALLOC result; never carried in the payload field.
    addr: BlockAddress | None = None
    completed_at_us: int = 0


@dataclass
class CostModel:
    """Simulated service costs in microseconds per operation class."""

    local_ssd_us: int = 100
    remote_rtt_us: int = 500
    remote_media_us: int = 5000

    def __post_init__(self):
        if min(self.local_ssd_us, self.remote_rtt_us, self.remote_media_us) < 0:
            raise ValueError("cost model entries must be >= 0")


class SimClock:
    """Monotone simulated clock in integer microseconds."""

    def __init__(self):
        self.now_us = 0

    def advance_to(self, t_us):
        if t_us > self.now_us:
            self.now_us = t_us


class _IssueScope:
    __slots__ = ("at",)

    def __init__(self, at):
        self.at = at


class StorageNode:
    """One storage daemon: allocator + block table + FIFO service queue."""

    def __init__(self, node_id, capacity_blocks, block_size):
        self.node_id = node_id
        self.block_size = block_size
        self.allocator = BlockAllocator(capacity_blocks)
        self.blocks: dict[int, bytes] = {}
        self.busy_until_us = 0
        self._lock = threading.Lock()

    def execute(self, req: IoRequest) -> IoResponse:
        """Step 3: apply the request to the local block table."""
        with self._lock:
            if req.op == Op.ALLOC:
                try:
                    local_id = self.allocator.alloc()
                except CapacityError:
                    return IoResponse(req.request_id, Status.FULL, served_by=self.node_id)
                return IoResponse(
                    req.request_id, Status.OK, served_by=self.node_id,
                    addr=BlockAddress(self.node_id, local_id),
                )
            local_id = req.addr.local_id
            if req.op == Op.WRITE:
                if req.payload is None or len(req.payload) != self.block_size:
                    return IoResponse(req.request_id, Status.ERROR, served_by=self.node_id)
                if not self.allocator.is_live(local_id):
                    return IoResponse(req.request_id, Status.ERROR, served_by=self.node_id)
                self.blocks[local_id] = bytes(req.payload)
                return IoResponse(req.request_id, Status.OK, served_by=self.node_id)
            if req.op == Op.READ:
                data = self.blocks.get(local_id)
                if data is None:
                    return IoResponse(req.request_id, Status.NOT_FOUND, served_by=self.node_id)
                return IoResponse(req.request_id, Status.OK, payload=data, served_by=self.node_id)
            if req.op == Op.FREE:
                try:
                    self.allocator.free(local_id)
                except AllocationError:
                    return IoResponse(req.request_id, Status.ERROR, served_by=self.node_id)
                self.blocks.pop(local_id, None)
                return IoResponse(req.request_id, Status.OK, served_by=self.node_id)
            return IoResponse(req.request_id, Status.ERROR, served_by=self.node_id)


class StorageCluster:
    """The shared distributed storage: registry-backed node set + transport."""

    def __init__(self, registry: NodeRegistry, block_size=4096, cost: CostModel | None = None):
        self.registry = registry
        self.block_size = block_size
        self.cost = cost or CostModel()
        self.clock = SimClock()
        self.nodes = {
            spec.node_id: StorageNode(spec.node_id, spec.capacity_blocks, block_size)
            for spec in registry.nodes
        }
        self.write_log: list[BlockAddress] = []
        self._scope: _IssueScope | None = None
        self._next_request_id = 0
        self._id_lock = threading.Lock()

    def next_request_id(self):
        with self._id_lock:
            self._next_request_id += 1
            return self._next_request_id

    @contextmanager
    def issued_at(self, t_us):
        """Issue subsequent dispatches serially on a caller-managed lane.

        Within the scope each dispatch starts at the previous completion
        (program order on one lane); the scope's `at` ends up at the lane's
        final time.
        """
        prev = self._scope
        scope = _IssueScope(t_us)
        self._scope = scope
        try:
            yield scope
        finally:
            self._scope = prev

    def simulated_now(self) -> int:
        return self.clock.now_us

    def _route(self, req: IoRequest) -> int | None:
        if req.op == Op.ALLOC and req.addr is None:
            if req.key is None:
                return None
            return place(req.key, self.registry)
        return req.addr.node_id if req.addr is not None else None

    def dispatch(self, req: IoRequest, at: int | None = None) -> IoResponse:
        scoped = at is None and self._scope is not None
        if at is None:
            at = self._scope.at if scoped else self.clock.now_us
        node_id = self._route(req)
        node = self.nodes.get(node_id)
        if node is None:
            resp = IoResponse(req.request_id, Status.ERROR)
            resp.completed_at_us = at
            return resp
        start = max(at, node.busy_until_us)
        node.busy_until_us = start + self.cost.remote_media_us
        completion = node.busy_until_us + self.cost.remote_rtt_us
        resp = node.execute(req)
        if req.op == Op.WRITE and resp.status == Status.OK:
            self.write_log.append(req.addr)
        resp.completed_at_us = completion
        self.clock.advance_to(completion)
        if scoped:
            self._scope.at = completion
        return resp

    def dispatch_batch(self, reqs, at: int | None = None) -> list[IoResponse]:
        """Issue a batch concurrently: distinct nodes serve in parallel."""
        if at is None:
            at = self._scope.at if self._scope is not None else self.clock.now_us
        responses = [self.dispatch(req, at=at) for req in reqs]
        if self._scope is not None and responses:
            self._scope.at = max(self._scope.at,
                                 max(r.completed_at_us for r in responses))
        return responses

    # Block-service convenience layer used by the mapping store and the
    # appliance; every call goes through dispatch so costs and the write
    # log accrue normally.

    def alloc_block(self, key: PlacementKey, at: int | None = None) -> BlockAddress:
        """Allocate on the placed node, retrying in ring order when full."""
        home = place(key, self.registry)
        order = self.registry.node_ids()
        start = order.index(home)
        for i in range(len(order)):
            node_id = order[(start + i) % len(order)]
            req = IoRequest(Op.ALLOC, addr=BlockAddress(node_id, 0),
                            request_id=self.next_request_id())
            resp = self.dispatch(req, at=at)
            if resp.status == Status.OK:
                return resp.addr
            if resp.status != Status.FULL:
                raise CapacityError(f"alloc failed on node {node_id}: {resp.status.name}")
        raise CapacityError("all storage nodes full")

    def write_block(self, addr: BlockAddress, data: bytes, at: int | None = None) -> None:
        resp = self.dispatch(IoRequest(Op.WRITE, addr=addr, payload=data,
                                       request_id=self.next_request_id()), at=at)
        if resp.status != Status.OK:
            raise CapacityError(f"write to {addr} failed: {resp.status.name}")

    def read_block(self, addr: BlockAddress, at: int | None = None) -> bytes | None:
        resp = self.dispatch(IoRequest(Op.READ, addr=addr,
                                       request_id=self.next_request_id()), at=at)
        return resp.payload if resp.status == Status.OK else None

    def free_block(self, addr: BlockAddress, at: int | None = None) -> None:
        resp = self.dispatch(IoRequest(Op.FREE, addr=addr,
                                       request_id=self.next_request_id()), at=at)
        if resp.status != Status.OK:
            raise AllocationError(f"free of {addr} failed: {resp.status.name}")


class IndexBlockService:
    """Adapter giving the mapping layer alloc/read/write/free for index nodes."""

    def __init__(self, cluster: StorageCluster):
        self.cluster = cluster

    def alloc_index(self, image, owner_seq, salt) -> BlockAddress:
        return self.cluster.alloc_block(PlacementKey(image, owner_seq, "index", salt))

    def write_block(self, addr, data):
        self.cluster.write_block(addr, data)

    def read_block(self, addr):
        return self.cluster.read_block(addr)

    def free_block(self, addr):
        self.cluster.free_block(addr)


# Wire encoding ---------------------------------------------------------

_REQ_HEADER = struct.Struct("<QBIQ")
_RESP_HEADER = struct.Struct("<QBIQ")


def encode_request(req: IoRequest) -> bytes:
    addr = req.addr or BlockAddress(0, 0)
    body = _REQ_HEADER.pack(req.request_id, int(req.op), addr.node_id, addr.local_id)
    if req.payload:
        body += req.payload
    return struct.pack("<I", len(body)) + body


def decode_request(body: bytes) -> IoRequest:
    request_id, op, node_id, local_id = _REQ_HEADER.unpack_from(body)
    payload = body[_REQ_HEADER.size:] or None
    return IoRequest(Op(op), addr=BlockAddress(node_id, local_id),
                     payload=payload, request_id=request_id)


def encode_response(resp: IoResponse) -> bytes:
    local_id = resp.addr.local_id if resp.addr is not None else 0
    body = _RESP_HEADER.pack(resp.request_id, int(resp.status),
                             resp.served_by & 0xFFFFFFFF, local_id)
    if resp.payload:
        body += resp.payload
    return struct.pack("<I", len(body)) + body


def decode_response(body: bytes) -> IoResponse:
    request_id, status, served_by, local_id = _RESP_HEADER.unpack_from(body)
    payload = body[_RESP_HEADER.size:] or None
    resp = IoResponse(request_id, Status(status), payload=payload, served_by=served_by)
    if resp.status == Status.OK and payload is None:
        resp.addr = BlockAddress(served_by, local_id)
    return resp


def _recv_frame(sock) -> bytes | None:
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            return None
        header += chunk
    (length,) = struct.unpack("<I", header)
    body = b""
    while len(body) < length:
        chunk = sock.recv(length - len(body))
        if not chunk:
            return None
        body += chunk
    return body


class TcpNodeServer:
    """Loopback TCP front end for one storage node (integration realism).

    Uses the same frame encoding as the golden-file tests; meant for
    localhost experiments, not for the acceptance path.
    """

    def __init__(self, node: StorageNode, host="127.0.0.1", port=0):
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    body = _recv_frame(self.request)
                    if body is None:
                        return
                    req = decode_request(body)
                    resp = outer.node.execute(req)
                    self.request.sendall(encode_response(resp))

        self.node = node
        self._server = socketserver.ThreadingTCPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self):
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


class TcpTransport:
    """Client side of the TCP option: dispatch over a socket per node."""

    def __init__(self, endpoints: dict[int, tuple[str, int]]):
        self._endpoints = endpoints
        self._socks: dict[int, socket.socket] = {}

    def _sock(self, node_id):
        sock = self._socks.get(node_id)
        if sock is None:
            sock = socket.create_connection(self._endpoints[node_id])
            self._socks[node_id] = sock
        return sock

    def dispatch(self, req: IoRequest) -> IoResponse:
        sock = self._sock(req.addr.node_id)
        sock.sendall(encode_request(req))
        body = _recv_frame(sock)
        if body is None:
            return IoResponse(req.request_id, Status.ERROR)
        return decode_response(body)

    def close(self):
        for sock in self._socks.values():
            sock.close()
        self._socks.clear()
