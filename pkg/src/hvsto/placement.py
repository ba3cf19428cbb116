"""Deterministic sparse placement of blocks across storage nodes.

Placement is a pure function: a stable 64-bit hash of the placement key
(plus a per-cluster salt) modulo the node count. Per-node local block ids
are handed out by a BlockAllocator that prefers fresh ids and only recycles
freed ids once the fresh id space is exhausted, so freshly written blocks
land on never-written addresses whenever the node has headroom.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import struct
import threading
from dataclasses import dataclass
from typing import NamedTuple

from .errors import AllocationError, CapacityError


class BlockAddress(NamedTuple):
    """Physical location of one block: (storage node id, local block id)."""

    node_id: int
    local_id: int


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    capacity_blocks: int
    endpoint: str = ""


@dataclass(frozen=True)
class PlacementKey:
    """Identity of one logical block for placement purposes.

    kind distinguishes data blocks from index-node blocks; salt is a
    per-image sequence number so two logical blocks never share a key.
    """

    image: int
    version: int
    kind: str  # "data" | "index"
    salt: int


class NodeRegistry:
    """Fixed cluster membership. No rebalancing on membership change."""

    def __init__(self, nodes, salt=0):
        nodes = list(nodes)
        if not nodes:
            raise ValueError("registry needs at least one node")
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids in registry")
        self.nodes = nodes
        self.salt = salt

    @property
    def n(self):
        return len(self.nodes)

    def node_ids(self):
        return [n.node_id for n in self.nodes]

    def to_dict(self, block_size=4096):
        return {
            "nodes": [
                {"id": n.node_id, "capacity_blocks": n.capacity_blocks}
                | ({"endpoint": n.endpoint} if n.endpoint else {})
                for n in self.nodes
            ],
            "block_size": block_size,
            "salt": self.salt,
        }

    @classmethod
    def from_dict(cls, cfg):
        nodes = [
            NodeSpec(d["id"], d["capacity_blocks"], d.get("endpoint", ""))
            for d in cfg["nodes"]
        ]
        return cls(nodes, salt=cfg.get("salt", 0))


def load_cluster_config(path):
    """Read a cluster config JSON file -> (NodeRegistry, block_size)."""
    with open(path, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    return NodeRegistry.from_dict(cfg), int(cfg.get("block_size", 4096))


def save_cluster_config(path, registry, block_size):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(registry.to_dict(block_size), f, indent=2, sort_keys=True)
        f.write("\n")


_KEY_KINDS = {"data": 0, "index": 1}


def _key_digest(key: PlacementKey, salt: int) -> int:
    kind = _KEY_KINDS.get(key.kind)
    if kind is None:
        raise ValueError(f"unknown placement kind {key.kind!r}")
    packed = struct.pack("<QQBQQ", key.image, key.version, kind, key.salt, salt)
    h = hashlib.blake2b(packed, digest_size=8)
    return int.from_bytes(h.digest(), "little")


def place(key: PlacementKey, registry: NodeRegistry) -> int:
    """Map a placement key to a node id. Pure and deterministic."""
    return registry.nodes[_key_digest(key, registry.salt) % registry.n].node_id


class BlockAllocator:
    """Per-node local-id bookkeeping.

    Ids are drawn from a monotone counter while any id in [0, capacity)
    has never been used; freed ids are recycled from a min-heap only after
    that. Live count never exceeds capacity.
    """

    def __init__(self, capacity_blocks):
        if capacity_blocks < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity_blocks
        self._next = 0
        self._free: list[int] = []
        self._live: set[int] = set()
        self._lock = threading.Lock()

    @property
    def live_count(self):
        return len(self._live)

    def is_live(self, local_id):
        return local_id in self._live

    def alloc(self) -> int:
        with self._lock:
            if len(self._live) >= self.capacity:
                raise CapacityError(f"node full ({self.capacity} blocks live)")
            if self._next < self.capacity:
                local_id = self._next
                self._next += 1
            else:
                local_id = heapq.heappop(self._free)
            self._live.add(local_id)
            return local_id

    def free(self, local_id) -> None:
        with self._lock:
            if local_id not in self._live:
                raise AllocationError(f"free of non-live local id {local_id}")
            self._live.remove(local_id)
            heapq.heappush(self._free, local_id)
