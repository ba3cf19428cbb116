"""hvsto: simulated privacy-preserving hybrid storage for VM disk images.

Virtual disks are sliced into small blocks sharded across simulated
storage nodes; a depth-3 copy-on-write index gives constant-cost reads
at any snapshot depth; a hybrid SSD cache (protected LRU, LIRS, per-VM
active space) absorbs the latency of the distributed layout; and the
leakage module quantifies what n compromised nodes out of N can
reconstruct. The bench harness reproduces the characteristic experiment
shapes on a laptop in simulated time.
"""

from .appliance import Appliance, VDiskSession
from .errors import (
    AllocationError,
    CapacityError,
    ConflictError,
    HvstoError,
    NotFoundError,
    RangeError,
    ReadOnlyError,
    ScenarioError,
    TraceFormatError,
)
from .hybrid_cache import CacheConfig, HybridCache
from .leakage import (
    LeakageReport,
    LeakageScenario,
    TraceRecord,
    expected_leakage,
    leak_probability,
    load_trace,
    monte_carlo_leakage,
    required_blocks,
    synthetic_trace,
)
from .mapping import MappingStore, VersionId
from .node_store import CostModel, IndexBlockService, IoRequest, IoResponse, Op, Status, StorageCluster
from .placement import BlockAddress, NodeRegistry, NodeSpec, PlacementKey, place

__version__ = "0.1.0"

__all__ = [
    "Appliance",
    "VDiskSession",
    "CacheConfig",
    "HybridCache",
    "MappingStore",
    "VersionId",
    "BlockAddress",
    "NodeRegistry",
    "NodeSpec",
    "PlacementKey",
    "place",
    "StorageCluster",
    "CostModel",
    "IndexBlockService",
    "IoRequest",
    "IoResponse",
    "Op",
    "Status",
    "LeakageReport",
    "LeakageScenario",
    "TraceRecord",
    "expected_leakage",
    "leak_probability",
    "load_trace",
    "monte_carlo_leakage",
    "required_blocks",
    "synthetic_trace",
    "HvstoError",
    "AllocationError",
    "CapacityError",
    "ConflictError",
    "NotFoundError",
    "RangeError",
    "ReadOnlyError",
    "ScenarioError",
    "TraceFormatError",
]
