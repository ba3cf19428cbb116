"""Exception types shared across the hvsto package."""


class HvstoError(Exception):
    """Base class for all hvsto errors."""


class CapacityError(HvstoError):
    """A resource (storage node, index address space, image) is full."""


class ReadOnlyError(HvstoError):
    """Attempt to mutate a read-only snapshot version."""


class NotFoundError(HvstoError):
    """Unknown image, version, node, or block address."""


class RangeError(HvstoError):
    """Offset/length or virtual block number outside the image."""


class AllocationError(HvstoError):
    """Invalid allocator transition: double free, free of unallocated id."""


class ConflictError(HvstoError):
    """Exclusive-access violation, e.g. attaching an already attached image."""


class TraceFormatError(HvstoError):
    """Malformed trace file; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class ScenarioError(HvstoError):
    """Leakage scenario parameters out of range (n > N, zero sizes, ...)."""
