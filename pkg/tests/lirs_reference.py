"""Independent reference LIRS simulator for conformance testing.

Plain-list transcription of the LIRS rules: stack holds recency (LIR
blocks plus HIR blocks whether resident or not), queue holds resident HIR
blocks in eviction order, and the stack bottom is pruned back to a LIR
block after every structural change. Kept deliberately naive (list
scans, no shared code with the production policy) so it can act as a
decision oracle.
"""


class ReferenceLirs:
    def __init__(self, capacity, hir_capacity):
        self.capacity = capacity
        self.hir_capacity = min(max(1, hir_capacity), capacity)
        self.lir_capacity = capacity - self.hir_capacity
        self.stack = []  # index 0 is the bottom (oldest)
        self.queue = []  # index 0 is evicted first
        self.is_lir = {}
        self.resident = set()
        self.lir_count = 0

    def access(self, key):
        """Returns (hit, evicted key or None)."""
        if key in self.resident:
            if self.is_lir[key]:
                self.stack.remove(key)
                self.stack.append(key)
                self._prune()
            elif key in self.stack:
                self.stack.remove(key)
                self.stack.append(key)
                self.is_lir[key] = True
                self.lir_count += 1
                self.queue.remove(key)
                self._demote_over_target()
            else:
                self.stack.append(key)
                self.queue.remove(key)
                self.queue.append(key)
            return True, None

        evicted = None
        if self.lir_count < self.lir_capacity:
            self.is_lir[key] = True
            self.lir_count += 1
            self.stack.append(key)
            self.resident.add(key)
            return False, None
        if len(self.resident) >= self.capacity:
            evicted = self.queue.pop(0)
            self.resident.remove(evicted)
            if evicted not in self.stack:
                del self.is_lir[evicted]
        if key in self.stack:
            self.stack.remove(key)
            self.stack.append(key)
            self.is_lir[key] = True
            self.lir_count += 1
            self.resident.add(key)
            self._demote_over_target()
        else:
            self.is_lir[key] = False
            self.stack.append(key)
            self.queue.append(key)
            self.resident.add(key)
        return False, evicted

    def _demote_over_target(self):
        while self.lir_count > self.lir_capacity:
            bottom = self.stack.pop(0)
            assert self.is_lir[bottom]
            self.is_lir[bottom] = False
            self.lir_count -= 1
            self.queue.append(bottom)
            self._prune()

    def _prune(self):
        while self.stack and not self.is_lir[self.stack[0]]:
            dropped = self.stack.pop(0)
            if dropped not in self.resident:
                del self.is_lir[dropped]
