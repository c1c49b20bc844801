"""
Ring: bounded single-producer/single-consumer queue shared by host and DPU.

Design notes:
- Strict SPSC usage: one producer (the host library) and one consumer (the
  DPU engine). No locks: each counter has exactly one writer and CPython
  makes the slot and counter stores atomic.
- head counts pushes and tail counts pops; both only grow. Occupancy is
  head - tail, never more than capacity.
- try_push returns False when full, which is the backpressure signal.
"""

from typing import Generic, List, Optional, Tuple, TypeVar

T = TypeVar("T")


class Ring(Generic[T]):
    def __init__(self, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError("capacity must be a power of two")
        self.capacity = capacity
        self._mask = capacity - 1
        self._slots: List[Optional[T]] = [None] * capacity
        self.head = 0
        self.tail = 0

    def __len__(self) -> int:
        return self.head - self.tail

    def is_empty(self) -> bool:
        return self.head == self.tail

    def is_full(self) -> bool:
        return self.head - self.tail == self.capacity

    def try_push(self, item: T) -> bool:
        head = self.head
        if head - self.tail == self.capacity:
            return False
        self._slots[head & self._mask] = item
        self.head = head + 1
        return True

    def try_pop(self) -> Tuple[bool, Optional[T]]:
        tail = self.tail
        if tail == self.head:
            return False, None
        idx = tail & self._mask
        item = self._slots[idx]
        self._slots[idx] = None
        self.tail = tail + 1
        return True, item

    def pop_batch(self, max_batch: int) -> List[T]:
        """Pop up to max_batch items in FIFO order."""
        tail = self.tail
        count = min(max_batch, self.head - tail)
        items = []
        for i in range(count):
            idx = (tail + i) & self._mask
            items.append(self._slots[idx])
            self._slots[idx] = None
        self.tail = tail + count
        return items
