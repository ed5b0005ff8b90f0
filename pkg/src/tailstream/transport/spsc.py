"""Bounded single-producer single-consumer ring buffer.

Each cursor is written by exactly one side. The producer stores the slot
before publishing ``_tail``; the consumer reads slots before publishing
``_head``. Under CPython, attribute stores are not reordered across
bytecodes, so a consumer observing a tail value sees every slot below it.
Neither side ever waits for the other: a full queue rejects, an empty queue
returns nothing.
"""

from __future__ import annotations


class SpscQueue:
    __slots__ = ("_ring", "_mask", "_capacity", "_head", "_tail")

    def __init__(self, capacity: int = 1024):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self._capacity = capacity
        self._mask = capacity - 1
        self._ring = [None] * capacity
        self._head = 0  # next slot to read; written by the consumer only
        self._tail = 0  # next slot to write; written by the producer only

    @property
    def capacity(self) -> int:
        return self._capacity

    def __len__(self) -> int:
        return self._tail - self._head

    def is_empty(self) -> bool:
        return self._tail == self._head

    def remaining_capacity(self) -> int:
        return self._capacity - (self._tail - self._head)

    # producer side

    def offer(self, item) -> bool:
        tail = self._tail
        if tail - self._head >= self._capacity:
            return False
        self._ring[tail & self._mask] = item
        self._tail = tail + 1
        return True

    def offer_all(self, items, start: int = 0) -> int:
        """Offer ``items[start:]`` in order; returns how many were accepted."""
        tail = self._tail
        free = self._capacity - (tail - self._head)
        n = min(free, len(items) - start)
        if n <= 0:
            return 0
        ring = self._ring
        pos = tail & self._mask
        first = min(n, self._capacity - pos)
        ring[pos:pos + first] = items[start:start + first]
        if first < n:
            ring[0:n - first] = items[start + first:start + n]
        self._tail = tail + n
        return n

    # consumer side

    def poll(self):
        """Return the next item or None when empty."""
        head = self._head
        if head == self._tail:
            return None
        idx = head & self._mask
        item = self._ring[idx]
        self._ring[idx] = None
        self._head = head + 1
        return item

    def poll_batch(self, max_items: int) -> list:
        """Remove and return up to ``max_items`` items in FIFO order."""
        head = self._head
        n = min(self._tail - head, max_items)
        if n <= 0:
            return []
        ring = self._ring
        pos = head & self._mask
        first = min(n, self._capacity - pos)
        batch = ring[pos:pos + first]
        if first < n:
            batch += ring[0:n - first]
        self._head = head + n
        return batch

    def peek(self):
        head = self._head
        if head == self._tail:
            return None
        return self._ring[head & self._mask]


def offer(queue: SpscQueue, item) -> bool:
    return queue.offer(item)


def poll(queue: SpscQueue, max_items: int) -> list:
    return queue.poll_batch(max_items)
