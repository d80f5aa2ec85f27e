"""Bounded FIFO windows used as the detector's memory."""
from __future__ import annotations

from collections import deque
from typing import Any, Iterator

from .errors import ContractViolation

class SlidingWindow:
    """Fixed-capacity FIFO that counts pushes since the last :meth:`mark_reset`."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("window capacity must be >= 1")
        self.capacity = int(capacity)
        self.items: deque = deque()
        self.replaced_since_mark = 0

    def push(self, x: Any):
        """Append ``x``; return the evicted oldest item, or ``None``."""
        self.items.append(x)
        self.replaced_since_mark += 1
        if len(self.items) > self.capacity:
            return self.items.popleft()
        return None

    def replaced_fraction(self) -> float:
        return min(1.0, self.replaced_since_mark / self.capacity)

    def mark_reset(self) -> None:
        self.replaced_since_mark = 0

    def clear(self) -> None:
        self.items.clear()
        self.replaced_since_mark = 0

    def is_full(self) -> bool:
        return len(self.items) >= self.capacity

    def to_list(self) -> list:
        return list(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator:
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __repr__(self) -> str:
        return f"SlidingWindow(capacity={self.capacity}, size={len(self.items)})"
