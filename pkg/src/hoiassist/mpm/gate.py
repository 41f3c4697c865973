"""Stability gate: a decision is confirmed only when the last N agree."""
from __future__ import annotations

from collections import deque

# Stands in for an "infinite" no-decision output; any non-class sentinel would do.
NO_OUTPUT = None


class StabilityGate:
    def __init__(self, capacity: int = 10, num_classes: int | None = None):
        if capacity < 1:
            raise ValueError("gate capacity must be >= 1")
        self.capacity = capacity
        self.num_classes = num_classes
        self._queue: deque[int] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def entries(self) -> tuple[int, ...]:
        return tuple(self._queue)

    def push(self, decision: int) -> int | None:
        if self.num_classes is not None and not 0 <= decision < self.num_classes:
            raise ValueError(f"invalid class code {decision}")
        self._queue.append(int(decision))
        if len(self._queue) == self.capacity and len(set(self._queue)) == 1:
            return self._queue[0]
        return NO_OUTPUT

    def reset(self) -> None:
        self._queue.clear()


def gate_decision(gate: StabilityGate, decision: int) -> int | None:
    return gate.push(decision)
