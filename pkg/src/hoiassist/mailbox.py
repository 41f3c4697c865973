"""Latest-value-wins handoff between execution contexts."""
from __future__ import annotations

import threading
from typing import Generic, Optional, TypeVar

T = TypeVar("T")


class LatestValue(Generic[T]):
    """Single-slot mailbox: writers overwrite, readers see the newest value.

    ``take`` consumes the value; ``peek`` leaves it in place. ``version``
    counts writes so a reader can tell whether anything new arrived.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._value: Optional[T] = None
        self._version = 0
        self._taken = True

    def put(self, value: T) -> None:
        with self._lock:
            self._value = value
            self._version += 1
            self._taken = False

    def peek(self) -> Optional[T]:
        with self._lock:
            return self._value

    def take(self) -> Optional[T]:
        """Newest unread value, or None if nothing arrived since the last take."""
        with self._lock:
            if self._taken:
                return None
            self._taken = True
            return self._value

    @property
    def version(self) -> int:
        with self._lock:
            return self._version
