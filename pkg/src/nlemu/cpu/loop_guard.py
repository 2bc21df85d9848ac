"""Cycle detection over recent (eip, register/flag hash) pairs."""

from __future__ import annotations

from collections import deque
from typing import Sequence

CONTINUE = "continue"
LOOP_DETECTED = "loop_detected"


def loop_guard(history: Sequence[tuple[int, int]], window: int) -> str:
    """Return ``loop_detected`` if the newest pair already occurs among the
    ``window`` pairs recorded before it, else ``continue``."""
    if window <= 0 or len(history) < 2:
        return CONTINUE
    latest = history[-1]
    recent = history[max(0, len(history) - 1 - window):-1]
    return LOOP_DETECTED if latest in recent else CONTINUE


class LoopGuard:
    """Incremental form of :func:`loop_guard` used inside the chain runner."""

    __slots__ = ("window", "_recent", "_counts")

    def __init__(self, window: int):
        self.window = window
        self._recent: deque = deque()
        self._counts: dict = {}

    def observe(self, key) -> bool:
        """Record ``key``; True when it repeats within the window."""
        if self.window <= 0:
            return False
        counts = self._counts
        if key in counts:
            return True
        recent = self._recent
        recent.append(key)
        counts[key] = 1
        if len(recent) > self.window:
            old = recent.popleft()
            del counts[old]
        return False
