"""
Virtual-clock discrete-event scheduler.

All crawler services and the simulated network run as callbacks on one
scheduler. Events fire in timestamp order; events with equal timestamps
fire in the order they were scheduled.
"""

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Tuple

from .logging_utils import get_logger

logger = get_logger('scheduler')

# Beacon chain genesis, used as the default origin of virtual time
GENESIS_MS = 1606824023000


@dataclass
class EventHandle:
    """Handle returned by schedule_*; pass it to cancel()."""
    t: float
    seq: int
    callback: Callable[..., Any]
    args: Tuple[Any, ...] = field(default_factory=tuple)
    cancelled: bool = False


class Scheduler:
    """
    Event heap keyed by (time, insertion sequence).

    Attributes:
        now: Current virtual time in milliseconds
    """

    def __init__(self, start_ms: float = GENESIS_MS):
        self.now: float = float(start_ms)
        self._heap: List[Tuple[float, int, EventHandle]] = []
        self._seq = itertools.count()
        self._stopped = False
        self.events_processed = 0

    @property
    def now_ms(self) -> int:
        """Current time truncated to whole milliseconds."""
        return int(self.now)

    def schedule_at(self, t: float, callback: Callable[..., Any], *args: Any) -> EventHandle:
        if t < self.now:
            raise ValueError(f"Cannot schedule in the past: {t} < {self.now}")
        handle = EventHandle(t=float(t), seq=next(self._seq), callback=callback, args=args)
        heapq.heappush(self._heap, (handle.t, handle.seq, handle))
        return handle

    def schedule_after(self, delay: float, callback: Callable[..., Any], *args: Any) -> EventHandle:
        return self.schedule_at(self.now + max(0.0, delay), callback, *args)

    def cancel(self, handle: Optional[EventHandle]):
        if handle is not None:
            handle.cancelled = True

    def stop(self):
        """Make the running loop return after the current event."""
        self._stopped = True

    @property
    def stopped(self) -> bool:
        return self._stopped

    def pending(self) -> int:
        return sum(1 for _, _, handle in self._heap if not handle.cancelled)

    def run_until(self, t_end: float) -> int:
        """
        Process events with timestamp <= t_end, then advance the clock to t_end.

        Returns:
            Number of events processed during this call
        """
        processed = 0
        self._stopped = False
        while self._heap and not self._stopped:
            t, _, handle = self._heap[0]
            if t > t_end:
                break
            heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now = t
            handle.callback(*handle.args)
            processed += 1

        if not self._stopped:
            self.now = max(self.now, float(t_end))
        self.events_processed += processed
        logger.debug(f"Processed {processed} events, clock at {self.now:.1f}")
        return processed
