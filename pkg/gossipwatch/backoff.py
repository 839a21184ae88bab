"""Exponential backoff for redialing peers that failed to connect.

The crawler keeps one backoff state per peer: every failed dial pushes the
next attempt further out, a successful connection resets it.
"""

import random
from dataclasses import dataclass
from typing import Dict, Optional


@dataclass(frozen=True)
class BackoffConfig:
    """Configuration for exponential backoff behavior."""

    base_delay_ms: int = 30_000       # First retry after 30 s
    factor: int = 2
    max_delay_ms: int = 1_800_000     # Cap at 30 min
    max_attempts: Optional[int] = None
    jitter_factor: float = 0.0

    def __post_init__(self):
        if self.base_delay_ms < 1 or self.max_delay_ms < self.base_delay_ms:
            raise ValueError("Backoff delays must satisfy 1 <= base_delay_ms <= max_delay_ms")
        if self.factor < 1:
            raise ValueError(f"Backoff factor must be >= 1, got {self.factor}")


class ExponentialBackoff:
    """Exponential backoff state machine for one peer.

    Usage:
        backoff = ExponentialBackoff()
        delay = backoff.next_delay()   # 30000
        delay = backoff.next_delay()   # 60000
        backoff.reset()
    """

    def __init__(self, config: Optional[BackoffConfig] = None, rng: Optional[random.Random] = None):
        self.config = config or BackoffConfig()
        self._rng = rng
        self._attempt: int = 0

    def next_delay(self) -> Optional[int]:
        """Get the next delay in ms, incrementing the attempt counter.

        Returns:
            Delay in milliseconds, or None if max attempts exhausted.
        """
        if self.exhausted:
            return None

        self._attempt += 1
        return self._calculate_delay()

    def peek_delay(self) -> int:
        """Preview the delay the next failure would get."""
        attempt = self._attempt
        self._attempt += 1
        try:
            return self._calculate_delay()
        finally:
            self._attempt = attempt

    def _calculate_delay(self) -> int:
        """delay = min(base * factor^(attempt-1), max) + jitter"""
        exponent = max(0, self._attempt - 1)
        exponential = self.config.base_delay_ms * (self.config.factor ** exponent)
        capped = min(exponential, self.config.max_delay_ms)

        if self.config.jitter_factor and self._rng is not None:
            capped += int(self._rng.uniform(0, capped * self.config.jitter_factor))
        return capped

    def reset(self) -> None:
        """Reset backoff state after successful connection."""
        self._attempt = 0

    @property
    def attempts(self) -> int:
        return self._attempt

    @property
    def exhausted(self) -> bool:
        return self.config.max_attempts is not None and self._attempt >= self.config.max_attempts


class BackoffTable:
    """Per-peer backoff states plus the earliest time each peer may be redialed."""

    def __init__(self, config: Optional[BackoffConfig] = None, rng: Optional[random.Random] = None):
        self.config = config or BackoffConfig()
        self._rng = rng
        self._states: Dict[str, ExponentialBackoff] = {}
        self._retry_at: Dict[str, int] = {}

    def record_failure(self, peer_id: str, now_ms: int) -> Optional[int]:
        """Register a failed dial; returns the retry time or None when exhausted."""
        state = self._states.setdefault(peer_id, ExponentialBackoff(self.config, self._rng))
        delay = state.next_delay()
        if delay is None:
            self._retry_at.pop(peer_id, None)
            return None
        self._retry_at[peer_id] = now_ms + delay
        return self._retry_at[peer_id]

    def schedule_retry(self, peer_id: str, retry_at_ms: int):
        """Set a retry time without counting a failure (used after disconnects)."""
        self._retry_at[peer_id] = retry_at_ms

    def reset(self, peer_id: str):
        state = self._states.get(peer_id)
        if state is not None:
            state.reset()
        self._retry_at.pop(peer_id, None)

    def retry_at(self, peer_id: str) -> Optional[int]:
        return self._retry_at.get(peer_id)

    def attempts(self, peer_id: str) -> int:
        state = self._states.get(peer_id)
        return state.attempts if state else 0

    def due(self, now_ms: int) -> Dict[str, int]:
        """Peers whose retry time has passed, mapped to that time."""
        return {peer_id: at for peer_id, at in self._retry_at.items() if at <= now_ms}

    def clear_retry(self, peer_id: str):
        self._retry_at.pop(peer_id, None)
