"""
Tests for redial backoff.
"""

import random

import pytest

from gossipwatch.backoff import BackoffConfig, BackoffTable, ExponentialBackoff


class TestExponentialBackoff:
    """Tests for ExponentialBackoff."""

    def test_doubling_from_thirty_seconds(self):
        """Test that delays start at 30 s and double."""
        backoff = ExponentialBackoff()
        assert [backoff.next_delay() for _ in range(4)] == [30_000, 60_000, 120_000, 240_000]
        assert backoff.attempts == 4

    def test_cap(self):
        """Test that delays are capped."""
        backoff = ExponentialBackoff(BackoffConfig(base_delay_ms=1000, max_delay_ms=5000))
        delays = [backoff.next_delay() for _ in range(6)]
        assert delays == [1000, 2000, 4000, 5000, 5000, 5000]

    def test_max_attempts(self):
        """Test that an exhausted backoff returns None."""
        backoff = ExponentialBackoff(BackoffConfig(max_attempts=2))
        assert backoff.next_delay() == 30_000
        assert backoff.next_delay() == 60_000
        assert backoff.next_delay() is None
        assert backoff.exhausted

    def test_reset(self):
        """Test that reset starts over from the base delay."""
        backoff = ExponentialBackoff()
        backoff.next_delay()
        backoff.next_delay()
        backoff.reset()
        assert backoff.attempts == 0
        assert backoff.next_delay() == 30_000

    def test_peek_does_not_advance(self):
        """Test that peek_delay leaves the attempt counter alone."""
        backoff = ExponentialBackoff()
        backoff.next_delay()
        assert backoff.peek_delay() == 60_000
        assert backoff.attempts == 1

    def test_jitter_is_seeded(self):
        """Test that jitter only depends on the rng seed."""
        config = BackoffConfig(jitter_factor=0.5)
        first = ExponentialBackoff(config, random.Random(3))
        second = ExponentialBackoff(config, random.Random(3))
        delays = [first.next_delay() for _ in range(5)]
        assert delays == [second.next_delay() for _ in range(5)]
        assert all(30_000 <= d <= 1_800_000 * 1.5 for d in delays)

    @pytest.mark.parametrize('kwargs', [
        {'base_delay_ms': 0},
        {'base_delay_ms': 10, 'max_delay_ms': 5},
        {'factor': 0},
    ])
    def test_invalid_config(self, kwargs):
        """Test that inconsistent settings are rejected."""
        with pytest.raises(ValueError):
            BackoffConfig(**kwargs)


class TestBackoffTable:
    """Tests for the per-peer BackoffTable."""

    def test_failure_schedules_retry(self):
        """Test that a failure sets the retry time."""
        table = BackoffTable()
        assert table.record_failure('peer-a', 1_000) == 31_000
        assert table.record_failure('peer-a', 31_000) == 91_000
        assert table.attempts('peer-a') == 2

    def test_due(self):
        """Test that only peers whose retry time passed are due."""
        table = BackoffTable()
        table.record_failure('peer-a', 0)
        table.schedule_retry('peer-b', 10_000)
        assert table.due(10_000) == {'peer-b': 10_000}
        assert table.due(30_000) == {'peer-a': 30_000, 'peer-b': 10_000}

    def test_reset_clears_state(self):
        """Test that reset forgets attempts and retry time."""
        table = BackoffTable()
        table.record_failure('peer-a', 0)
        table.reset('peer-a')
        assert table.attempts('peer-a') == 0
        assert table.retry_at('peer-a') is None

    def test_exhausted_peer_not_retried(self):
        """Test that an exhausted peer has no retry time."""
        table = BackoffTable(BackoffConfig(max_attempts=1))
        assert table.record_failure('peer-a', 0) == 30_000
        assert table.record_failure('peer-a', 30_000) is None
        assert table.retry_at('peer-a') is None
