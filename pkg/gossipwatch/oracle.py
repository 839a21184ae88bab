"""
Ground-truth checks for simulated runs.

The counter check replays the publish log through the delay graph: a copy
of every message leaves each peer connected to the crawler at publish time
and counts if it arrives while that same session is still open. The
earliest such copy (ties by peer id) is the one the crawler must have
credited. The duration check compares analyzer sessions with the session
schedule the simulator recorded.
"""

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .analyzer import DedupPolicy, connection_sessions, dedup_events
from .logging_utils import get_logger
from .models import MetricsSnapshot
from .simnet import GroundTruth

logger = get_logger('oracle')

DEFAULT_TOLERANCE_MS = 500


@dataclass(frozen=True)
class CounterMismatch:
    peer_id: str
    topic: str
    expected: int
    actual: int

    def describe(self) -> str:
        return f'counter peer={self.peer_id} topic={self.topic} expected={self.expected} actual={self.actual}'


@dataclass(frozen=True)
class DurationMismatch:
    peer_id: str
    index: int
    expected: Optional[Tuple[int, int]]
    actual: Optional[Tuple[int, int]]

    def describe(self) -> str:
        return f'session peer={self.peer_id} index={self.index} expected={self.expected} actual={self.actual}'


@dataclass
class VerificationReport:
    """Mismatches found by one check; an empty report is a pass."""
    check: str
    mismatches: List = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def lines(self) -> List[str]:
        status = 'ok' if self.ok else 'mismatch'
        return [f'{self.check}={status} checked={self.checked} mismatches={len(self.mismatches)}'] + [
            m.describe() for m in self.mismatches
        ]


class _SessionIndex:
    """Per-peer session intervals searchable by time."""

    def __init__(self, truth: GroundTruth):
        self.starts: Dict[str, List[int]] = {}
        self.ends: Dict[str, List[float]] = {}
        for peer_id, spans in truth.sessions.items():
            ordered = sorted(spans, key=lambda span: span[0])
            self.starts[peer_id] = [start for start, _ in ordered]
            self.ends[peer_id] = [float('inf') if end is None else end for _, end in ordered]

    def session_at(self, peer_id: str, t: float) -> Optional[int]:
        starts = self.starts.get(peer_id)
        if not starts:
            return None
        i = bisect_right(starts, t) - 1
        if i < 0 or t >= self.ends[peer_id][i]:
            return None
        return i

    def end_of(self, peer_id: str, i: int) -> float:
        return self.ends[peer_id][i]


def expected_counters(truth: GroundTruth) -> Dict[str, Dict[str, int]]:
    """First-relayer counts the crawler should hold, per peer and topic."""
    index = _SessionIndex(truth)
    delays = truth.link_delays
    topics = set(truth.topics)
    expected: Dict[str, Dict[str, int]] = {}
    connected = sorted(truth.sessions)

    for publish in truth.publish_log:
        if publish.topic not in topics:
            continue
        origin_delay = delays.get(publish.origin, 0)
        best: Optional[Tuple[float, str]] = None
        for peer_id in connected:
            i = index.session_at(peer_id, publish.t_ms)
            if i is None:
                continue
            delay = delays.get(peer_id, 0)
            path = 0 if peer_id == publish.origin else origin_delay + delay
            arrival = publish.t_ms + path + delay
            # The run processes events up to and including end_ms
            if arrival >= index.end_of(peer_id, i) or arrival > truth.end_ms:
                continue
            candidate = (arrival, peer_id)
            if best is None or candidate < best:
                best = candidate
        if best is not None:
            per_topic = expected.setdefault(best[1], {})
            per_topic[publish.topic] = per_topic.get(publish.topic, 0) + 1
    return expected


def verify_counters(snapshot: MetricsSnapshot, truth: GroundTruth) -> VerificationReport:
    """Diff snapshot counters against the replayed first-relayer counts."""
    expected = expected_counters(truth)
    actual = {m.peer_id: m.counters for m in snapshot.peers}
    report = VerificationReport(check='counters')

    for peer_id in sorted(set(expected) | set(actual)):
        want = expected.get(peer_id, {})
        have = actual.get(peer_id, {})
        for topic in sorted(set(want) | set(have) | set(truth.topics)):
            e, a = want.get(topic, 0), int(have.get(topic, 0))
            report.checked += 1
            if e != a:
                report.mismatches.append(CounterMismatch(peer_id, topic, e, a))

    if not report.ok:
        logger.warning(f"{len(report.mismatches)} counter mismatches")
    return report


def verify_durations(
    snapshot: MetricsSnapshot,
    truth: GroundTruth,
    tolerance_ms: int = DEFAULT_TOLERANCE_MS,
    policy: Optional[DedupPolicy] = None,
) -> VerificationReport:
    """
    Compare analyzer-derived sessions with the recorded schedule.

    A session mismatches when its start or end is off by more than
    tolerance_ms, or when one side has a session the other lacks.
    """
    policy = policy or DedupPolicy()
    events = {m.peer_id: m.events for m in snapshot.peers}
    report = VerificationReport(check='durations')

    for peer_id in sorted(set(truth.sessions) | {p for p, e in events.items() if e}):
        derived = connection_sessions(dedup_events(events.get(peer_id, []), policy), snapshot.captured_at_ms)
        actual = derived.sessions
        expected = truth.sessions_until_end(peer_id)
        for i in range(max(len(actual), len(expected))):
            want = expected[i] if i < len(expected) else None
            have = actual[i] if i < len(actual) else None
            report.checked += 1
            if want is None or have is None or any(abs(w - h) > tolerance_ms for w, h in zip(want, have)):
                report.mismatches.append(DurationMismatch(peer_id, i, want, have))

    if not report.ok:
        logger.warning(f"{len(report.mismatches)} session mismatches")
    return report
