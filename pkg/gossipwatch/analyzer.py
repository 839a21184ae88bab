"""
Offline analysis of crawler snapshots.

Connection events arrive in batches (one per topic stream in some clients),
so events of the same kind within a short window are collapsed first. The
deduplicated events are paired into sessions, and the per-peer rows are
then aggregated with pandas into per-client and per-country tables plus a
summary with first-relayer concentration and outlier flags.
"""

from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .errors import GossipwatchError
from .identity import tcp_port_from_multiaddr
from .logging_utils import get_logger, log_step
from .metrics import snapshot_topics
from .models import (
    SIX_PLACES,
    ClientFamily,
    ConnectionEvent,
    EventKind,
    MetricsSnapshot,
    PeerMetrics,
)
from .schema import ReportSchema

logger = get_logger('analyzer')

MS_PER_MIN = Decimal(60_000)
PRYSM_DEFAULT_PORT = 13000


class UnsortedInput(GossipwatchError):
    """Raised when events handed to dedup are not in timestamp order."""
    pass


@dataclass(frozen=True)
class DedupPolicy:
    """Events of one kind closer than window_ms to the last kept one are dropped."""
    window_ms: int = 500

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError(f"window_ms must be positive, got {self.window_ms}")


@dataclass(frozen=True)
class OutlierRules:
    """
    Thresholds for flag_outliers.

    Attributes:
        rate_threshold: Messages per connected minute above which a short-lived peer is HighRate
        silent_threshold: Minutes connected without any message that make a peer Silent
        super_msg_threshold: Messages above which a long-lived peer is a SuperPeer
        super_time_threshold: Minutes connected a SuperPeer needs
    """
    rate_threshold: float = 200.0
    silent_threshold: float = 120.0
    super_msg_threshold: int = 10_000
    super_time_threshold: float = 600.0
    high_rate_max_minutes: float = 10.0


class OutlierFlag:
    HIGH_RATE = 'HighRate'
    SILENT = 'Silent'
    SUPER_PEER = 'SuperPeer'


def minutes(ms: int) -> Decimal:
    """Milliseconds to minutes, truncated to six fractional digits."""
    return (Decimal(ms) / MS_PER_MIN).quantize(SIX_PLACES, rounding=ROUND_DOWN)


def dedup_events(events: Sequence[ConnectionEvent], policy: Optional[DedupPolicy] = None) -> List[ConnectionEvent]:
    """
    Collapse batched events.

    An event is kept when no kept event of the same kind lies within the
    trailing window, the window being anchored at the last kept event of
    that kind.

    Raises:
        UnsortedInput: If events are not sorted by t_ms
    """
    window = (policy or DedupPolicy()).window_ms
    anchors: Dict[EventKind, int] = {}
    kept: List[ConnectionEvent] = []
    previous = None
    for event in events:
        if previous is not None and event.t_ms < previous:
            raise UnsortedInput(f"Event at {event.t_ms} follows one at {previous}")
        previous = event.t_ms

        anchor = anchors.get(event.kind)
        if anchor is not None and event.t_ms - anchor < window:
            continue
        anchors[event.kind] = event.t_ms
        kept.append(event)
    return kept


@dataclass
class SessionSummary:
    """
    Sessions paired from deduplicated events.

    Attributes:
        sessions: (start_ms, end_ms) per session
        orphan_disconnects: Timestamps of disconnects with no open session
        closed_by_disconnect: Sessions ended by an actual disconnect
    """
    sessions: List[Tuple[int, int]] = field(default_factory=list)
    orphan_disconnects: List[int] = field(default_factory=list)
    closed_by_disconnect: int = 0

    @property
    def total_ms(self) -> int:
        return sum(end - start for start, end in self.sessions)

    @property
    def total_connected_min(self) -> Decimal:
        return minutes(self.total_ms)


def connection_sessions(events: Sequence[ConnectionEvent], snapshot_end_ms: int) -> SessionSummary:
    """
    Pair each Connect with the next Disconnect.

    A Connect seen while a session is already open belongs to that session.
    A trailing open session closes at snapshot_end_ms; a Disconnect with no
    open session is recorded as an orphan and otherwise ignored.
    """
    summary = SessionSummary()
    start: Optional[int] = None
    for event in events:
        if event.kind == EventKind.CONNECT:
            if start is None:
                start = event.t_ms
        elif start is None:
            summary.orphan_disconnects.append(event.t_ms)
        else:
            summary.sessions.append((start, event.t_ms))
            summary.closed_by_disconnect += 1
            start = None

    if start is not None:
        summary.sessions.append((start, max(start, snapshot_end_ms)))
    return summary


@dataclass
class PeerDerived:
    """One analyzed peer: identity columns plus derived connection and message figures."""
    peer_id: str
    client_family: ClientFamily
    client_version: str
    country: str
    city: str
    isp: str
    ip: str
    latency_s: Decimal
    connections: int
    disconnections: int
    connected_time_min: Decimal
    counters: Dict[str, int]
    total_messages: int
    orphan_disconnects: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not (self.connections >= self.disconnections >= 0):
            raise ValueError(
                f"{self.peer_id}: connections ({self.connections}) < disconnections ({self.disconnections})"
            )


def derive_peer(
    metrics: PeerMetrics, topics: List[str], snapshot_end_ms: int, policy: Optional[DedupPolicy] = None
) -> PeerDerived:
    events = dedup_events(metrics.events, policy)
    summary = connection_sessions(events, snapshot_end_ms)
    info = metrics.info
    counters = {topic: int(metrics.counters.get(topic, 0)) for topic in topics}
    return PeerDerived(
        peer_id=info.peer_id,
        client_family=info.client_family,
        client_version=info.client_version,
        country=info.country,
        city=info.city,
        isp=info.isp,
        ip=info.ip,
        latency_s=info.latency_s,
        connections=sum(1 for e in events if e.kind == EventKind.CONNECT),
        disconnections=summary.closed_by_disconnect,
        connected_time_min=summary.total_connected_min,
        counters=counters,
        total_messages=sum(counters.values()),
        orphan_disconnects=summary.orphan_disconnects,
    )


def per_peer_frame(per_peer: Sequence[PeerDerived], topics: List[str]) -> pd.DataFrame:
    """Numeric view of the per-peer rows (decimals as floats) for aggregation."""
    columns = ReportSchema.per_peer_headers(topics)
    if not per_peer:
        return pd.DataFrame(columns=columns)
    rows = []
    for peer in per_peer:
        row = {
            'peer_id': peer.peer_id,
            'client_family': peer.client_family.value,
            'client_version': peer.client_version,
            'country': peer.country,
            'city': peer.city,
            'isp': peer.isp,
            'ip': peer.ip,
            'latency_s': float(peer.latency_s),
            'connections': peer.connections,
            'disconnections': peer.disconnections,
            'connected_time_min': float(peer.connected_time_min),
            'total_messages': peer.total_messages,
        }
        row.update(peer.counters)
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def version_counts(frame: pd.DataFrame) -> Dict[ClientFamily, int]:
    """Distinct client_version values per family, every family present (zero-filled)."""
    counts = {family: 0 for family in ClientFamily.ordered()}
    if frame.empty:
        return counts
    observed = frame.groupby('client_family')['client_version'].nunique()
    for family_name, count in observed.items():
        counts[ClientFamily(family_name)] = int(count)
    return counts


def per_client_table(frame: pd.DataFrame, topics: List[str]) -> pd.DataFrame:
    headers = ReportSchema.per_client_headers(topics)
    if frame.empty:
        return pd.DataFrame(columns=headers)

    aggregations = {
        'peer_count': ('peer_id', 'size'),
        'avg_connections': ('connections', 'mean'),
        'avg_disconnections': ('disconnections', 'mean'),
        'avg_connected_time_min': ('connected_time_min', 'mean'),
        'avg_latency_s': ('latency_s', 'mean'),
    }
    for topic in topics:
        aggregations[f'{topic}_total'] = (topic, 'sum')
        aggregations[f'{topic}_avg'] = (topic, 'mean')
    aggregations['version_count'] = ('client_version', 'nunique')

    table = frame.groupby('client_family').agg(**aggregations)
    order = [f.value for f in ClientFamily.ordered() if f.value in table.index]
    return table.reindex(order).reset_index()[headers]


def per_country_table(frame: pd.DataFrame) -> pd.DataFrame:
    if frame.empty:
        return pd.DataFrame(columns=ReportSchema.PER_COUNTRY_HEADERS)
    table = frame.groupby('country').size().reset_index(name='peer_count')
    return table.sort_values(['peer_count', 'country'], ascending=[False, True]).reset_index(drop=True)


def top_k_share(per_peer: Union[pd.DataFrame, Sequence[PeerDerived]], topic: str, k: int) -> float:
    """
    Share of a topic's messages first-delivered by the k busiest peers.

    Peers are ranked by count descending, ties by peer_id ascending. An
    all-zero topic has share 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not isinstance(per_peer, pd.DataFrame):
        per_peer = pd.DataFrame(
            [{'peer_id': p.peer_id, topic: p.counters.get(topic, 0)} for p in per_peer],
            columns=['peer_id', topic],
        )
    if per_peer.empty:
        return 0.0

    ranked = per_peer.sort_values([topic, 'peer_id'], ascending=[False, True])
    total = int(ranked[topic].sum())
    if total == 0:
        return 0.0
    return int(ranked[topic].head(k).sum()) / total


def flag_outliers(per_peer: Sequence[PeerDerived], rules: Optional[OutlierRules] = None) -> List[Tuple[str, str]]:
    """
    Flag peers whose message volume and connected time look anomalous.

    Returns:
        (peer_id, flag) pairs in peer_id order
    """
    rules = rules or OutlierRules()
    flags: List[Tuple[str, str]] = []
    for peer in sorted(per_peer, key=lambda p: p.peer_id):
        connected = float(peer.connected_time_min)
        total = peer.total_messages

        if connected < rules.high_rate_max_minutes and total > 0:
            rate = total / connected if connected > 0 else float('inf')
            if rate > rules.rate_threshold:
                flags.append((peer.peer_id, OutlierFlag.HIGH_RATE))
        if connected > rules.silent_threshold and total == 0:
            flags.append((peer.peer_id, OutlierFlag.SILENT))
        if total > rules.super_msg_threshold and connected > rules.super_time_threshold:
            flags.append((peer.peer_id, OutlierFlag.SUPER_PEER))
    return flags


@dataclass
class AnalysisReport:
    """
    Everything the analyzer derives from one snapshot.

    per_peer covers peers with at least one Connect; summary values are
    already rendered as strings.
    """
    topics: List[str]
    per_peer: List[PeerDerived]
    per_client: pd.DataFrame
    per_country: pd.DataFrame
    versions: Dict[ClientFamily, int]
    flags: List[Tuple[str, str]]
    summary: List[Tuple[str, str]]
    top_k: int = 10

    def frame(self) -> pd.DataFrame:
        return per_peer_frame(self.per_peer, self.topics)

    def summary_value(self, key: str) -> str:
        for name, value in self.summary:
            if name == key:
                return value
        raise KeyError(key)


def aggregate(
    snapshot: MetricsSnapshot,
    policy: Optional[DedupPolicy] = None,
    top_k: int = 10,
    rules: Optional[OutlierRules] = None,
) -> AnalysisReport:
    """Compute every table of the report from a snapshot."""
    policy = policy or DedupPolicy()
    topics = snapshot_topics(snapshot)
    log_step(f"Analyzing {len(snapshot.peers)} peers (window {policy.window_ms} ms, top-{top_k})", logger)

    derived = [derive_peer(m, topics, snapshot.captured_at_ms, policy) for m in snapshot.peers]
    orphans = sum(len(p.orphan_disconnects) for p in derived)
    if orphans:
        logger.warning(f"{orphans} disconnect events had no matching connect")

    per_peer = sorted((p for p in derived if p.connections > 0), key=lambda p: p.peer_id)
    frame = per_peer_frame(per_peer, topics)
    flags = flag_outliers(per_peer, rules)

    summary: List[Tuple[str, str]] = [
        ('peerstore_size', str(len(snapshot.peers))),
        ('connected_count', str(len(per_peer))),
        ('total_messages', str(sum(p.total_messages for p in per_peer))),
    ]
    for topic in topics:
        summary.append((f'top{top_k}_share_{topic}', f'{top_k_share(frame, topic, top_k):.6f}'))
    default_port = sum(
        1 for m in snapshot.peers if tcp_port_from_multiaddr(m.info.multiaddr) == PRYSM_DEFAULT_PORT
    )
    share = default_port / len(snapshot.peers) if snapshot.peers else 0.0
    summary.append(('default_port_share', f'{share:.6f}'))
    summary.append(('orphan_disconnects', str(orphans)))
    super_peers = [peer_id for peer_id, flag in flags if flag == OutlierFlag.SUPER_PEER]
    summary.append(('super_peers', ';'.join(super_peers)))

    return AnalysisReport(
        topics=topics,
        per_peer=per_peer,
        per_client=per_client_table(frame, topics),
        per_country=per_country_table(frame),
        versions=version_counts(frame),
        flags=flags,
        summary=summary,
        top_k=top_k,
    )
