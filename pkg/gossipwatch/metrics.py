"""
Metrics store and snapshot serialization.

The store is the single point where crawler tasks record what they observe:
peer metadata, connection events and per-topic first-delivery counters.
Snapshots are canonical JSON documents (sorted keys, UTF-8, integer
timestamps and counters, six-digit latency strings) and form the contract
between the crawler and the analyzer.
"""

import json
import re
import threading
from copy import deepcopy
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .errors import GossipwatchError, IoFailure
from .fileutils import atomic_write_text
from .gossip import DEFAULT_TOPICS
from .logging_utils import get_logger, log_warning
from .models import (
    ClientFamily,
    ConnectionEvent,
    EventKind,
    MetricsSnapshot,
    PeerInfo,
    PeerMetrics,
    quantize_latency,
)
from .schema import SnapshotSchema as S

logger = get_logger('metrics')

CLOCK_REGRESSION_TOLERANCE_MS = 1000
_LATENCY_PATTERN = re.compile(r'^\d+\.\d{6}$')


class UnknownTopic(GossipwatchError):
    """Raised when counting a message on a topic the store was not configured with."""
    pass


class SchemaViolation(GossipwatchError):
    """Raised when a snapshot file does not follow the snapshot schema."""
    pass


@dataclass(frozen=True)
class ClockRegression:
    """An event recorded more than the tolerance before the peer's last event."""
    peer_id: str
    t_ms: int
    last_t_ms: int

    @property
    def kind(self) -> str:
        return 'ClockRegression'


class MetricsStore:
    """
    Thread-safe accumulator of per-peer metrics.

    Attributes:
        topics: Configured topics (every peer's counters are zero-filled with them)
        host_node_id: Hex node id of the crawler
        network_id: Network the crawler joined
        flags: Clock regressions observed while recording events
    """

    def __init__(self, topics: List[str], host_node_id: str = '', network_id: str = ''):
        if not topics:
            raise ValueError("MetricsStore needs at least one topic")
        self.topics = list(topics)
        self.host_node_id = host_node_id
        self.network_id = network_id
        self.flags: List[ClockRegression] = []
        self._peers: Dict[str, PeerMetrics] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._peers)

    def __contains__(self, peer_id: str) -> bool:
        return peer_id in self._peers

    def _ensure(self, peer_id: str) -> PeerMetrics:
        metrics = self._peers.get(peer_id)
        if metrics is None:
            metrics = PeerMetrics(
                info=PeerInfo(peer_id=peer_id),
                counters={topic: 0 for topic in self.topics},
            )
            self._peers[peer_id] = metrics
        return metrics

    def upsert_info(self, info: PeerInfo):
        """Insert or replace a peer's metadata, keeping its events and counters."""
        with self._lock:
            self._ensure(info.peer_id).info = info

    def update_info(self, peer_id: str, **changes: Any):
        """Update selected metadata fields of a peer (stub created if unknown)."""
        with self._lock:
            info = self._ensure(peer_id).info
            for name, value in changes.items():
                if not hasattr(info, name) or name == 'peer_id':
                    raise AttributeError(f"PeerInfo has no updatable field '{name}'")
                setattr(info, name, value)
            info.client_family = ClientFamily(info.client_family)
            info.latency_s = quantize_latency(info.latency_s)

    def record_event(self, peer_id: str, kind: EventKind, t_ms: int) -> ConnectionEvent:
        """
        Record a connect or disconnect, keeping the event list sorted.

        An event more than one second older than the peer's last event is
        stored at its sorted position and flagged as a clock regression.
        """
        event = ConnectionEvent(peer_id=peer_id, kind=kind, t_ms=int(t_ms))
        with self._lock:
            events = self._ensure(peer_id).events
            if events and event.t_ms < events[-1].t_ms:
                last = events[-1].t_ms
                if last - event.t_ms > CLOCK_REGRESSION_TOLERANCE_MS:
                    self.flags.append(ClockRegression(peer_id, event.t_ms, last))
                    log_warning(
                        f"Clock regression for {peer_id}: event at {event.t_ms} after {last}", logger
                    )
                index = len(events)
                while index > 0 and events[index - 1].t_ms > event.t_ms:
                    index -= 1
                events.insert(index, event)
            else:
                events.append(event)
        return event

    def increment_counter(self, peer_id: str, topic: str) -> int:
        """
        Count one first-delivered message from a peer.

        Raises:
            UnknownTopic: If the topic is not configured
        """
        if topic not in self.topics:
            raise UnknownTopic(f"Unknown topic: {topic}")
        with self._lock:
            counters = self._ensure(peer_id).counters
            counters[topic] += 1
            return counters[topic]

    def peer(self, peer_id: str) -> PeerMetrics:
        """Copy of one peer's metrics."""
        with self._lock:
            return deepcopy(self._peers[peer_id])

    def peer_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._peers)

    def counter_totals(self) -> Dict[str, int]:
        with self._lock:
            totals = {topic: 0 for topic in self.topics}
            for metrics in self._peers.values():
                for topic, count in metrics.counters.items():
                    totals[topic] += count
            return totals

    def snapshot(self, captured_at_ms: int) -> MetricsSnapshot:
        """Consistent point-in-time copy, peers sorted by peer id."""
        with self._lock:
            peers = [deepcopy(self._peers[pid]) for pid in sorted(self._peers)]
        return MetricsSnapshot(
            captured_at_ms=int(captured_at_ms),
            host_node_id=self.host_node_id,
            network_id=self.network_id,
            peers=peers,
        )


# -- serialization ---------------------------------------------------------

def format_latency(value: Decimal) -> str:
    return format(quantize_latency(value), 'f')


def snapshot_to_dict(snapshot: MetricsSnapshot) -> Dict[str, Any]:
    peers = []
    for metrics in sorted(snapshot.peers, key=lambda m: m.peer_id):
        info = metrics.info
        peers.append({
            S.PEER_ID: info.peer_id,
            S.NODE_ID: info.node_id,
            S.PUBKEY: info.pubkey,
            S.MULTIADDR: info.multiaddr,
            S.IP: info.ip,
            S.COUNTRY: info.country,
            S.CITY: info.city,
            S.ISP: info.isp,
            S.CLIENT_FAMILY: info.client_family.value,
            S.CLIENT_VERSION: info.client_version,
            S.LATENCY_S: format_latency(info.latency_s),
            S.EVENTS: [{S.KIND: e.kind.value, S.T_MS: e.t_ms} for e in metrics.events],
            S.COUNTERS: {topic: int(count) for topic, count in metrics.counters.items()},
        })
    return {
        S.SCHEMA: S.VERSION,
        S.CAPTURED_AT_MS: snapshot.captured_at_ms,
        S.HOST_NODE_ID: snapshot.host_node_id,
        S.NETWORK_ID: snapshot.network_id,
        S.PEERS: peers,
    }


def dumps_snapshot(snapshot: MetricsSnapshot) -> str:
    """Canonical JSON text of a snapshot."""
    return json.dumps(snapshot_to_dict(snapshot), sort_keys=True, ensure_ascii=False, indent=2) + '\n'


def write_snapshot(
    store: Union[MetricsStore, MetricsSnapshot],
    path: Union[str, Path],
    captured_at_ms: Optional[int] = None,
) -> MetricsSnapshot:
    """
    Atomically write a snapshot of the store (or an existing snapshot).

    Raises:
        IoFailure: If the file cannot be written
    """
    if isinstance(store, MetricsStore):
        if captured_at_ms is None:
            raise ValueError("captured_at_ms is required when writing from a store")
        snapshot = store.snapshot(captured_at_ms)
    else:
        snapshot = store
    atomic_write_text(path, dumps_snapshot(snapshot))
    return snapshot


def _require(obj: Any, keys: List[str], where: str):
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{where or 'document'}: expected an object")
    missing = S.missing_keys(obj, keys)
    if missing:
        prefix = f"{where}." if where else ''
        raise SchemaViolation(f"Missing required field '{prefix}{missing[0]}'")


def _int_field(value: Any, where: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise SchemaViolation(f"Field '{where}' must be an integer >= {minimum}, got {value!r}")
    return value


def _str_field(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise SchemaViolation(f"Field '{where}' must be a string, got {value!r}")
    return value


def _parse_peer(raw: Any, where: str) -> PeerMetrics:
    _require(raw, S.REQUIRED_PEER, where)
    for key in (S.PEER_ID, S.NODE_ID, S.PUBKEY, S.MULTIADDR, S.IP, S.COUNTRY, S.CITY, S.CLIENT_VERSION):
        _str_field(raw[key], f"{where}.{key}")

    latency = _str_field(raw[S.LATENCY_S], f"{where}.{S.LATENCY_S}")
    if not _LATENCY_PATTERN.match(latency):
        raise SchemaViolation(f"Field '{where}.{S.LATENCY_S}' must have 6 fractional digits, got {latency!r}")

    try:
        family = ClientFamily(raw[S.CLIENT_FAMILY])
    except ValueError:
        raise SchemaViolation(f"Field '{where}.{S.CLIENT_FAMILY}' has unknown value {raw[S.CLIENT_FAMILY]!r}")

    isp = raw.get(S.ISP, S.OPTIONAL_PEER[S.ISP])
    try:
        info = PeerInfo(
            peer_id=raw[S.PEER_ID],
            node_id=raw[S.NODE_ID],
            pubkey=raw[S.PUBKEY],
            multiaddr=raw[S.MULTIADDR],
            ip=raw[S.IP],
            country=raw[S.COUNTRY],
            city=raw[S.CITY],
            isp=_str_field(isp, f"{where}.{S.ISP}"),
            client_family=family,
            client_version=raw[S.CLIENT_VERSION],
            latency_s=Decimal(latency),
        )
    except (ValueError, InvalidOperation) as e:
        raise SchemaViolation(f"{where}: {e}")

    raw_events = raw[S.EVENTS]
    if not isinstance(raw_events, list):
        raise SchemaViolation(f"Field '{where}.{S.EVENTS}' must be an array")
    events = []
    for i, raw_event in enumerate(raw_events):
        event_where = f"{where}.{S.EVENTS}[{i}]"
        _require(raw_event, S.REQUIRED_EVENT, event_where)
        try:
            kind = EventKind(raw_event[S.KIND])
        except ValueError:
            raise SchemaViolation(f"Field '{event_where}.{S.KIND}' has unknown value {raw_event[S.KIND]!r}")
        t_ms = _int_field(raw_event[S.T_MS], f"{event_where}.{S.T_MS}", minimum=1)
        if events and t_ms < events[-1].t_ms:
            raise SchemaViolation(f"Field '{event_where}.{S.T_MS}' is out of order")
        events.append(ConnectionEvent(peer_id=info.peer_id, kind=kind, t_ms=t_ms))

    raw_counters = raw[S.COUNTERS]
    if not isinstance(raw_counters, dict):
        raise SchemaViolation(f"Field '{where}.{S.COUNTERS}' must be an object")
    counters = {
        topic: _int_field(count, f"{where}.{S.COUNTERS}.{topic}")
        for topic, count in raw_counters.items()
    }
    return PeerMetrics(info=info, events=events, counters=counters)


def snapshot_from_dict(document: Any) -> MetricsSnapshot:
    """
    Validate and convert a parsed snapshot document.

    Raises:
        SchemaViolation: Naming the offending field path
    """
    _require(document, S.REQUIRED_TOP_LEVEL, '')
    if document[S.SCHEMA] != S.VERSION:
        raise SchemaViolation(f"Unsupported snapshot schema version: {document[S.SCHEMA]!r}")

    captured_at_ms = _int_field(document[S.CAPTURED_AT_MS], S.CAPTURED_AT_MS)
    host_node_id = _str_field(document[S.HOST_NODE_ID], S.HOST_NODE_ID)
    network_id = _str_field(document[S.NETWORK_ID], S.NETWORK_ID)

    raw_peers = document[S.PEERS]
    if not isinstance(raw_peers, list):
        raise SchemaViolation(f"Field '{S.PEERS}' must be an array")
    peers = [_parse_peer(raw, f"{S.PEERS}[{i}]") for i, raw in enumerate(raw_peers)]

    try:
        return MetricsSnapshot(
            captured_at_ms=captured_at_ms,
            host_node_id=host_node_id,
            network_id=network_id,
            peers=peers,
        )
    except ValueError as e:
        raise SchemaViolation(str(e))


def loads_snapshot(text: str) -> MetricsSnapshot:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"Invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    return snapshot_from_dict(document)


def read_snapshot(path: Union[str, Path]) -> MetricsSnapshot:
    """
    Read and validate a snapshot file.

    Raises:
        IoFailure: If the file cannot be read
        SchemaViolation: If the content does not follow the schema
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise IoFailure(f"Cannot read snapshot {path}: {e}")
    return loads_snapshot(text)


def snapshot_topics(snapshot: MetricsSnapshot) -> List[str]:
    """Topics present in a snapshot's counters, default topics first."""
    found = set()
    for metrics in snapshot.peers:
        found.update(metrics.counters)
    if not found:
        return list(DEFAULT_TOPICS)
    ordered = [topic for topic in DEFAULT_TOPICS if topic in found]
    ordered.extend(sorted(found - set(DEFAULT_TOPICS)))
    return ordered
