"""
Record discovery and the peerstore.

The peerstore holds every verified node record the crawler has learned,
keyed by node id and indexed into XOR-distance buckets relative to the
local node. Lookups query the peers closest to a random target with
FindNode and admit whatever records come back; the discovery service
repeats that on a timer and hands newly inserted ids to the crawler.
"""

import heapq
import json
import queue
import random
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

from .errors import GossipwatchError
from .fileutils import atomic_write_text
from .identity import NodeRecord, network_id_text, verify_record
from .logging_utils import get_logger, log_success
from .scheduler import EventHandle, Scheduler
from .transport import (
    DiscoveryKind,
    DiscoveryMessage,
    Transport,
    TransportError,
)

logger = get_logger('discovery')

BUCKET_SIZE = 16
BUCKET_COUNT = 256
DEFAULT_ALPHA = 3
DEFAULT_TIMEOUT_MS = 2000


class AdmitOutcome(str, Enum):
    INSERTED = 'Inserted'
    UPDATED = 'Updated'
    IGNORED_STALE = 'IgnoredStale'
    REJECTED_INVALID = 'RejectedInvalid'


def xor_distance(a: bytes, b: bytes) -> int:
    return int.from_bytes(a, 'big') ^ int.from_bytes(b, 'big')


def log_distance(a: bytes, b: bytes) -> int:
    """Bit length of a XOR b: 0 for equal ids, 256 for ids differing in the top bit."""
    return xor_distance(a, b).bit_length()


def lookup_distances(distance: int) -> List[int]:
    """The distance itself, then the one above and the one below, kept within 1..256."""
    return [d for d in (distance, distance + 1, distance - 1) if 1 <= d <= 256]


@dataclass
class PeerEntry:
    record: NodeRecord
    first_seen_ms: int
    last_seen_ms: int

    @property
    def node_id(self) -> bytes:
        return self.record.node_id

    def to_dump(self) -> Dict[str, object]:
        return {
            'node_id': self.record.node_id.hex(),
            'seq': self.record.seq,
            'ip': self.record.ip,
            'tcp': self.record.tcp_port,
            'udp': self.record.udp_port,
            'network_id': network_id_text(self.record.network_id),
            'first_seen_ms': self.first_seen_ms,
            'last_seen_ms': self.last_seen_ms,
        }


class Peerstore:
    """
    DHT-backed store of node records.

    Buckets keep every known id in arrival order; the first `bucket_size`
    ids of each bucket form the routing view that lookups draw from, and
    the rest are kept as replacement entries.
    """

    def __init__(self, local_node_id: bytes, bucket_size: int = BUCKET_SIZE):
        self.local_node_id = local_node_id
        self.bucket_size = bucket_size
        self.entries: Dict[bytes, PeerEntry] = {}
        self.buckets: List[List[bytes]] = [[] for _ in range(BUCKET_COUNT)]
        self.admission_log: List[Tuple[bytes, int, AdmitOutcome]] = []
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, node_id: bytes) -> bool:
        return node_id in self.entries

    def __iter__(self) -> Iterator[PeerEntry]:
        return iter(self.snapshot())

    def get(self, node_id: bytes) -> Optional[PeerEntry]:
        return self.entries.get(node_id)

    def bucket_index(self, node_id: bytes) -> int:
        return log_distance(self.local_node_id, node_id) - 1

    def admit(self, record: NodeRecord, now_ms: int) -> AdmitOutcome:
        with self._lock:
            outcome = self._admit(record, now_ms)
            self.admission_log.append((record.node_id, record.seq, outcome))
            return outcome

    def _admit(self, record: NodeRecord, now_ms: int) -> AdmitOutcome:
        entry = self.entries.get(record.node_id)
        if entry is not None and entry.record == record:
            # Stored records were verified on insert
            entry.last_seen_ms = now_ms
            return AdmitOutcome.IGNORED_STALE

        if not verify_record(record):
            return AdmitOutcome.REJECTED_INVALID

        # Our own record is never stored
        if record.node_id == self.local_node_id:
            return AdmitOutcome.IGNORED_STALE

        if entry is None:
            self.entries[record.node_id] = PeerEntry(record, now_ms, now_ms)
            self.buckets[self.bucket_index(record.node_id)].append(record.node_id)
            return AdmitOutcome.INSERTED

        if record.seq > entry.record.seq:
            entry.record = record
            entry.last_seen_ms = now_ms
            return AdmitOutcome.UPDATED

        if record.seq == entry.record.seq:
            entry.last_seen_ms = now_ms
        return AdmitOutcome.IGNORED_STALE

    def routing_view(self) -> List[bytes]:
        """Ids eligible as lookup targets: the first bucket_size ids of every bucket."""
        with self._lock:
            view: List[bytes] = []
            for bucket in self.buckets:
                view.extend(bucket[:self.bucket_size])
            return view

    def closest(self, target: bytes, count: int) -> List[bytes]:
        """The `count` routing-view ids nearest to target by XOR distance."""
        return heapq.nsmallest(count, self.routing_view(), key=lambda nid: xor_distance(nid, target))

    def snapshot(self) -> List[PeerEntry]:
        """Consistent copy of all entries, sorted by node id."""
        with self._lock:
            return [replace(self.entries[nid]) for nid in sorted(self.entries)]

    def records(self) -> List[NodeRecord]:
        return [entry.record for entry in self.snapshot()]


def admit_record(peerstore: Peerstore, record: NodeRecord, now_ms: int) -> AdmitOutcome:
    """
    Admit a record into the peerstore.

    Returns:
        Inserted for unseen ids, Updated for a higher seq, IgnoredStale for
        an equal or lower seq (equal seq refreshes last_seen), and
        RejectedInvalid when the record does not verify
    """
    return peerstore.admit(record, now_ms)


def bootstrap(peerstore: Peerstore, bootnodes: List[NodeRecord], now_ms: int = 0) -> int:
    """
    Seed the peerstore with bootnode records.

    Returns:
        Number of records admitted; records that fail verification are skipped
    """
    admitted = 0
    for record in bootnodes:
        outcome = peerstore.admit(record, now_ms)
        if outcome == AdmitOutcome.REJECTED_INVALID:
            logger.warning(f"Skipping bootnode {record.node_id.hex()[:16]}: record does not verify")
            continue
        admitted += 1
    logger.debug(f"Bootstrapped peerstore with {admitted}/{len(bootnodes)} bootnodes")
    return admitted


def lookup_round(
    peerstore: Peerstore,
    transport: Transport,
    target: bytes,
    alpha: int = DEFAULT_ALPHA,
    now_ms: int = 0,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> List[bytes]:
    """
    Query the alpha stored peers closest to target and admit their answers.

    Each queried peer is asked for records at the log-distance of the
    target from itself and at the two neighbouring distances. Peers that
    time out contribute nothing.

    Returns:
        Node ids whose admission outcome was Inserted, in admission order
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")

    inserted: List[bytes] = []
    for node_id in peerstore.closest(target, alpha):
        entry = peerstore.get(node_id)
        if entry is None:
            continue
        request = DiscoveryMessage.find_node(*lookup_distances(log_distance(node_id, target)))
        try:
            replies = transport.discovery_request(entry.record, request, timeout_ms)
        except TransportError as e:
            logger.debug(f"FindNode to {node_id.hex()[:16]} failed: {e}")
            continue

        for reply in replies:
            if reply.kind != DiscoveryKind.NODES:
                continue
            for record in reply.records:
                if peerstore.admit(record, now_ms) == AdmitOutcome.INSERTED:
                    inserted.append(record.node_id)
    return inserted


def refresh_record(
    peerstore: Peerstore,
    transport: Transport,
    node_id: bytes,
    now_ms: int = 0,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> Optional[AdmitOutcome]:
    """
    Ping a stored peer and fetch its record again if its seq moved on.

    Returns:
        The admission outcome of the fetched record, or None when the peer
        did not answer or its seq is unchanged
    """
    entry = peerstore.get(node_id)
    if entry is None:
        return None
    try:
        pongs = transport.discovery_request(entry.record, DiscoveryMessage.ping(entry.record.seq), timeout_ms)
        remote_seq = max((m.seq or 0 for m in pongs if m.kind == DiscoveryKind.PONG), default=0)
        if remote_seq <= entry.record.seq:
            return None
        replies = transport.discovery_request(entry.record, DiscoveryMessage.find_node(0), timeout_ms)
    except TransportError as e:
        logger.debug(f"Refresh of {node_id.hex()[:16]} failed: {e}")
        return None

    outcome = None
    for reply in replies:
        for record in reply.records:
            if record.node_id == node_id:
                outcome = peerstore.admit(record, now_ms)
    return outcome


class DiscoveryService:
    """
    Periodic lookup task.

    Every `interval_ms` it runs one lookup round towards a random target
    and refreshes one stored record (round-robin). Newly inserted node ids
    are put on `subscriber`, each exactly once.
    """

    def __init__(
        self,
        peerstore: Peerstore,
        transport: Transport,
        scheduler: Scheduler,
        interval_ms: int = 1000,
        alpha: int = DEFAULT_ALPHA,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        rng: Optional[random.Random] = None,
    ):
        self.peerstore = peerstore
        self.transport = transport
        self.scheduler = scheduler
        self.interval_ms = interval_ms
        self.alpha = alpha
        self.timeout_ms = timeout_ms
        self.rng = rng or random.Random(0)
        self.subscriber: 'queue.Queue[bytes]' = queue.Queue()
        self.rounds = 0
        self._emitted: set = set()
        self._refresh_cursor = 0
        self._emit_known = False
        self._handle: Optional[EventHandle] = None
        self._running = False

    @property
    def running(self) -> bool:
        return self._running

    def start(self, emit_known: bool = True):
        """
        Start the service; the first round runs at the current virtual time.

        Args:
            emit_known: Let the first round also emit ids already in the
                peerstore (bootnodes)
        """
        if self._running:
            return
        self._running = True
        self._emit_known = emit_known
        self._handle = self.scheduler.schedule_after(0, self._round)

    def stop(self):
        self._running = False
        self.scheduler.cancel(self._handle)
        self._handle = None

    def _emit(self, node_ids: List[bytes]):
        for node_id in node_ids:
            if node_id in self._emitted:
                continue
            self._emitted.add(node_id)
            self.subscriber.put(node_id)

    def drain(self) -> List[bytes]:
        """Take every id waiting on the subscriber queue."""
        ids: List[bytes] = []
        while True:
            try:
                ids.append(self.subscriber.get_nowait())
            except queue.Empty:
                return ids

    def run_round(self) -> List[bytes]:
        """Run one lookup round (plus one record refresh) immediately."""
        now = self.scheduler.now_ms
        if self._emit_known:
            self._emit([entry.node_id for entry in self.peerstore.snapshot()])
            self._emit_known = False
        target = self.rng.getrandbits(256).to_bytes(32, 'big')
        inserted = lookup_round(self.peerstore, self.transport, target, self.alpha, now, self.timeout_ms)

        known = sorted(self.peerstore.entries)
        if known:
            node_id = known[self._refresh_cursor % len(known)]
            self._refresh_cursor += 1
            refresh_record(self.peerstore, self.transport, node_id, now, self.timeout_ms)

        self.rounds += 1
        self._emit(inserted)
        if inserted:
            logger.debug(f"Lookup round {self.rounds}: {len(inserted)} new peers, {len(self.peerstore)} known")
        return inserted

    def _round(self):
        if not self._running:
            return
        try:
            self.run_round()
        except GossipwatchError as e:
            logger.warning(f"Discovery round failed: {e}")
        if self._running:
            self._handle = self.scheduler.schedule_after(self.interval_ms, self._round)


def dump_peerstore(peerstore: Peerstore, path: Union[str, Path]) -> Path:
    """Write the peerstore as JSON lines, one entry per line, sorted by node id."""
    lines = [
        json.dumps(entry.to_dump(), sort_keys=True, ensure_ascii=False)
        for entry in peerstore.snapshot()
    ]
    target = atomic_write_text(path, ''.join(line + '\n' for line in lines))
    log_success(f"Peerstore dumped: {len(lines)} records -> {target}", logger)
    return target
