"""
Simplified GossipSub router.

The router keeps per-topic meshes, a TTL-bounded seen cache, a message
cache for IWANT answers and an append-only delivery log. The first peer a
full message arrives from is credited through the `on_first_delivery`
hook; later copies are duplicates and change nothing.

Outgoing traffic is not sent directly: every action appends a frame to
`router.outbox`, which the owning host drains and hands to its transport.
"""

import hashlib
import random
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Deque, Dict, Iterable, List, Optional, Set, Tuple, Union

from .errors import GossipwatchError
from .fileutils import write_csv
from .logging_utils import get_logger
from .schema import ReportSchema

logger = get_logger('gossip')

DEFAULT_TOPICS: List[str] = [
    'BeaconBlock',
    'BeaconAggregateAndProof',
    'VoluntaryExit',
    'ProposerSlashing',
    'AttesterSlashing',
]


class AlreadySubscribed(GossipwatchError):
    """Raised when subscribing to a topic twice."""
    pass


class NotSubscribed(GossipwatchError):
    """Raised when publishing to or leaving a topic the router is not in."""
    pass


@dataclass(frozen=True)
class GossipParams:
    """
    Mesh and gossip parameters.

    Attributes:
        D: Target mesh degree
        D_low: Graft below this degree
        D_high: Prune above this degree
        heartbeat_ms: Heartbeat period
        seen_ttl_ms: Lifetime of seen-cache and message-cache entries
        gossip_window: Heartbeats whose messages are announced with IHAVE
        gossip_sample: Non-mesh peers receiving IHAVE per topic and heartbeat
    """
    D: int = 6
    D_low: int = 4
    D_high: int = 12
    heartbeat_ms: int = 700
    seen_ttl_ms: int = 120_000
    gossip_window: int = 3
    gossip_sample: int = 6

    def __post_init__(self):
        if not (1 <= self.D_low <= self.D <= self.D_high):
            raise ValueError(
                f"Mesh degrees must satisfy 1 <= D_low <= D <= D_high, "
                f"got {self.D_low}/{self.D}/{self.D_high}"
            )
        if self.heartbeat_ms < 1 or self.seen_ttl_ms < 1 or self.gossip_window < 1:
            raise ValueError("Heartbeat, TTL and gossip window must be positive")


def compute_msg_id(topic: str, payload: bytes) -> bytes:
    """msg_id = SHA-256(topic name || payload)."""
    return hashlib.sha256(topic.encode('utf-8') + payload).digest()


@dataclass(frozen=True)
class GossipMessage:
    """A topic-addressed payload and its derived message id."""
    topic: str
    payload: bytes
    msg_id: bytes = b''

    def __post_init__(self):
        expected = compute_msg_id(self.topic, self.payload)
        if not self.msg_id:
            object.__setattr__(self, 'msg_id', expected)
        elif self.msg_id != expected:
            raise ValueError("msg_id does not match topic and payload")


class DeliveryOutcome(str, Enum):
    DELIVERED_FIRST = 'DeliveredFirst'
    DUPLICATE = 'Duplicate'
    IGNORED = 'Ignored'


@dataclass(frozen=True)
class DeliveryRecord:
    msg_id: bytes
    topic: str
    first_relayer: str
    t_ms: int


# -- outgoing frames -------------------------------------------------------

@dataclass(frozen=True)
class Forward:
    peer_id: str
    message: GossipMessage


@dataclass(frozen=True)
class Graft:
    peer_id: str
    topic: str


@dataclass(frozen=True)
class Prune:
    peer_id: str
    topic: str


@dataclass(frozen=True)
class IHave:
    peer_id: str
    topic: str
    msg_ids: Tuple[bytes, ...]


@dataclass(frozen=True)
class IWant:
    peer_id: str
    msg_ids: Tuple[bytes, ...]


Frame = Union[Forward, Graft, Prune, IHave, IWant]


@dataclass
class HeartbeatActions:
    grafts: List[Graft] = field(default_factory=list)
    prunes: List[Prune] = field(default_factory=list)
    ihaves: List[IHave] = field(default_factory=list)


def select_from_minus(
    rng: random.Random, num_to_select: int, pool: Iterable[str], minus: Iterable[str]
) -> List[str]:
    """
    Randomly select at most num_to_select elements of (pool - minus).

    The pool is sorted first so that selection only depends on the rng state.
    """
    excluded = set(minus)
    selection_pool = sorted(x for x in pool if x not in excluded)
    if num_to_select >= len(selection_pool):
        return selection_pool
    return rng.sample(selection_pool, num_to_select)


class Router:
    """
    GossipSub router state for one host.

    Attributes:
        local_peer_id: Peer id of the owning host (origin of own publishes)
        subscriptions: Topics the host joined
        mesh: Per-topic mesh peers
        fanout: Per-topic known peers outside the mesh
        peer_topics: Topics each connected peer is subscribed to
        delivery_log: One entry per message delivered first
        outbox: Frames waiting to be sent
    """

    def __init__(
        self,
        local_peer_id: str,
        params: Optional[GossipParams] = None,
        rng: Optional[random.Random] = None,
        on_first_delivery: Optional[Callable[[str, str], None]] = None,
    ):
        self.local_peer_id = local_peer_id
        self.params = params or GossipParams()
        self.rng = rng or random.Random(0)
        self.on_first_delivery = on_first_delivery

        self.subscriptions: Set[str] = set()
        self.mesh: Dict[str, Set[str]] = {}
        self.fanout: Dict[str, Set[str]] = {}
        self.peer_topics: Dict[str, Set[str]] = {}

        # msg_id -> (first relayer, arrival ms), oldest first
        self.seen: 'OrderedDict[bytes, Tuple[str, float]]' = OrderedDict()
        self.message_cache: 'OrderedDict[bytes, Tuple[GossipMessage, float]]' = OrderedDict()
        self.delivery_log: List[DeliveryRecord] = []
        self._logged: Set[bytes] = set()

        # msg_id -> (peer asked, heartbeat count at request time)
        self.pending_iwant: Dict[bytes, Tuple[str, int]] = {}
        self.history: Deque[List[Tuple[str, bytes]]] = deque([[]], maxlen=self.params.gossip_window)
        self.heartbeat_count = 0

        self.outbox: List[Frame] = []

    # -- membership --------------------------------------------------------

    def subscribe(self, topic: str):
        if topic in self.subscriptions:
            raise AlreadySubscribed(f"Already subscribed to '{topic}'")
        self.subscriptions.add(topic)
        self.mesh[topic] = set()
        self.fanout[topic] = {p for p, topics in self.peer_topics.items() if topic in topics}
        logger.debug(f"Subscribed to {topic}")

    def unsubscribe(self, topic: str):
        if topic not in self.subscriptions:
            raise NotSubscribed(f"Not subscribed to '{topic}'")
        for peer_id in sorted(self.mesh.pop(topic)):
            self.outbox.append(Prune(peer_id, topic))
        self.fanout.pop(topic, None)
        self.subscriptions.discard(topic)

    def add_peer(self, peer_id: str, topics: Iterable[str]):
        """Register a connected peer and the topics it is subscribed to."""
        self.peer_topics[peer_id] = set(topics)
        for topic in self.peer_topics[peer_id] & self.subscriptions:
            if peer_id not in self.mesh[topic]:
                self.fanout[topic].add(peer_id)

    def remove_peer(self, peer_id: str):
        self.peer_topics.pop(peer_id, None)
        for members in self.mesh.values():
            members.discard(peer_id)
        for members in self.fanout.values():
            members.discard(peer_id)
        # Let other peers be asked for what this one still owed us
        for msg_id in [m for m, (p, _) in self.pending_iwant.items() if p == peer_id]:
            del self.pending_iwant[msg_id]

    def handle_graft(self, peer_id: str, topic: str) -> bool:
        """Accept a GRAFT while the topic's mesh is below D_high."""
        members = self.mesh.get(topic)
        if members is None or peer_id not in self.peer_topics:
            self.outbox.append(Prune(peer_id, topic))
            return False
        if peer_id in members:
            return True
        if len(members) >= self.params.D_high:
            self.outbox.append(Prune(peer_id, topic))
            return False
        members.add(peer_id)
        self.fanout[topic].discard(peer_id)
        return True

    def handle_prune(self, peer_id: str, topic: str):
        if topic in self.mesh and peer_id in self.mesh[topic]:
            self.mesh[topic].discard(peer_id)
            if topic in self.peer_topics.get(peer_id, ()):
                self.fanout[topic].add(peer_id)

    # -- messages ----------------------------------------------------------

    def is_seen(self, msg_id: bytes) -> bool:
        return msg_id in self.seen

    def _remember(self, message: GossipMessage, relayer: str, now: float):
        self.seen[message.msg_id] = (relayer, now)
        self.message_cache[message.msg_id] = (message, now)
        self.history[0].append((message.topic, message.msg_id))
        self.pending_iwant.pop(message.msg_id, None)

    def _forward(self, message: GossipMessage, exclude: Optional[str] = None) -> int:
        targets = sorted(p for p in self.mesh.get(message.topic, ()) if p != exclude)
        for peer_id in targets:
            self.outbox.append(Forward(peer_id, message))
        return len(targets)

    def handle_full_message(self, from_peer: str, message: GossipMessage, now: float) -> DeliveryOutcome:
        """
        Process a full message copy.

        Returns:
            DeliveredFirst for the first copy on a subscribed topic, Duplicate
            for later copies, Ignored for unsubscribed topics
        """
        if message.topic not in self.subscriptions:
            return DeliveryOutcome.IGNORED

        if message.msg_id in self.seen or message.msg_id in self._logged:
            return DeliveryOutcome.DUPLICATE

        self._remember(message, from_peer, now)
        self._logged.add(message.msg_id)
        self.delivery_log.append(DeliveryRecord(message.msg_id, message.topic, from_peer, int(now)))
        if self.on_first_delivery is not None:
            self.on_first_delivery(from_peer, message.topic)
        self._forward(message, exclude=from_peer)
        return DeliveryOutcome.DELIVERED_FIRST

    def handle_ihave(self, from_peer: str, topic: str, msg_ids: Iterable[bytes]) -> List[bytes]:
        """
        Decide which announced ids to request.

        Returns ids that are unseen, on a subscribed topic and not already
        requested from another peer; they are recorded as pending.
        """
        if topic not in self.subscriptions:
            return []

        wanted: List[bytes] = []
        for msg_id in msg_ids:
            if msg_id in self.seen or msg_id in self.pending_iwant or msg_id in wanted:
                continue
            wanted.append(msg_id)

        for msg_id in wanted:
            self.pending_iwant[msg_id] = (from_peer, self.heartbeat_count)
        if wanted:
            self.outbox.append(IWant(from_peer, tuple(wanted)))
        return wanted

    def handle_iwant(self, from_peer: str, msg_ids: Iterable[bytes], now: float) -> List[GossipMessage]:
        """Return (and queue for sending) cached messages still within the TTL."""
        found: List[GossipMessage] = []
        for msg_id in msg_ids:
            entry = self.message_cache.get(msg_id)
            if entry is None:
                continue
            message, cached_at = entry
            if now - cached_at >= self.params.seen_ttl_ms:
                continue
            found.append(message)
            self.outbox.append(Forward(from_peer, message))
        return found

    def publish(self, topic: str, payload: bytes, now: float) -> GossipMessage:
        """
        Publish a message originating at this host.

        Raises:
            NotSubscribed: If the topic was not joined
        """
        if topic not in self.subscriptions:
            raise NotSubscribed(f"Cannot publish on '{topic}': not subscribed")
        message = GossipMessage(topic=topic, payload=payload)
        if message.msg_id not in self.seen:
            self._remember(message, self.local_peer_id, now)
        self._forward(message)
        return message

    # -- maintenance -------------------------------------------------------

    def _expire(self, now: float):
        ttl = self.params.seen_ttl_ms
        for cache in (self.seen, self.message_cache):
            while cache:
                msg_id, (_, t) = next(iter(cache.items()))
                if now - t < ttl:
                    break
                cache.popitem(last=False)

        horizon = self.heartbeat_count - self.params.gossip_window
        for msg_id in [m for m, (_, hb) in self.pending_iwant.items() if hb <= horizon]:
            del self.pending_iwant[msg_id]

    def heartbeat(self, now: float) -> HeartbeatActions:
        """
        Maintain meshes and emit gossip.

        Grafts up to D when a mesh is below D_low, prunes down to D when it
        is above D_high, and announces the ids seen during the last
        gossip_window heartbeats to a sample of non-mesh peers.
        """
        self._expire(now)
        actions = HeartbeatActions()
        params = self.params

        window: Dict[str, List[bytes]] = {}
        for bucket in self.history:
            for topic, msg_id in bucket:
                window.setdefault(topic, []).append(msg_id)

        for topic in sorted(self.subscriptions):
            members = self.mesh[topic]
            outside = self.fanout[topic]

            if len(members) < params.D_low:
                for peer_id in select_from_minus(self.rng, params.D - len(members), outside, members):
                    members.add(peer_id)
                    outside.discard(peer_id)
                    actions.grafts.append(Graft(peer_id, topic))
            elif len(members) > params.D_high:
                for peer_id in select_from_minus(self.rng, len(members) - params.D, members, ()):
                    members.discard(peer_id)
                    outside.add(peer_id)
                    actions.prunes.append(Prune(peer_id, topic))

            msg_ids = window.get(topic)
            if msg_ids:
                for peer_id in select_from_minus(self.rng, params.gossip_sample, self.fanout[topic], ()):
                    actions.ihaves.append(IHave(peer_id, topic, tuple(msg_ids)))

        self.outbox.extend(actions.grafts)
        self.outbox.extend(actions.prunes)
        self.outbox.extend(actions.ihaves)

        self.history.appendleft([])
        self.heartbeat_count += 1
        return actions

    def drain_outbox(self) -> List[Frame]:
        frames, self.outbox = self.outbox, []
        return frames

    def topic_delivery_counts(self) -> Dict[str, int]:
        counts = {topic: 0 for topic in self.subscriptions}
        for record in self.delivery_log:
            counts[record.topic] = counts.get(record.topic, 0) + 1
        return counts


def write_delivery_log(router: Router, path: Union[str, Path]) -> Path:
    """Export the delivery log as CSV: msg_id_hex,topic,first_relayer_peer_id,t_ms."""
    rows = [(r.msg_id.hex(), r.topic, r.first_relayer, r.t_ms) for r in router.delivery_log]
    return write_csv(path, ReportSchema.DELIVERY_LOG_HEADERS, rows)
