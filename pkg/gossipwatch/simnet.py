"""
Deterministic simulated network.

Simulated peers carry a client profile (user agent, peer-cap strategy,
publish rates, link delay, churn) and answer the crawler through the same
Transport contract a live network would. Everything runs on the shared
virtual-clock Scheduler with one seeded random generator, so a scenario and
its seed fully determine every event. While the scenario runs the network
records a ground truth (membership, dial decisions, session schedule,
publish log) that the oracle checks the crawler's output against.
"""

import hashlib
import ipaddress
import itertools
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Set, Tuple, Union

from .config import HostConfig
from .crawler import CrawlerHost, init_host
from .discovery import log_distance
from .errors import GossipwatchError, IoFailure
from .fileutils import atomic_write_text
from .geo import create_geo_provider
from .gossip import DEFAULT_TOPICS, Frame, GossipMessage, GossipParams
from .identity import NodeRecord, generate_identity
from .logging_utils import get_logger, log_section, log_step, log_success
from .metrics import SchemaViolation
from .models import MetricsSnapshot, StatusMessage
from .scheduler import GENESIS_MS, EventHandle, Scheduler
from .transport import (
    MAX_NODES_PER_MESSAGE,
    BindFailure,
    DialOutcome,
    DialResult,
    DiscoveryKind,
    DiscoveryMessage,
    HandshakeTimeout,
    PingTimeout,
    StatusReply,
    TransportError,
    TransportListener,
    TransportTimeout,
)

logger = get_logger('simnet')

SCENARIO_DIR = Path(__file__).parent / 'scenarios'
BEACON_BLOCK_TOPIC = DEFAULT_TOPICS[0]
FLEXIBLE_HEADROOM = 1.5
# A session stays open at least this long so per-topic notification batches never straddle a close
MIN_SESSION_MS = 5
PUBLISH_OFFSET_MS = 0.5
TRUTH_VERSION = 1
DEFAULT_PORT = 9000

# Address blocks handed out to simulated peers; the last one has no geo entry
SIM_ADDRESS_BLOCKS = [
    ipaddress.ip_network(block) for block in (
        '3.0.0.0/9',
        '13.230.0.0/15',
        '18.130.0.0/16',
        '34.64.0.0/10',
        '35.180.0.0/16',
        '46.4.0.0/16',
        '51.15.0.0/16',
        '52.28.0.0/16',
        '95.216.0.0/16',
        '104.131.0.0/16',
        '139.59.0.0/16',
        '144.76.0.0/16',
        '159.89.0.0/16',
        '178.128.0.0/16',
        '203.0.113.0/24',
    )
]


class ScenarioInvalid(GossipwatchError):
    """Raised when a scenario or peer profile breaks its invariants."""
    pass


class Strategy(str, Enum):
    STRICT = 'Strict'
    FLEXIBLE = 'Flexible'


@dataclass(frozen=True)
class ChurnSpec:
    disconnect_after_ms: int
    reconnect_after_ms: int

    def __post_init__(self):
        if self.disconnect_after_ms < MIN_SESSION_MS or self.reconnect_after_ms < 0:
            raise ScenarioInvalid(
                f"Churn needs disconnect_after_ms >= {MIN_SESSION_MS} and reconnect_after_ms >= 0, "
                f"got {self.disconnect_after_ms}/{self.reconnect_after_ms}"
            )


@dataclass(frozen=True)
class PeerProfile:
    """
    Behaviour of a group of simulated peers.

    Attributes:
        name: Label used in the ground truth
        user_agent: Sent during the status handshake
        max_peers: Peer cap
        strategy: Strict refuses at the cap; Flexible overshoots and prunes
        publish_rate_per_min: Per-topic publish rate; BeaconBlock rates act
            as proposer weights
        link_delay_ms: One-way delay between this peer and anyone else
        accepts_inbound: False makes every dial time out
        churn: Drop the crawler after a while and refuse redials for a gap
        legacy_event_mode: Notify once per topic stream instead of once per session
        prune_period_ms: Period of the capacity maintenance step
        background_peers: Sessions with other peers at start (default max_peers // 2)
        network_id: Network override, for handshake mismatch tests
        tcp_port: Advertised port (default 9000)
        answers_status: False makes the status handshake time out
    """
    name: str = 'default'
    user_agent: str = ''
    max_peers: int = 50
    strategy: Strategy = Strategy.STRICT
    publish_rate_per_min: Mapping[str, float] = field(default_factory=dict)
    link_delay_ms: int = 50
    accepts_inbound: bool = True
    churn: Optional[ChurnSpec] = None
    legacy_event_mode: bool = False
    prune_period_ms: int = 300_000
    background_peers: Optional[int] = None
    network_id: Optional[str] = None
    tcp_port: Optional[int] = None
    answers_status: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, 'strategy', Strategy(self.strategy))
        except ValueError:
            raise ScenarioInvalid(f"Unknown strategy '{self.strategy}' in profile '{self.name}'")
        if isinstance(self.churn, Mapping):
            object.__setattr__(self, 'churn', ChurnSpec(**self.churn))
        object.__setattr__(self, 'publish_rate_per_min', dict(self.publish_rate_per_min))

        if self.max_peers < 1:
            raise ScenarioInvalid(f"Profile '{self.name}': max_peers must be >= 1, got {self.max_peers}")
        for topic, rate in self.publish_rate_per_min.items():
            if rate < 0:
                raise ScenarioInvalid(f"Profile '{self.name}': negative rate {rate} for {topic}")
        if self.link_delay_ms < 0:
            raise ScenarioInvalid(f"Profile '{self.name}': link_delay_ms cannot be negative")
        if self.prune_period_ms < 1:
            raise ScenarioInvalid(f"Profile '{self.name}': prune_period_ms must be positive")
        if self.background_peers is not None and not (0 <= self.background_peers <= self.max_peers):
            raise ScenarioInvalid(f"Profile '{self.name}': background_peers must be within 0..max_peers")
        if self.tcp_port is not None and not (1 <= self.tcp_port <= 0xFFFF):
            raise ScenarioInvalid(f"Profile '{self.name}': tcp_port out of range: {self.tcp_port}")

    @property
    def initial_background(self) -> int:
        if self.background_peers is None:
            return self.max_peers // 2
        return self.background_peers

    @property
    def port(self) -> int:
        return self.tcp_port or DEFAULT_PORT

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'PeerProfile':
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ScenarioInvalid(f"Unknown profile keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ScenarioInvalid(f"Invalid profile: {e}")


@dataclass(frozen=True)
class PeerGroup:
    count: int
    profile: PeerProfile


@dataclass(frozen=True)
class Scenario:
    """
    A simulated network and how long to watch it.

    Attributes:
        seed: 64-bit seed for every random choice
        duration_ms: Virtual run time
        peers: Peer groups, expanded in order into peer indexes
        bootnodes: Indexes of the peers handed to the crawler as bootnodes
        slot_interval_ms: Time between BeaconBlock proposals
        network_id: Network the peers (and the crawler) belong to
        crawler: HostConfig overrides for the embedded crawler
        relay_duplicates: Deliver every relayed copy instead of stopping at
            the first one that arrives over an open session
        name: Label carried into the ground truth
    """
    seed: int
    duration_ms: int
    peers: Tuple[PeerGroup, ...]
    bootnodes: Tuple[int, ...] = (0,)
    slot_interval_ms: int = 12_000
    network_id: str = 'mainnet'
    crawler: Mapping[str, Any] = field(default_factory=dict)
    relay_duplicates: bool = False
    name: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'peers', tuple(self.peers))
        object.__setattr__(self, 'bootnodes', tuple(self.bootnodes))
        if not (0 <= self.seed < 2 ** 64):
            raise ScenarioInvalid(f"Seed must fit in 64 bits, got {self.seed}")
        if self.duration_ms <= 0:
            raise ScenarioInvalid(f"duration_ms must be positive, got {self.duration_ms}")
        if self.slot_interval_ms <= 0:
            raise ScenarioInvalid(f"slot_interval_ms must be positive, got {self.slot_interval_ms}")
        if not self.peers:
            raise ScenarioInvalid("Scenario has no peers")
        for group in self.peers:
            if group.count < 1:
                raise ScenarioInvalid(f"Peer group '{group.profile.name}' has count {group.count}")
        if not self.bootnodes:
            raise ScenarioInvalid("Scenario needs at least one bootnode")
        total = self.peer_count
        for index in self.bootnodes:
            if not (0 <= index < total):
                raise ScenarioInvalid(f"Bootnode index {index} outside 0..{total - 1}")

    @property
    def peer_count(self) -> int:
        return sum(group.count for group in self.peers)

    def profiles(self) -> List[PeerProfile]:
        """One profile per peer index."""
        return [group.profile for group in self.peers for _ in range(group.count)]

    def with_seed(self, seed: int) -> 'Scenario':
        return replace(self, seed=seed)

    def map_profiles(self, **changes: Any) -> 'Scenario':
        """Copy of the scenario with the same field changes applied to every profile."""
        groups = tuple(PeerGroup(g.count, replace(g.profile, **changes)) for g in self.peers)
        return replace(self, peers=groups)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Scenario':
        if not isinstance(data, Mapping):
            raise ScenarioInvalid("Scenario must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ScenarioInvalid(f"Unknown scenario keys: {', '.join(unknown)}")

        values = dict(data)
        groups = []
        for i, raw in enumerate(values.get('peers', [])):
            if not isinstance(raw, Mapping) or 'count' not in raw or 'profile' not in raw:
                raise ScenarioInvalid(f"peers[{i}] must have 'count' and 'profile'")
            groups.append(PeerGroup(int(raw['count']), PeerProfile.from_dict(raw['profile'])))
        values['peers'] = tuple(groups)
        try:
            return cls(**values)
        except TypeError as e:
            raise ScenarioInvalid(f"Invalid scenario: {e}")


def load_scenario(name_or_path: Union[str, Path]) -> Scenario:
    """
    Load a scenario from a JSON file, or by name from the bundled scenarios.

    Raises:
        ScenarioInvalid: If the file is missing, unparsable or invalid
    """
    path = Path(name_or_path)
    if not path.exists():
        bundled = SCENARIO_DIR / path.name
        if bundled.suffix != '.json':
            bundled = bundled.with_suffix('.json')
        if not bundled.exists():
            raise ScenarioInvalid(f"Scenario not found: {name_or_path}")
        path = bundled

    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise ScenarioInvalid(f"Cannot read scenario {path}: {e}")
    except json.JSONDecodeError as e:
        raise ScenarioInvalid(f"Scenario {path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}")

    scenario = Scenario.from_dict(data)
    if not scenario.name:
        scenario = replace(scenario, name=path.stem)
    logger.debug(f"Loaded scenario '{scenario.name}': {scenario.peer_count} peers, {scenario.duration_ms} ms")
    return scenario


# -- ground truth ----------------------------------------------------------

@dataclass(frozen=True)
class PublishRecord:
    msg_id: str
    origin: str
    topic: str
    t_ms: float


@dataclass
class GroundTruth:
    """
    What really happened in a simulated run.

    Attributes:
        membership: Node ids (hex) of every simulated peer
        peers: Per peer id: node id, profile name, user agent and strategy
        link_delays: One-way delay per peer id
        dial_decisions: (t_ms, peer_id, outcome) for every crawler dial
        sessions: Per peer id, [start_ms, end_ms] of every crawler session
            (end None while still open)
        publish_log: Every published message
        crawler_peer_id: Peer id of the embedded crawler
        topics: Topics the crawler subscribed to
        end_ms: Virtual time the run ended
    """
    seed: int = 0
    scenario: str = ''
    membership: List[str] = field(default_factory=list)
    peers: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    link_delays: Dict[str, int] = field(default_factory=dict)
    dial_decisions: List[Tuple[int, str, str]] = field(default_factory=list)
    sessions: Dict[str, List[List[Optional[int]]]] = field(default_factory=dict)
    publish_log: List[PublishRecord] = field(default_factory=list)
    crawler_peer_id: str = ''
    topics: List[str] = field(default_factory=list)
    end_ms: int = 0

    def sessions_until_end(self, peer_id: str) -> List[Tuple[int, int]]:
        """Sessions of a peer with open ones closed at end_ms."""
        return [
            (start, end if end is not None else self.end_ms)
            for start, end in self.sessions.get(peer_id, [])
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': TRUTH_VERSION,
            'seed': self.seed,
            'scenario': self.scenario,
            'end_ms': self.end_ms,
            'crawler_peer_id': self.crawler_peer_id,
            'topics': list(self.topics),
            'membership': sorted(self.membership),
            'peers': self.peers,
            'link_delays': self.link_delays,
            'dial_decisions': [list(d) for d in self.dial_decisions],
            'sessions': self.sessions,
            'publish_log': [[p.msg_id, p.origin, p.topic, p.t_ms] for p in self.publish_log],
        }

    @classmethod
    def from_dict(cls, document: Any) -> 'GroundTruth':
        if not isinstance(document, dict):
            raise SchemaViolation("Ground truth must be a JSON object")
        required = ['version', 'seed', 'end_ms', 'crawler_peer_id', 'topics', 'membership',
                    'peers', 'link_delays', 'dial_decisions', 'sessions', 'publish_log']
        missing = [key for key in required if key not in document]
        if missing:
            raise SchemaViolation(f"Ground truth is missing: {', '.join(missing)}")
        if document['version'] != TRUTH_VERSION:
            raise SchemaViolation(f"Unsupported ground truth version: {document['version']}")

        try:
            publish_log = [PublishRecord(str(m), str(o), str(t), float(ts)) for m, o, t, ts in document['publish_log']]
            decisions = [(int(t), str(p), str(o)) for t, p, o in document['dial_decisions']]
            sessions = {
                str(peer): [[int(s), None if e is None else int(e)] for s, e in spans]
                for peer, spans in document['sessions'].items()
            }
            link_delays = {str(k): int(v) for k, v in document['link_delays'].items()}
        except (TypeError, ValueError) as e:
            raise SchemaViolation(f"Malformed ground truth entry: {e}")

        ids = [p.msg_id for p in publish_log]
        if len(set(ids)) != len(ids):
            raise SchemaViolation("Ground truth publish log repeats a msg_id")

        return cls(
            seed=int(document['seed']),
            scenario=str(document.get('scenario', '')),
            membership=list(document['membership']),
            peers=dict(document['peers']),
            link_delays=link_delays,
            dial_decisions=decisions,
            sessions=sessions,
            publish_log=publish_log,
            crawler_peer_id=str(document['crawler_peer_id']),
            topics=list(document['topics']),
            end_ms=int(document['end_ms']),
        )


def dumps_ground_truth(truth: GroundTruth) -> str:
    return json.dumps(truth.to_dict(), sort_keys=True, ensure_ascii=False, indent=2) + '\n'


def write_ground_truth(truth: GroundTruth, path: Union[str, Path]) -> Path:
    target = atomic_write_text(path, dumps_ground_truth(truth))
    logger.info(f"Ground truth written: {target} ({len(truth.publish_log)} publishes)")
    return target


def read_ground_truth(path: Union[str, Path]) -> GroundTruth:
    """
    Raises:
        IoFailure: If the file cannot be read
        SchemaViolation: If it is not a valid ground truth document
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise IoFailure(f"Cannot read ground truth {path}: {e}")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"Ground truth is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}")
    return GroundTruth.from_dict(document)


# -- simulated peers -------------------------------------------------------

class SessionState(str, Enum):
    PENDING = 'pending'
    OPEN = 'open'
    CLOSED = 'closed'


@dataclass
class SimSession:
    session_id: int
    peer: 'SimPeer'
    state: SessionState = SessionState.PENDING
    opened_ms: Optional[int] = None
    streams: int = 1
    drop_handle: Optional[EventHandle] = None


@dataclass
class SimPeer:
    index: int
    profile: PeerProfile
    record: NodeRecord
    peer_id: str
    background: int
    session: Optional[SimSession] = None
    refuse_until: int = 0

    @property
    def crawler_load(self) -> int:
        return 0 if self.session is None else 1

    def has_open_session(self) -> bool:
        return self.session is not None and self.session.state == SessionState.OPEN


def derive_seed(seed: int, label: str) -> bytes:
    """32 bytes of key material derived from the scenario seed and a label."""
    return hashlib.sha256(f"{seed}:{label}".encode('utf-8')).digest()


class SimNetwork:
    """
    Simulated peers behind the Transport interface.

    The crawler is the only host bound to the network; simulated peers keep
    their sessions with each other as a background count and only talk to
    the crawler through this object.
    """

    def __init__(self, scenario: Scenario, scheduler: Scheduler):
        self.scenario = scenario
        self.scheduler = scheduler
        self.rng = random.Random(scenario.seed)

        self.listener: Optional[TransportListener] = None
        self.endpoints: Set[Tuple[str, str, int]] = set()

        self.peers: List[SimPeer] = []
        self.by_node_id: Dict[bytes, SimPeer] = {}
        self.by_peer_id: Dict[str, SimPeer] = {}
        self.sessions: Dict[int, SimSession] = {}
        self._session_ids = itertools.count(1)
        self._msg_seq = itertools.count()
        self._distance_tables: Dict[int, Dict[int, List[NodeRecord]]] = {}

        self.statuses_received: List[StatusMessage] = []
        self.copies_delivered = 0
        self.truth = GroundTruth(seed=scenario.seed, scenario=scenario.name)

        self._build_peers()

    # -- setup -------------------------------------------------------------

    def _build_peers(self):
        allocated: Counter = Counter()
        for index, profile in enumerate(self.scenario.profiles()):
            block = self.rng.choice(SIM_ADDRESS_BLOCKS)
            ip = str(block.network_address + 10 + allocated[block])
            allocated[block] += 1

            _, record = generate_identity(
                derive_seed(self.scenario.seed, f'peer:{index}'),
                ip,
                profile.port,
                profile.port,
                profile.network_id or self.scenario.network_id,
            )
            peer = SimPeer(
                index=index,
                profile=profile,
                record=record,
                peer_id=record.peer_id,
                background=profile.initial_background,
            )
            self.peers.append(peer)
            self.by_node_id[record.node_id] = peer
            self.by_peer_id[peer.peer_id] = peer
            self._claim_endpoint(record)

            self.truth.membership.append(record.node_id.hex())
            self.truth.link_delays[peer.peer_id] = profile.link_delay_ms
            self.truth.peers[peer.peer_id] = {
                'index': index,
                'node_id': record.node_id.hex(),
                'profile': profile.name,
                'user_agent': profile.user_agent,
                'strategy': profile.strategy.value,
                'accepts_inbound': profile.accepts_inbound,
            }

    def _claim_endpoint(self, record: NodeRecord):
        keys = [('tcp', record.ip, record.tcp_port), ('udp', record.ip, record.udp_port)]
        taken = [key for key in keys if key in self.endpoints]
        if taken:
            proto, ip, port = taken[0]
            raise BindFailure(f"Address already in use: {ip}:{port}/{proto}")
        self.endpoints.update(keys)

    def record_of(self, index: int) -> NodeRecord:
        return self.peers[index].record

    def bootnode_records(self) -> List[NodeRecord]:
        return [self.peers[i].record for i in self.scenario.bootnodes]

    def start(self):
        """Schedule block proposals, Poisson publishers and capacity maintenance."""
        if any(p.profile.publish_rate_per_min.get(BEACON_BLOCK_TOPIC, 0) > 0 for p in self.peers):
            self.scheduler.schedule_after(self.scenario.slot_interval_ms, self._slot_tick)

        for peer in self.peers:
            for topic, rate in sorted(peer.profile.publish_rate_per_min.items()):
                if topic != BEACON_BLOCK_TOPIC and rate > 0:
                    self._schedule_poisson(peer, topic, rate)

        for peer in self.peers:
            offset = self.rng.randrange(peer.profile.prune_period_ms)
            self.scheduler.schedule_after(offset + 1, self._maintain, peer)

    # -- transport: endpoints ----------------------------------------------

    def bind(self, record: NodeRecord, listener: TransportListener) -> None:
        if self.listener is not None:
            raise BindFailure("Simulated network already has a host bound")
        self._claim_endpoint(record)
        self.listener = listener
        logger.debug(f"Host bound at {record.ip}:{record.tcp_port}")

    def _require_bound(self):
        if self.listener is None:
            raise TransportError("No host bound to the simulated network")

    def rtt_ms(self, peer: SimPeer) -> int:
        return 2 * peer.profile.link_delay_ms

    # -- transport: discovery ----------------------------------------------

    def _distance_table(self, peer: SimPeer) -> Dict[int, List[NodeRecord]]:
        table = self._distance_tables.get(peer.index)
        if table is None:
            table = {}
            for other in self.peers:
                if other is peer:
                    continue
                d = log_distance(peer.record.node_id, other.record.node_id)
                table.setdefault(d, []).append(other.record)
            for records in table.values():
                records.sort(key=lambda r: r.node_id)
            self._distance_tables[peer.index] = table
        return table

    def discovery_request(
        self, record: NodeRecord, message: DiscoveryMessage, timeout_ms: int
    ) -> List[DiscoveryMessage]:
        self._require_bound()
        peer = self.by_node_id.get(record.node_id)
        if peer is None or self.rtt_ms(peer) > timeout_ms:
            raise TransportTimeout(f"No discovery answer from {record.ip}:{record.udp_port}")

        if message.kind == DiscoveryKind.PING:
            return [DiscoveryMessage.pong(peer.record.seq)]
        if message.kind != DiscoveryKind.FIND_NODE:
            return []
        replies = []
        for distance in message.distances:
            if distance == 0:
                replies.append(DiscoveryMessage.nodes([peer.record]))
                continue
            candidates = self._distance_table(peer).get(distance, [])
            if len(candidates) > MAX_NODES_PER_MESSAGE:
                candidates = sorted(
                    self.rng.sample(candidates, MAX_NODES_PER_MESSAGE), key=lambda r: r.node_id
                )
            replies.append(DiscoveryMessage.nodes(candidates))
        return replies

    # -- transport: sessions -----------------------------------------------

    def _admits(self, peer: SimPeer) -> bool:
        limit = peer.profile.max_peers
        if peer.profile.strategy == Strategy.FLEXIBLE:
            limit = int(limit * FLEXIBLE_HEADROOM)
        return peer.background + 1 <= limit

    def dial(self, record: NodeRecord, timeout_ms: int) -> DialResult:
        self._require_bound()
        now = self.scheduler.now_ms
        peer = self.by_node_id.get(record.node_id)
        if peer is None:
            return DialResult(DialOutcome.TIMEOUT, timeout_ms)

        rtt = self.rtt_ms(peer)
        if not peer.profile.accepts_inbound or rtt > timeout_ms:
            result = DialResult(DialOutcome.TIMEOUT, timeout_ms)
        elif peer.session is not None or now < peer.refuse_until or not self._admits(peer):
            result = DialResult(DialOutcome.REFUSED, rtt)
        else:
            session = SimSession(session_id=next(self._session_ids), peer=peer)
            self.sessions[session.session_id] = session
            peer.session = session
            result = DialResult(DialOutcome.CONNECTED, rtt, session.session_id)

        self.truth.dial_decisions.append((now, peer.peer_id, result.outcome.value))
        return result

    def _session(self, session_id: int, state: SessionState) -> SimSession:
        session = self.sessions.get(session_id)
        if session is None or session.state != state:
            raise TransportError(f"Session {session_id} is not {state.value}")
        return session

    def _status_of(self, peer: SimPeer) -> StatusMessage:
        slot = max(0, int(self.scheduler.now - GENESIS_MS) // self.scenario.slot_interval_ms)
        epoch = max(0, slot // 32 - 2)
        return StatusMessage(
            network_id=peer.record.network_id,
            head_slot=slot,
            head_root=hashlib.sha256(f'block:{slot}'.encode()).digest(),
            finalized_epoch=epoch,
            finalized_root=hashlib.sha256(f'checkpoint:{epoch}'.encode()).digest(),
        )

    def exchange_status(
        self, session_id: int, status: StatusMessage, user_agent: str, timeout_ms: int
    ) -> StatusReply:
        session = self._session(session_id, SessionState.PENDING)
        self.statuses_received.append(status)
        if not session.peer.profile.answers_status:
            raise HandshakeTimeout(f"{session.peer.peer_id} sent no status within {timeout_ms} ms")
        return StatusReply(self._status_of(session.peer), session.peer.profile.user_agent)

    def open_streams(self, session_id: int, topics: List[str]) -> None:
        session = self._session(session_id, SessionState.PENDING)
        peer = session.peer
        now = self.scheduler.now_ms

        session.state = SessionState.OPEN
        session.opened_ms = now
        session.streams = max(1, len(topics)) if peer.profile.legacy_event_mode else 1
        self.truth.sessions.setdefault(peer.peer_id, []).append([now, None])

        if peer.profile.churn is not None:
            session.drop_handle = self.scheduler.schedule_after(
                peer.profile.churn.disconnect_after_ms, self._churn_drop, session
            )
        self._notify('connected', session)

    def _notify(self, kind: str, session: SimSession):
        if self.listener is None:
            return
        callback = getattr(self.listener, kind)
        peer_id = session.peer.peer_id
        callback(peer_id, session.session_id)
        for i in range(1, session.streams):
            self.scheduler.schedule_after(i, callback, peer_id, session.session_id)

    def _end_session(self, session: SimSession):
        now = self.scheduler.now_ms
        peer = session.peer
        session.state = SessionState.CLOSED
        self.scheduler.cancel(session.drop_handle)
        if peer.session is session:
            peer.session = None
        self.truth.sessions[peer.peer_id][-1][1] = now
        self._notify('disconnected', session)

    def close(self, session_id: int) -> None:
        session = self.sessions.get(session_id)
        if session is None or session.state == SessionState.CLOSED:
            return
        if session.state == SessionState.PENDING:
            session.state = SessionState.CLOSED
            if session.peer.session is session:
                session.peer.session = None
            return

        earliest = session.opened_ms + MIN_SESSION_MS
        if self.scheduler.now_ms < earliest:
            self.scheduler.schedule_at(earliest, self.close, session_id)
            return
        self._end_session(session)

    def ping(self, session_id: int, timeout_ms: int) -> float:
        session = self.sessions.get(session_id)
        if session is None or session.state != SessionState.OPEN:
            raise PingTimeout(f"Session {session_id} is not open")
        rtt = self.rtt_ms(session.peer)
        if rtt > timeout_ms:
            raise PingTimeout(f"Ping to {session.peer.peer_id} exceeded {timeout_ms} ms")
        return float(rtt)

    def send(self, session_id: int, frame: Frame) -> None:
        # Simulated peers relay on their own schedule and ignore control frames
        return None

    # -- peer behaviour ----------------------------------------------------

    def _droppable(self, peer: SimPeer) -> bool:
        session = peer.session
        return (
            session is not None
            and session.state == SessionState.OPEN
            and self.scheduler.now_ms - session.opened_ms >= MIN_SESSION_MS
        )

    def _churn_drop(self, session: SimSession):
        if session.state != SessionState.OPEN:
            return
        peer = session.peer
        peer.refuse_until = self.scheduler.now_ms + peer.profile.churn.reconnect_after_ms
        logger.debug(f"{peer.peer_id} churns out until {peer.refuse_until}")
        self._end_session(session)

    def _maintain(self, peer: SimPeer):
        profile = peer.profile
        if profile.strategy == Strategy.STRICT:
            drift = self.rng.randint(-2, 2)
            peer.background = min(max(0, peer.background + drift), profile.max_peers - peer.crawler_load)
        else:
            peer.background += self.rng.randint(0, max(1, profile.max_peers // 4))
            total = peer.background + peer.crawler_load
            if total > profile.max_peers:
                excess = total - profile.max_peers
                if self._droppable(peer) and self.rng.random() < excess / total:
                    logger.debug(f"{peer.peer_id} prunes the crawler ({total} sessions)")
                    self._end_session(peer.session)
                peer.background = min(peer.background, profile.max_peers - peer.crawler_load)
        self.scheduler.schedule_after(profile.prune_period_ms, self._maintain, peer)

    # -- publishing --------------------------------------------------------

    def _slot_tick(self):
        weights = [p.profile.publish_rate_per_min.get(BEACON_BLOCK_TOPIC, 0) for p in self.peers]
        proposer = self.rng.choices(self.peers, weights=weights)[0]
        jitter = self.rng.randrange(max(1, self.scenario.slot_interval_ms // 6))
        self.scheduler.schedule_after(jitter + PUBLISH_OFFSET_MS, self._publish, proposer, BEACON_BLOCK_TOPIC)
        self.scheduler.schedule_after(self.scenario.slot_interval_ms, self._slot_tick)

    def _schedule_poisson(self, peer: SimPeer, topic: str, rate: float):
        now = self.scheduler.now
        gap = self.rng.expovariate(rate / 60_000)
        t = math.floor(now + gap) + PUBLISH_OFFSET_MS
        if t <= now:
            t = math.floor(now) + 1 + PUBLISH_OFFSET_MS
        self.scheduler.schedule_at(t, self._poisson_publish, peer, topic, rate)

    def _poisson_publish(self, peer: SimPeer, topic: str, rate: float):
        self._publish(peer, topic)
        self._schedule_poisson(peer, topic, rate)

    def path_ms(self, origin: SimPeer, peer: SimPeer) -> int:
        if origin is peer:
            return 0
        return origin.profile.link_delay_ms + peer.profile.link_delay_ms

    def _publish(self, origin: SimPeer, topic: str) -> GossipMessage:
        now = self.scheduler.now
        payload = f'{topic}/{origin.index}/{next(self._msg_seq)}'.encode('utf-8')
        message = GossipMessage(topic=topic, payload=payload)
        self.truth.publish_log.append(PublishRecord(message.msg_id.hex(), origin.peer_id, topic, now))

        if self.listener is None:
            return message

        copies = sorted(
            (now + self.path_ms(origin, peer) + peer.profile.link_delay_ms, peer.peer_id, peer.session)
            for peer in self.peers
            if peer.has_open_session()
        )
        if self.scenario.relay_duplicates:
            for arrival, _, session in copies:
                self.scheduler.schedule_at(arrival, self._deliver, session, message)
        elif copies:
            self.scheduler.schedule_at(copies[0][0], self._deliver_first, copies, 0, message)
        return message

    def _deliver(self, session: SimSession, message: GossipMessage) -> bool:
        if session.state != SessionState.OPEN or self.listener is None:
            return False
        self.copies_delivered += 1
        self.listener.message_received(session.peer.peer_id, session.session_id, message)
        return True

    def _deliver_first(self, copies: List[Tuple[float, str, SimSession]], start: int, message: GossipMessage):
        # Later copies would only be duplicates; walk the list until one arrives over an open session
        for i in range(start, len(copies)):
            arrival, _, session = copies[i]
            if arrival > self.scheduler.now:
                self.scheduler.schedule_at(arrival, self._deliver_first, copies, i, message)
                return
            if self._deliver(session, message):
                return

    # -- results -----------------------------------------------------------

    def ground_truth(self, end_ms: int, host: Optional[CrawlerHost] = None) -> GroundTruth:
        self.truth.end_ms = end_ms
        if host is not None:
            self.truth.crawler_peer_id = host.peer_id
            self.truth.topics = list(host.config.topics)
        return self.truth


@dataclass
class Simulation:
    """A simulated network with an embedded crawler host, sharing one clock."""
    scenario: Scenario
    scheduler: Scheduler
    network: SimNetwork
    host: CrawlerHost

    def run(self, duration_ms: Optional[int] = None) -> int:
        return self.host.run_for(self.scenario.duration_ms if duration_ms is None else duration_ms)

    def finish(self, flush: bool = True) -> Tuple[MetricsSnapshot, GroundTruth]:
        end_ms = self.scheduler.now_ms
        self.host.stop(flush=flush)
        snapshot = self.host.metrics.snapshot(end_ms)
        return snapshot, self.network.ground_truth(end_ms, self.host)


def build_simulation(
    scenario: Scenario,
    host_config: Optional[HostConfig] = None,
    output_dir: Optional[Union[str, Path]] = None,
    gossip_params: Optional[GossipParams] = None,
) -> Simulation:
    """
    Create the simulated network and start an embedded crawler on it.

    The scenario's `crawler` block overrides fields of host_config, and the
    crawler always joins the scenario's network.
    """
    scheduler = Scheduler(GENESIS_MS)
    network = SimNetwork(scenario, scheduler)
    network.start()

    overrides = {'network_id': scenario.network_id}
    overrides.update(scenario.crawler)
    config = (host_config or HostConfig()).with_overrides(overrides)

    host = init_host(
        config,
        seed=derive_seed(scenario.seed, 'crawler'),
        transport=network,
        scheduler=scheduler,
        geo=create_geo_provider(config.geo_provider),
        bootnodes=network.bootnode_records(),
        output_dir=output_dir,
        gossip_params=gossip_params,
    )
    return Simulation(scenario, scheduler, network, host)


def run_scenario(
    scenario: Scenario,
    host_config: Optional[HostConfig] = None,
    output_dir: Optional[Union[str, Path]] = None,
    duration_ms: Optional[int] = None,
) -> Tuple[MetricsSnapshot, GroundTruth]:
    """
    Run a scenario to completion.

    Returns:
        The embedded crawler's final snapshot and the run's ground truth
    """
    log_section(f"SIMULATION {scenario.name or ''}".strip(), logger)
    log_step(f"{scenario.peer_count} peers, seed {scenario.seed}, "
             f"{(duration_ms or scenario.duration_ms) / 60_000:.1f} virtual minutes", logger)
    simulation = build_simulation(scenario, host_config, output_dir)
    processed = simulation.run(duration_ms)
    snapshot, truth = simulation.finish(flush=output_dir is not None)
    log_success(
        f"Simulation done: {processed} events, {len(truth.publish_log)} publishes, "
        f"{len(simulation.host.open_sessions)} sessions open at the end",
        logger,
    )
    return snapshot, truth
