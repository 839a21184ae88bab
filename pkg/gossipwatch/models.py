"""
Data models shared by the crawler, the metrics store and the analyzer.

This module defines peer metadata, the genesis status message, connection
events and the per-peer metrics that make up a snapshot.
"""

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_EVEN
from enum import Enum
from typing import Dict, List

SIX_PLACES = Decimal('0.000001')
ZERO_ROOT = bytes(32)
UNKNOWN = 'Unknown'


class ClientFamily(str, Enum):
    """Beacon node implementations the crawler can recognize."""
    LIGHTHOUSE = 'Lighthouse'
    TEKU = 'Teku'
    NIMBUS = 'Nimbus'
    PRYSM = 'Prysm'
    LODESTAR = 'Lodestar'
    UNKNOWN = 'Unknown'

    @classmethod
    def ordered(cls) -> List['ClientFamily']:
        """Families in report order."""
        return [cls.LIGHTHOUSE, cls.TEKU, cls.NIMBUS, cls.PRYSM, cls.LODESTAR, cls.UNKNOWN]


class EventKind(str, Enum):
    CONNECT = 'Connect'
    DISCONNECT = 'Disconnect'


def quantize_latency(value: Decimal) -> Decimal:
    """Round a latency to the six fractional digits snapshots carry."""
    return Decimal(value).quantize(SIX_PLACES, rounding=ROUND_HALF_EVEN)


@dataclass(frozen=True)
class StatusMessage:
    """
    Chain-view summary exchanged right after a connection opens.

    Attributes:
        network_id: Network the sender belongs to
        head_slot: Slot of the sender's head block
        head_root: Root of the sender's head block
        finalized_epoch: Latest finalized epoch
        finalized_root: Root of the latest finalized checkpoint
    """
    network_id: bytes
    head_slot: int = 0
    head_root: bytes = ZERO_ROOT
    finalized_epoch: int = 0
    finalized_root: bytes = ZERO_ROOT

    @classmethod
    def genesis(cls, network_id: bytes) -> 'StatusMessage':
        """Status of a node sitting at the genesis state."""
        return cls(network_id=network_id)

    @property
    def is_genesis(self) -> bool:
        return self.head_slot == 0 and self.finalized_epoch == 0


@dataclass
class PeerInfo:
    """
    Identity and enrichment data gathered for one peer.

    Attributes:
        peer_id: libp2p peer id
        node_id: Hex node id from the peer's record
        pubkey: Hex public key
        multiaddr: Dialable multiaddress
        ip: Address from the record
        country: Geolocated country
        city: Geolocated city
        isp: Network operator of the address
        client_family: Client classified from the user agent
        client_version: Version token from the user agent
        latency_s: Ping round-trip time in seconds
    """
    peer_id: str
    node_id: str = ''
    pubkey: str = ''
    multiaddr: str = ''
    ip: str = ''
    country: str = UNKNOWN
    city: str = UNKNOWN
    isp: str = UNKNOWN
    client_family: ClientFamily = ClientFamily.UNKNOWN
    client_version: str = ''
    latency_s: Decimal = Decimal('0.000000')

    def __post_init__(self):
        if not self.peer_id:
            raise ValueError("Peer id cannot be empty")
        self.client_family = ClientFamily(self.client_family)
        self.latency_s = quantize_latency(self.latency_s)
        if self.latency_s < 0:
            raise ValueError(f"Latency cannot be negative: {self.latency_s}")


@dataclass(frozen=True)
class ConnectionEvent:
    """A timestamped connect or disconnect observed for a peer."""
    peer_id: str
    kind: EventKind
    t_ms: int

    def __post_init__(self):
        object.__setattr__(self, 'kind', EventKind(self.kind))
        if self.t_ms <= 0:
            raise ValueError(f"Event timestamp must be positive, got {self.t_ms}")


@dataclass
class PeerMetrics:
    """
    Everything the crawler accumulated about one peer.

    Attributes:
        info: Identity and enrichment data
        events: Connection events sorted by timestamp
        counters: First-delivered message count per topic
    """
    info: PeerInfo
    events: List[ConnectionEvent] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)

    @property
    def peer_id(self) -> str:
        return self.info.peer_id

    def total_messages(self) -> int:
        return sum(self.counters.values())


@dataclass
class MetricsSnapshot:
    """
    Point-in-time export of the crawler's metrics.

    Attributes:
        captured_at_ms: Unix milliseconds of the export
        host_node_id: Hex node id of the crawler
        network_id: Network the crawler joined
        peers: Per-peer metrics, sorted by peer id
    """
    captured_at_ms: int
    host_node_id: str
    network_id: str
    peers: List[PeerMetrics] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for peer in self.peers:
            if peer.peer_id in seen:
                raise ValueError(f"Duplicate peer id in snapshot: {peer.peer_id}")
            seen.add(peer.peer_id)

    def peer(self, peer_id: str) -> PeerMetrics:
        for metrics in self.peers:
            if metrics.peer_id == peer_id:
                return metrics
        raise KeyError(peer_id)

    def topic_totals(self) -> Dict[str, int]:
        """Sum of counters per topic over all peers."""
        totals: Dict[str, int] = {}
        for metrics in self.peers:
            for topic, count in metrics.counters.items():
                totals[topic] = totals.get(topic, 0) + count
        return totals
