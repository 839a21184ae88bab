"""
Transport interface between the crawler host and a network.

A transport carries discovery requests, outbound dials, the status
exchange, pings and gossip frames. Incoming connection changes and gossip
messages are pushed to a TransportListener, following the notifee pattern
of libp2p hosts.

Two implementations exist: the simulated network (gossipwatch.simnet) and
LiveTransport, which is a placeholder for real-network support.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Protocol, Tuple

from .errors import GossipwatchError
from .gossip import Frame, GossipMessage
from .identity import NodeRecord
from .models import StatusMessage


class TransportError(GossipwatchError):
    """Base class for transport failures."""
    pass


class TransportTimeout(TransportError):
    """Raised when a discovery request gets no answer in time."""
    pass


class BindFailure(TransportError):
    """Raised when the host endpoint is already in use."""
    pass


class PingTimeout(TransportError):
    """Raised when a ping gets no answer in time."""
    pass


class HandshakeTimeout(TransportError):
    """Raised when the remote never answers the status exchange."""
    pass


class Unsupported(TransportError):
    """Raised by transports that do not implement an operation."""
    pass


class DiscoveryKind(str, Enum):
    FIND_NODE = 'FindNode'
    NODES = 'Nodes'
    PING = 'Ping'
    PONG = 'Pong'


MAX_NODES_PER_MESSAGE = 16


@dataclass(frozen=True)
class DiscoveryMessage:
    """
    Discovery protocol message.

    Attributes:
        kind: Message kind
        distances: FindNode log-distances asked for (0 asks for the responder's own record)
        records: Nodes payload
        seq: Ping/Pong payload, the sender's record sequence number
    """
    kind: DiscoveryKind
    distances: Tuple[int, ...] = ()
    records: tuple = ()
    seq: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'kind', DiscoveryKind(self.kind))
        object.__setattr__(self, 'distances', tuple(self.distances))
        if self.kind == DiscoveryKind.FIND_NODE:
            if not self.distances:
                raise ValueError("FindNode needs at least one distance")
            for distance in self.distances:
                if not (0 <= distance <= 256):
                    raise ValueError(f"FindNode distance out of range: {distance}")
        if len(self.records) > MAX_NODES_PER_MESSAGE:
            raise ValueError(
                f"Nodes message carries {len(self.records)} records, max {MAX_NODES_PER_MESSAGE}"
            )

    @classmethod
    def find_node(cls, *distances: int) -> 'DiscoveryMessage':
        return cls(kind=DiscoveryKind.FIND_NODE, distances=distances)

    @classmethod
    def nodes(cls, records: List[NodeRecord]) -> 'DiscoveryMessage':
        return cls(kind=DiscoveryKind.NODES, records=tuple(records))

    @classmethod
    def ping(cls, seq: int) -> 'DiscoveryMessage':
        return cls(kind=DiscoveryKind.PING, seq=seq)

    @classmethod
    def pong(cls, seq: int) -> 'DiscoveryMessage':
        return cls(kind=DiscoveryKind.PONG, seq=seq)


class DialOutcome(str, Enum):
    CONNECTED = 'Connected'
    REFUSED = 'Refused'
    TIMEOUT = 'Timeout'
    HANDSHAKE_FAILED = 'HandshakeFailed'


@dataclass(frozen=True)
class DialResult:
    """
    Result of an outbound dial.

    Attributes:
        outcome: Connected, Refused or Timeout (HandshakeFailed is decided by the host)
        elapsed_ms: Time the dial takes before the outcome is known
        session_id: Transport session id when connected
    """
    outcome: DialOutcome
    elapsed_ms: int
    session_id: Optional[int] = None


@dataclass(frozen=True)
class StatusReply:
    """What the remote sent back during the status exchange."""
    status: StatusMessage
    user_agent: str


class TransportListener(Protocol):
    """Receives connection notifications and gossip traffic from a transport."""

    def connected(self, peer_id: str, session_id: int) -> None:
        ...

    def disconnected(self, peer_id: str, session_id: int) -> None:
        ...

    def message_received(self, peer_id: str, session_id: int, message: GossipMessage) -> None:
        ...


class Transport(Protocol):
    """Operations a crawler host needs from a network."""

    def bind(self, record: NodeRecord, listener: TransportListener) -> None:
        ...

    def discovery_request(
        self, record: NodeRecord, message: DiscoveryMessage, timeout_ms: int
    ) -> List[DiscoveryMessage]:
        ...

    def dial(self, record: NodeRecord, timeout_ms: int) -> DialResult:
        ...

    def exchange_status(
        self, session_id: int, status: StatusMessage, user_agent: str, timeout_ms: int
    ) -> StatusReply:
        ...

    def open_streams(self, session_id: int, topics: List[str]) -> None:
        ...

    def ping(self, session_id: int, timeout_ms: int) -> float:
        ...

    def send(self, session_id: int, frame: Frame) -> None:
        ...

    def close(self, session_id: int) -> None:
        ...


class LiveTransport:
    """
    Real-network transport.

    Wire compatibility with production clients (noise, multistream-select,
    SSZ+snappy RPC) is not implemented; every operation raises Unsupported.
    """

    def _unsupported(self, operation: str):
        raise Unsupported(f"Live transport does not support '{operation}' in this version")

    def bind(self, record, listener):
        self._unsupported('bind')

    def discovery_request(self, record, message, timeout_ms):
        self._unsupported('discovery_request')

    def dial(self, record, timeout_ms):
        self._unsupported('dial')

    def exchange_status(self, session_id, status, user_agent, timeout_ms):
        self._unsupported('exchange_status')

    def open_streams(self, session_id, topics):
        self._unsupported('open_streams')

    def ping(self, session_id, timeout_ms):
        self._unsupported('ping')

    def send(self, session_id, frame):
        self._unsupported('send')

    def close(self, session_id):
        self._unsupported('close')
