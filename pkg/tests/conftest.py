"""
Shared builders for snapshot fixtures.
"""

from decimal import Decimal
from typing import Dict, Iterable, Optional, Tuple

import pytest

from gossipwatch.gossip import DEFAULT_TOPICS
from gossipwatch.models import (
    ClientFamily,
    ConnectionEvent,
    EventKind,
    MetricsSnapshot,
    PeerInfo,
    PeerMetrics,
)

T0 = 1_606_824_023_000

# Ten sessions adding up to 1,476,025 ms
TEN_SESSION_DURATIONS = [147_602] * 9 + [147_607]


def make_peer(
    peer_id: str,
    family: ClientFamily = ClientFamily.LIGHTHOUSE,
    version: str = 'v1.0.1',
    events: Iterable[Tuple[str, int]] = (),
    counters: Optional[Dict[str, int]] = None,
    latency: str = '0.100000',
    country: str = 'Finland',
    multiaddr: str = '/ip4/95.216.3.4/tcp/9000',
) -> PeerMetrics:
    zeroed = {topic: 0 for topic in DEFAULT_TOPICS}
    zeroed.update(counters or {})
    return PeerMetrics(
        info=PeerInfo(
            peer_id=peer_id,
            node_id='00' * 32,
            pubkey='11' * 32,
            multiaddr=multiaddr,
            ip='95.216.3.4',
            country=country,
            city='Helsinki',
            isp='Hetzner Online GmbH',
            client_family=family,
            client_version=version,
            latency_s=Decimal(latency),
        ),
        events=[ConnectionEvent(peer_id, EventKind(kind), t) for kind, t in sorted(events, key=lambda e: e[1])],
        counters=zeroed,
    )


def sessions(*spans: Tuple[int, int], burst: int = 1) -> list:
    """Connect/Disconnect events for (start, end) offsets from T0, each repeated in a 1 ms burst."""
    events = []
    for start, end in spans:
        for i in range(burst):
            events.append(('Connect', T0 + start + i))
        if end is not None:
            for i in range(burst):
                events.append(('Disconnect', T0 + end + i))
    return events


def make_snapshot(*peers: PeerMetrics, captured_at_ms: int = T0 + 86_400_000) -> MetricsSnapshot:
    return MetricsSnapshot(
        captured_at_ms=captured_at_ms,
        host_node_id='ab' * 32,
        network_id='mainnet',
        peers=sorted(peers, key=lambda p: p.peer_id),
    )


def ten_session_peer(burst: int = 5) -> PeerMetrics:
    spans = []
    start = 0
    for duration in TEN_SESSION_DURATIONS:
        spans.append((start, start + duration))
        start += 600_000
    return make_peer(
        '16Uiu2HAmTenSessions',
        family=ClientFamily.LIGHTHOUSE,
        version='v1.0.1-5a3b94cb',
        events=sessions(*spans, burst=burst),
        latency='31.509326',
    )


@pytest.fixture
def ten_session_snapshot() -> MetricsSnapshot:
    return make_snapshot(ten_session_peer())
