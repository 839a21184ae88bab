"""
Tests for event deduplication, session pairing and report aggregation.
"""

from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gossipwatch.analyzer import (
    DedupPolicy,
    OutlierFlag,
    PeerDerived,
    UnsortedInput,
    aggregate,
    connection_sessions,
    dedup_events,
    derive_peer,
    flag_outliers,
    minutes,
    top_k_share,
)
from gossipwatch.gossip import DEFAULT_TOPICS
from gossipwatch.models import ClientFamily, ConnectionEvent, EventKind
from tests.conftest import T0, make_peer, make_snapshot, sessions, ten_session_peer

CONNECT = EventKind.CONNECT
DISCONNECT = EventKind.DISCONNECT


def events(*pairs):
    return [ConnectionEvent('p', kind, T0 + t) for kind, t in pairs]


def reference_dedup(event_list, window):
    """Keep an event unless some kept event of its kind lies less than window before it."""
    kept = []
    for event in event_list:
        if any(k.kind == event.kind and 0 <= event.t_ms - k.t_ms < window for k in kept):
            continue
        kept.append(event)
    return kept


def derived(peer_id='p', total=0, connected_min='0', family=ClientFamily.LIGHTHOUSE):
    return PeerDerived(
        peer_id=peer_id,
        client_family=family,
        client_version='v1',
        country='Finland',
        city='Helsinki',
        isp='Unknown',
        ip='95.216.3.4',
        latency_s=Decimal('0.1'),
        connections=1,
        disconnections=0,
        connected_time_min=Decimal(connected_min),
        counters={'BeaconBlock': total},
        total_messages=total,
    )


event_lists = st.lists(
    st.tuples(st.sampled_from([CONNECT, DISCONNECT]), st.integers(min_value=1, max_value=5_000)),
    max_size=12,
).map(lambda pairs: [ConnectionEvent('p', kind, t) for kind, t in sorted(pairs, key=lambda p: p[1])])


class TestDedupEvents:
    """Tests for dedup_events."""

    def test_burst_collapses(self):
        """Test that five Connects 1 ms apart collapse to one."""
        burst = events(*[(CONNECT, i) for i in range(5)])
        assert dedup_events(burst) == burst[:1]

    def test_outside_window_kept(self):
        """Test that Connects 600 ms apart are both kept."""
        pair = events((CONNECT, 0), (CONNECT, 600))
        assert dedup_events(pair) == pair

    def test_window_boundary(self):
        """Test that an event exactly one window later is kept."""
        pair = events((CONNECT, 0), (CONNECT, 500))
        assert dedup_events(pair) == pair

    def test_kinds_independent(self):
        """Test that a Connect and a Disconnect close together are both kept."""
        pair = events((CONNECT, 0), (DISCONNECT, 100))
        assert dedup_events(pair) == pair

    def test_anchored_at_kept_event(self):
        """Test that the window does not slide with dropped events."""
        chain = events((CONNECT, 0), (CONNECT, 300), (CONNECT, 600), (CONNECT, 900))
        assert [e.t_ms - T0 for e in dedup_events(chain)] == [0, 600]

    def test_unsorted_input(self):
        """Test that unsorted events raise UnsortedInput."""
        with pytest.raises(UnsortedInput):
            dedup_events(events((CONNECT, 10), (CONNECT, 0)))

    def test_empty(self):
        """Test that no events give no events."""
        assert dedup_events([]) == []

    def test_window_must_be_positive(self):
        """Test that a zero window is refused."""
        with pytest.raises(ValueError):
            DedupPolicy(window_ms=0)

    @settings(max_examples=500, deadline=None)
    @given(event_lists, st.integers(min_value=1, max_value=1_000))
    def test_matches_reference(self, event_list, window):
        """Test equivalence with the exhaustive reference implementation."""
        assert dedup_events(event_list, DedupPolicy(window)) == reference_dedup(event_list, window)

    @pytest.mark.slow
    @settings(max_examples=10_000, deadline=None)
    @given(event_lists, st.integers(min_value=1, max_value=1_000))
    def test_matches_reference_exhaustive(self, event_list, window):
        """Test equivalence with the reference over 10,000 random sequences."""
        assert dedup_events(event_list, DedupPolicy(window)) == reference_dedup(event_list, window)

    @settings(max_examples=200, deadline=None)
    @given(event_lists)
    def test_idempotent(self, event_list):
        """Test that deduplicating twice changes nothing."""
        once = dedup_events(event_list)
        assert dedup_events(once) == once

    @settings(max_examples=200, deadline=None)
    @given(event_lists)
    def test_first_of_each_kind_kept(self, event_list):
        """Test that output is a sorted subsequence that keeps each kind's first event."""
        kept = dedup_events(event_list)
        assert all(e in event_list for e in kept)
        assert [e.t_ms for e in kept] == sorted(e.t_ms for e in kept)
        for kind in (CONNECT, DISCONNECT):
            firsts = [e for e in event_list if e.kind == kind][:1]
            assert firsts == [e for e in kept if e.kind == kind][:1]


class TestConnectionSessions:
    """Tests for connection_sessions and minutes."""

    def test_ten_minutes(self):
        """Test a 600,000 ms session."""
        summary = connection_sessions(events((CONNECT, 0), (DISCONNECT, 600_000)), T0 + 10_000_000)
        assert summary.total_connected_min == Decimal('10.000000')
        assert summary.closed_by_disconnect == 1

    def test_open_session_closes_at_snapshot_end(self):
        """Test that a trailing open session ends at the snapshot time."""
        summary = connection_sessions(events((CONNECT, 0)), T0 + 1_476_025)
        assert summary.total_connected_min == Decimal('24.600416')
        assert summary.closed_by_disconnect == 0

    def test_leading_disconnect_is_orphan(self):
        """Test that a Disconnect before any Connect is an orphan."""
        summary = connection_sessions(
            events((DISCONNECT, 0), (CONNECT, 1_000), (DISCONNECT, 61_000)), T0 + 100_000
        )
        assert summary.orphan_disconnects == [T0]
        assert summary.sessions == [(T0 + 1_000, T0 + 61_000)]

    def test_repeated_connect_joins_session(self):
        """Test that a Connect inside an open session does not restart it."""
        summary = connection_sessions(
            events((CONNECT, 0), (CONNECT, 60_000), (DISCONNECT, 120_000)), T0 + 200_000
        )
        assert summary.sessions == [(T0, T0 + 120_000)]

    def test_minutes_truncates(self):
        """Test truncation to six digits."""
        assert minutes(1) == Decimal('0.000016')
        assert minutes(0) == Decimal('0.000000')


class TestDerivePeer:
    """Tests for derive_peer on the single-peer fixture."""

    def test_ten_session_peer(self):
        """Test 10 connections, 10 disconnections and 24.600416 minutes after dedup."""
        peer = derive_peer(ten_session_peer(), DEFAULT_TOPICS, T0 + 86_400_000)
        assert peer.connections == 10
        assert peer.disconnections == 10
        assert peer.connected_time_min == Decimal('24.600416')
        assert peer.total_messages == 0

    def test_without_dedup(self):
        """Test that a 1 ms window keeps every burst event."""
        peer = derive_peer(ten_session_peer(), DEFAULT_TOPICS, T0 + 86_400_000, DedupPolicy(1))
        assert peer.connections == 50


class TestAggregate:
    """Tests for aggregate."""

    def test_average_connections(self):
        """Test per-family averages of connections."""
        snapshot = make_snapshot(
            make_peer('l1', events=sessions(*[(i * 100_000, i * 100_000 + 1_000) for i in range(4)])),
            make_peer('l2', events=sessions(*[(i * 100_000, i * 100_000 + 1_000) for i in range(6)])),
            make_peer('p1', family=ClientFamily.PRYSM,
                      events=sessions(*[(i * 100_000, i * 100_000 + 1_000) for i in range(10)])),
        )
        table = aggregate(snapshot).per_client.set_index('client_family')
        assert table.loc['Lighthouse', 'avg_connections'] == 5.0
        assert table.loc['Prysm', 'avg_connections'] == 10.0
        assert table.loc['Lighthouse', 'peer_count'] == 2

    def test_version_counts(self):
        """Test distinct versions per family: 5/5/2/5/0/1."""
        multiplicities = {
            ClientFamily.LIGHTHOUSE: 5,
            ClientFamily.TEKU: 5,
            ClientFamily.NIMBUS: 2,
            ClientFamily.PRYSM: 5,
            ClientFamily.LODESTAR: 0,
        }
        peers = []
        for family, count in multiplicities.items():
            for i in range(count):
                # Two peers per version, so peers and versions differ
                for copy in range(2):
                    peers.append(make_peer(f'{family.value}-{i}-{copy}', family=family,
                                           version=f'v{i}.0', events=sessions((0, None))))
        peers.append(make_peer('unknown-0', family=ClientFamily.UNKNOWN, version='', events=sessions((0, None))))

        versions = aggregate(make_snapshot(*peers)).versions
        assert [versions[f] for f in ClientFamily.ordered()] == [5, 5, 2, 5, 0, 1]

    def test_unconnected_peers_excluded(self):
        """Test that peers never connected count for peerstore_size only."""
        report = aggregate(make_snapshot(
            make_peer('a', events=sessions((0, 60_000))),
            make_peer('b'),
        ))
        assert [p.peer_id for p in report.per_peer] == ['a']
        assert report.summary_value('peerstore_size') == '2'
        assert report.summary_value('connected_count') == '1'

    def test_default_port_share(self):
        """Test the share of peers advertising the Prysm default port."""
        report = aggregate(make_snapshot(
            make_peer('a', multiaddr='/ip4/95.216.3.4/tcp/13000'),
            make_peer('b'),
        ))
        assert report.summary_value('default_port_share') == '0.500000'

    def test_per_country(self):
        """Test peers per country, most common first."""
        report = aggregate(make_snapshot(
            make_peer('a', country='Germany', events=sessions((0, None))),
            make_peer('b', country='Finland', events=sessions((0, None))),
            make_peer('c', country='Germany', events=sessions((0, None))),
        ))
        assert list(report.per_country['country']) == ['Germany', 'Finland']
        assert list(report.per_country['peer_count']) == [2, 1]

    def test_empty_snapshot(self):
        """Test that an empty snapshot yields empty tables and zeroed summaries."""
        report = aggregate(make_snapshot())
        assert report.per_peer == []
        assert report.per_client.empty
        assert all(count == 0 for count in report.versions.values())
        assert report.summary_value('peerstore_size') == '0'
        assert report.summary_value('default_port_share') == '0.000000'
        assert report.summary_value('top10_share_BeaconBlock') == '0.000000'


class TestTopKShare:
    """Tests for top_k_share."""

    @pytest.fixture
    def skewed(self):
        heavy = [derived(f'h{i:02d}', total=75) for i in range(10)]
        light = [derived(f'l{i:02d}', total=25) for i in range(10)]
        return heavy + light

    def test_three_quarters(self, skewed):
        """Test that 10 peers holding 75% of the messages give 0.75."""
        assert top_k_share(skewed, 'BeaconBlock', 10) == pytest.approx(0.75, abs=1e-4)

    def test_k_covers_everyone(self, skewed):
        """Test that k >= number of peers gives 1."""
        assert top_k_share(skewed, 'BeaconBlock', 20) == 1.0
        assert top_k_share(skewed, 'BeaconBlock', 50) == 1.0

    def test_all_zero(self):
        """Test that a silent topic has share 0."""
        assert top_k_share([derived('a'), derived('b')], 'BeaconBlock', 1) == 0.0

    def test_nondecreasing_in_k(self, skewed):
        """Test that the share never drops as k grows."""
        shares = [top_k_share(skewed, 'BeaconBlock', k) for k in range(1, 21)]
        assert shares == sorted(shares)

    def test_k_must_be_positive(self, skewed):
        """Test that k < 1 is refused."""
        with pytest.raises(ValueError):
            top_k_share(skewed, 'BeaconBlock', 0)


class TestFlagOutliers:
    """Tests for flag_outliers."""

    def test_super_peer(self):
        """Test that 100,000 messages over 2160 minutes is a SuperPeer."""
        flags = flag_outliers([derived('super', total=100_000, connected_min='2160')])
        assert flags == [('super', OutlierFlag.SUPER_PEER)]

    def test_ordinary_peer(self):
        """Test that the single-peer fixture raises no flag."""
        assert flag_outliers([derived('plain', total=0, connected_min='24.600416')]) == []

    def test_high_rate(self):
        """Test that 5000 messages in 5 minutes is HighRate."""
        flags = flag_outliers([derived('fast', total=5_000, connected_min='5')])
        assert flags == [('fast', OutlierFlag.HIGH_RATE)]

    def test_silent(self):
        """Test that three silent hours are flagged."""
        flags = flag_outliers([derived('quiet', total=0, connected_min='180')])
        assert flags == [('quiet', OutlierFlag.SILENT)]
