"""
Tests that compare crawler output with simulator ground truth.
"""

import time
from copy import deepcopy

import pytest

from gossipwatch.analyzer import aggregate
from gossipwatch.oracle import expected_counters, verify_counters, verify_durations
from gossipwatch.simnet import (
    GroundTruth,
    PeerGroup,
    PeerProfile,
    PublishRecord,
    Scenario,
    build_simulation,
    load_scenario,
    run_scenario,
)

PUBLISHER = PeerProfile(
    name='publisher',
    user_agent='Lighthouse/v1.0.3-65dcdc3/x86_64-linux',
    link_delay_ms=40,
    publish_rate_per_min={'BeaconBlock': 1.0, 'BeaconAggregateAndProof': 2.0, 'VoluntaryExit': 0.5},
)
FAST = PeerProfile(
    name='fast',
    user_agent='teku/v20.12.0/linux-x86_64',
    link_delay_ms=10,
    publish_rate_per_min={'BeaconBlock': 1.0, 'BeaconAggregateAndProof': 2.0},
)


@pytest.fixture(scope='module')
def mixed_run():
    scenario = Scenario(
        seed=42,
        duration_ms=30 * 60_000,
        peers=(PeerGroup(10, PUBLISHER), PeerGroup(5, FAST)),
        bootnodes=(0, 10),
    )
    return run_scenario(scenario)


class TestVerifyCounters:
    """Tests for verify_counters."""

    def test_counters_match(self, mixed_run):
        """Test that crawler counters equal the replayed first relayers."""
        snapshot, truth = mixed_run
        report = verify_counters(snapshot, truth)
        assert report.ok, report.lines()
        assert report.checked > 0

    def test_every_publish_credited_once(self, mixed_run):
        """Test that credited totals never exceed the publish count."""
        snapshot, truth = mixed_run
        credited = sum(sum(p.counters.values()) for p in snapshot.peers)
        assert 0 < credited <= len(truth.publish_log)

    def test_injected_fault(self, mixed_run):
        """Test that one altered counter gives exactly one mismatch."""
        snapshot, truth = mixed_run
        broken = deepcopy(snapshot)
        peer = next(p for p in broken.peers if p.counters['BeaconBlock'] > 0)
        peer.counters['BeaconBlock'] += 1

        report = verify_counters(broken, truth)
        assert len(report.mismatches) == 1
        mismatch = report.mismatches[0]
        assert (mismatch.peer_id, mismatch.topic) == (peer.peer_id, 'BeaconBlock')
        assert mismatch.actual == mismatch.expected + 1

    def test_zero_publish_scenario(self):
        """Test that a silent network verifies with all counters zero."""
        quiet = Scenario(seed=5, duration_ms=5 * 60_000, peers=(PeerGroup(4, PeerProfile(name='quiet')),))
        snapshot, truth = run_scenario(quiet)
        assert truth.publish_log == []
        assert expected_counters(truth) == {}
        assert verify_counters(snapshot, truth).ok
        assert all(sum(p.counters.values()) == 0 for p in snapshot.peers)

    def test_arrival_after_end_not_counted(self):
        """Test that a copy still in flight when the run ends is not expected."""
        truth = GroundTruth(
            link_delays={'origin': 20, 'near': 10, 'far': 15},
            sessions={'near': [[0, None]], 'far': [[0, None]]},
            publish_log=[
                PublishRecord('01', 'origin', 'BeaconBlock', 100.5),
                PublishRecord('02', 'origin', 'BeaconBlock', 980.5),
            ],
            topics=['BeaconBlock'],
            end_ms=1_000,
        )
        # Second publish reaches near at 1020.5 and far at 1030.5
        assert expected_counters(truth) == {'near': {'BeaconBlock': 1}}

    def test_arrival_at_end_counted(self):
        """Test that a copy arriving exactly at the end is still expected."""
        truth = GroundTruth(
            link_delays={'origin': 20, 'near': 10},
            sessions={'near': [[0, None]]},
            publish_log=[PublishRecord('01', 'origin', 'BeaconBlock', 960.0)],
            topics=['BeaconBlock'],
            end_ms=1_000,
        )
        assert expected_counters(truth) == {'near': {'BeaconBlock': 1}}

    def test_publishes_near_end_verify(self):
        """Test that a run cut short with messages in flight still verifies."""
        scenario = Scenario(seed=9, duration_ms=20 * 60_000, peers=(PeerGroup(8, PUBLISHER),))
        snapshot, truth = run_scenario(scenario, duration_ms=7 * 60_000 + 13)
        assert truth.publish_log
        report = verify_counters(snapshot, truth)
        assert report.ok, report.lines()


class TestRelayDuplicates:
    """Tests for runs that deliver every relayed copy."""

    @pytest.fixture(scope='class')
    def duplicate_run(self):
        scenario = Scenario(
            seed=11,
            duration_ms=10 * 60_000,
            peers=(PeerGroup(6, PUBLISHER),),
            relay_duplicates=True,
        )
        simulation = build_simulation(scenario)
        simulation.run()
        snapshot, truth = simulation.finish(flush=False)
        return simulation, snapshot, truth

    def test_copies_exceed_deliveries(self, duplicate_run):
        """Test that more copies arrive than first deliveries are logged."""
        simulation, _, _ = duplicate_run
        deliveries = len(simulation.host.router.delivery_log)
        assert deliveries > 0
        assert simulation.network.copies_delivered > deliveries

    def test_router_matches_store(self, duplicate_run):
        """Test that router delivery counts equal the store's counter totals."""
        simulation, snapshot, _ = duplicate_run
        router_counts = simulation.host.router.topic_delivery_counts()
        assert router_counts == simulation.host.metrics.counter_totals()
        assert {t: n for t, n in router_counts.items() if n} == {
            t: n for t, n in snapshot.topic_totals().items() if n
        }

    def test_counters_verify(self, duplicate_run):
        """Test that duplicates never inflate the first-relayer counters."""
        _, snapshot, truth = duplicate_run
        report = verify_counters(snapshot, truth)
        assert report.ok, report.lines()


class TestVerifyDurations:
    """Tests for verify_durations."""

    def test_durations_match(self, mixed_run):
        """Test that analyzer sessions agree with the recorded schedule."""
        snapshot, truth = mixed_run
        report = verify_durations(snapshot, truth)
        assert report.ok, report.lines()

    def test_churn_durations(self):
        """Test durations for churning peers."""
        snapshot, truth = run_scenario(load_scenario('churn_20'))
        assert verify_durations(snapshot, truth).ok
        assert verify_counters(snapshot, truth).ok

    def test_legacy_events_same_durations(self):
        """Test that per-stream notifications change events but not durations."""
        scenario = load_scenario('churn_20')
        plain_snapshot, plain_truth = run_scenario(scenario)
        legacy_snapshot, legacy_truth = run_scenario(scenario.map_profiles(legacy_event_mode=True))

        assert legacy_truth.sessions == plain_truth.sessions
        assert verify_durations(legacy_snapshot, legacy_truth).ok
        plain_events = sum(len(p.events) for p in plain_snapshot.peers)
        legacy_events = sum(len(p.events) for p in legacy_snapshot.peers)
        assert legacy_events == 5 * plain_events

    def test_missing_session_reported(self, mixed_run):
        """Test that a session the crawler never saw is a mismatch."""
        snapshot, truth = mixed_run
        altered = deepcopy(truth)
        peer_id = sorted(altered.sessions)[0]
        altered.sessions[peer_id].append([altered.end_ms - 1_000, None])
        report = verify_durations(snapshot, altered)
        assert len(report.mismatches) == 1
        assert report.mismatches[0].actual is None


@pytest.mark.slow
class TestBundledScenarios:
    """End-to-end checks over the long bundled scenarios."""

    def test_basic_50(self):
        """Test that the 48-hour run verifies and looks like the expected population."""
        started = time.perf_counter()
        snapshot, truth = run_scenario(load_scenario('basic_50'))
        assert time.perf_counter() - started < 60
        assert verify_counters(snapshot, truth).ok
        assert verify_durations(snapshot, truth).ok

        report = aggregate(snapshot)
        assert report.summary_value('peerstore_size') == '50'
        assert report.summary_value('default_port_share') == '0.280000'
        families = set(report.per_client['client_family'])
        assert {'Lighthouse', 'Prysm', 'Teku', 'Nimbus', 'Unknown'} <= families

    def test_strategy_contrast(self):
        """Test that Flexible peers drop the crawler more often than Strict ones."""
        snapshot, truth = run_scenario(load_scenario('strategy_mix'))
        assert verify_durations(snapshot, truth).ok

        strict = [p for p, info in truth.peers.items() if info['strategy'] == 'Strict']
        assert all(len(truth.sessions.get(p, [])) == 1 for p in strict)

        table = aggregate(snapshot).per_client.set_index('client_family')
        assert table.loc['Teku', 'avg_connections'] > table.loc['Prysm', 'avg_connections']
        assert table.loc['Teku', 'avg_connected_time_min'] < table.loc['Prysm', 'avg_connected_time_min']
