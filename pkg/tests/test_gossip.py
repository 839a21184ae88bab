"""
Tests for the GossipSub router: subscriptions, first-delivery crediting,
IHAVE/IWANT bookkeeping, the message cache and mesh maintenance.
"""

import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gossipwatch.gossip import (
    DEFAULT_TOPICS,
    AlreadySubscribed,
    DeliveryOutcome,
    Forward,
    GossipMessage,
    GossipParams,
    Graft,
    IHave,
    IWant,
    NotSubscribed,
    Prune,
    Router,
    compute_msg_id,
    select_from_minus,
    write_delivery_log,
)

TOPIC = 'BeaconBlock'


def make_router(topics=(TOPIC,), params=None, credits=None):
    def credit(peer_id, topic):
        if credits is not None:
            credits[(peer_id, topic)] += 1

    router = Router('crawler', params, rng=random.Random(1), on_first_delivery=credit)
    for topic in topics:
        router.subscribe(topic)
    return router


def add_peers(router, count, topics=(TOPIC,)):
    peers = [f'peer-{i:02d}' for i in range(count)]
    for peer_id in peers:
        router.add_peer(peer_id, topics)
    return peers


class TestSubscriptions:
    """Tests for subscribe and unsubscribe."""

    def test_default_topics(self):
        """Test subscribing to all five default topics."""
        router = make_router(DEFAULT_TOPICS)
        assert len(router.subscriptions) == 5

    def test_subscribe_twice(self):
        """Test that a second subscribe raises AlreadySubscribed."""
        router = make_router()
        with pytest.raises(AlreadySubscribed):
            router.subscribe(TOPIC)

    def test_unsubscribe_prunes_mesh(self):
        """Test that leaving a topic prunes its mesh peers."""
        router = make_router()
        add_peers(router, 6)
        router.heartbeat(0)
        router.drain_outbox()
        router.unsubscribe(TOPIC)
        frames = router.drain_outbox()
        assert len(frames) == 6
        assert all(isinstance(f, Prune) for f in frames)

    def test_unsubscribe_unknown(self):
        """Test that leaving a topic never joined raises NotSubscribed."""
        with pytest.raises(NotSubscribed):
            make_router().unsubscribe('VoluntaryExit')


class TestHandleFullMessage:
    """Tests for first-delivery crediting."""

    def test_first_copy_credited(self):
        """Test that the first copy is DeliveredFirst and credited."""
        credits = Counter()
        router = make_router(credits=credits)
        message = GossipMessage(TOPIC, b'block-1')

        assert router.handle_full_message('peer-a', message, 10) == DeliveryOutcome.DELIVERED_FIRST
        assert credits == Counter({('peer-a', TOPIC): 1})
        assert router.delivery_log[0].first_relayer == 'peer-a'

    def test_second_copy_duplicate(self):
        """Test that a later copy from another peer is a Duplicate."""
        credits = Counter()
        router = make_router(credits=credits)
        message = GossipMessage(TOPIC, b'block-1')
        router.handle_full_message('peer-a', message, 10)

        assert router.handle_full_message('peer-b', message, 20) == DeliveryOutcome.DUPLICATE
        assert credits[('peer-b', TOPIC)] == 0

    def test_unsubscribed_topic_ignored(self):
        """Test that messages on other topics are Ignored."""
        router = make_router(topics=())
        outcome = router.handle_full_message('peer-a', GossipMessage('X', b'm'), 0)
        assert outcome == DeliveryOutcome.IGNORED
        assert router.delivery_log == []

    def test_no_recredit_after_ttl(self):
        """Test that a message is never credited twice, even after the seen cache expired."""
        credits = Counter()
        router = make_router(params=GossipParams(seen_ttl_ms=100), credits=credits)
        message = GossipMessage(TOPIC, b'block-1')
        router.handle_full_message('peer-a', message, 0)
        router.heartbeat(500)

        assert not router.is_seen(message.msg_id)
        assert router.handle_full_message('peer-b', message, 600) == DeliveryOutcome.DUPLICATE
        assert sum(credits.values()) == 1

    def test_forwards_to_mesh_except_sender(self):
        """Test that a first copy is forwarded to every other mesh peer."""
        router = make_router()
        peers = add_peers(router, 6)
        router.heartbeat(0)
        router.drain_outbox()

        router.handle_full_message(peers[0], GossipMessage(TOPIC, b'm'), 1)
        targets = [f.peer_id for f in router.drain_outbox() if isinstance(f, Forward)]
        assert targets == sorted(peers[1:])

    def test_msg_id_is_topic_and_payload_digest(self):
        """Test that a mismatching msg_id is rejected."""
        message = GossipMessage(TOPIC, b'payload')
        assert message.msg_id == compute_msg_id(TOPIC, b'payload')
        with pytest.raises(ValueError):
            GossipMessage(TOPIC, b'payload', msg_id=b'\x00' * 32)


class TestIHaveIWant:
    """Tests for handle_ihave and handle_iwant."""

    def test_only_unseen_requested(self):
        """Test that seen ids are not requested."""
        router = make_router()
        seen = GossipMessage(TOPIC, b'seen')
        unseen = GossipMessage(TOPIC, b'unseen')
        router.handle_full_message('peer-a', seen, 0)

        wanted = router.handle_ihave('peer-b', TOPIC, [seen.msg_id, unseen.msg_id])
        assert wanted == [unseen.msg_id]
        assert IWant('peer-b', (unseen.msg_id,)) in router.drain_outbox()

    def test_all_seen(self):
        """Test that an announcement of seen ids yields nothing."""
        router = make_router()
        message = GossipMessage(TOPIC, b'seen')
        router.handle_full_message('peer-a', message, 0)
        assert router.handle_ihave('peer-b', TOPIC, [message.msg_id]) == []

    def test_no_double_iwant(self):
        """Test that ids pending from one peer are not requested from another."""
        router = make_router()
        ids = [GossipMessage(TOPIC, bytes([i])).msg_id for i in range(3)]
        extra = GossipMessage(TOPIC, b'extra').msg_id

        assert router.handle_ihave('peer-a', TOPIC, ids[:2]) == ids[:2]
        assert router.handle_ihave('peer-b', TOPIC, ids + [extra]) == [ids[2], extra]

    def test_pending_released_when_peer_leaves(self):
        """Test that removing a peer lets its pending ids be requested again."""
        router = make_router()
        msg_id = GossipMessage(TOPIC, b'x').msg_id
        router.handle_ihave('peer-a', TOPIC, [msg_id])
        router.remove_peer('peer-a')
        assert router.handle_ihave('peer-b', TOPIC, [msg_id]) == [msg_id]

    def test_iwant_returns_cached(self):
        """Test that a message delivered 1 s ago is returned."""
        router = make_router()
        message = GossipMessage(TOPIC, b'cached')
        router.handle_full_message('peer-a', message, 1_000)
        assert router.handle_iwant('peer-b', [message.msg_id], 2_000) == [message]

    def test_iwant_unknown_omitted(self):
        """Test that unknown ids are omitted."""
        router = make_router()
        assert router.handle_iwant('peer-b', [b'\x01' * 32], 0) == []

    def test_iwant_expired_omitted(self):
        """Test that ids older than the cache TTL are omitted."""
        router = make_router(params=GossipParams(seen_ttl_ms=1_000))
        message = GossipMessage(TOPIC, b'old')
        router.handle_full_message('peer-a', message, 0)
        assert router.handle_iwant('peer-b', [message.msg_id], 1_000) == []


class TestHeartbeat:
    """Tests for mesh maintenance."""

    def test_graft_up_to_d(self):
        """Test that a mesh of 2 with D_low=4, D=6 grafts 4 peers."""
        router = make_router()
        peers = add_peers(router, 10)
        for peer_id in peers[:2]:
            router.handle_graft(peer_id, TOPIC)

        actions = router.heartbeat(0)
        assert len(actions.grafts) == 4
        assert len(router.mesh[TOPIC]) == 6
        assert all(isinstance(g, Graft) for g in actions.grafts)

    def test_prune_down_to_d(self):
        """Test that a mesh of 14 with D_high=12, D=6 prunes 8 peers."""
        router = make_router(params=GossipParams(D_high=14))
        peers = add_peers(router, 14)
        for peer_id in peers:
            router.handle_graft(peer_id, TOPIC)
        router.params = GossipParams()

        actions = router.heartbeat(0)
        assert len(actions.prunes) == 8
        assert len(router.mesh[TOPIC]) == 6
        assert len(router.fanout[TOPIC]) == 8

    def test_steady_state(self):
        """Test that a mesh of D changes nothing."""
        router = make_router()
        peers = add_peers(router, 6)
        for peer_id in peers:
            router.handle_graft(peer_id, TOPIC)
        actions = router.heartbeat(0)
        assert actions.grafts == [] and actions.prunes == []

    def test_graft_refused_above_d_high(self):
        """Test that GRAFTs beyond D_high are answered with PRUNE."""
        router = make_router()
        peers = add_peers(router, 13)
        for peer_id in peers:
            router.handle_graft(peer_id, TOPIC)
        assert len(router.mesh[TOPIC]) == 12
        assert Prune(peers[-1], TOPIC) in router.drain_outbox()

    def test_ihave_sent_outside_mesh(self):
        """Test that recent ids are announced to non-mesh peers only."""
        router = make_router()
        peers = add_peers(router, 10)
        router.heartbeat(0)
        message = GossipMessage(TOPIC, b'recent')
        router.handle_full_message(peers[0], message, 1)

        actions = router.heartbeat(700)
        targets = {ihave.peer_id for ihave in actions.ihaves}
        assert targets
        assert not targets & router.mesh[TOPIC]
        assert all(isinstance(i, IHave) and message.msg_id in i.msg_ids for i in actions.ihaves)

    def test_publish_forwards_to_mesh(self):
        """Test that publishing with a mesh of 6 sends 6 forwards."""
        router = make_router()
        add_peers(router, 6)
        router.heartbeat(0)
        router.drain_outbox()

        message = router.publish(TOPIC, b'own', 10)
        assert sum(isinstance(f, Forward) for f in router.drain_outbox()) == 6
        assert router.handle_full_message('peer-00', message, 20) == DeliveryOutcome.DUPLICATE

    def test_publish_unsubscribed(self):
        """Test that publishing on an unjoined topic raises NotSubscribed."""
        with pytest.raises(NotSubscribed):
            make_router().publish('VoluntaryExit', b'x', 0)


class TestSelectFromMinus:
    """Tests for select_from_minus."""

    def test_returns_all_when_short(self):
        """Test that a small pool is returned whole and sorted."""
        assert select_from_minus(random.Random(0), 5, ['c', 'a', 'b'], ['b']) == ['a', 'c']

    def test_selection_ignores_pool_order(self):
        """Test that the result only depends on the rng state."""
        pool = [f'p{i}' for i in range(20)]
        first = select_from_minus(random.Random(9), 4, pool, [])
        second = select_from_minus(random.Random(9), 4, list(reversed(pool)), [])
        assert first == second


class TestDeliveryLog:
    """Tests for the delivery log export."""

    def test_write_delivery_log(self, tmp_path):
        """Test the CSV layout of the delivery log."""
        router = make_router()
        message = GossipMessage(TOPIC, b'm')
        router.handle_full_message('peer-a', message, 1606824023000.5)

        path = write_delivery_log(router, tmp_path / 'deliveries.csv')
        lines = path.read_text().splitlines()
        assert lines[0] == 'msg_id_hex,topic,first_relayer_peer_id,t_ms'
        assert lines[1] == f'{message.msg_id.hex()},{TOPIC},peer-a,1606824023000'


class TestExactlyOnceDelivery:
    """Property tests: each message is credited at most once, IWANT never asks for seen ids."""

    @settings(max_examples=25, deadline=None)
    @given(
        data=st.data(),
        seed=st.integers(min_value=0, max_value=2 ** 32),
    )
    def test_random_schedules(self, data, seed):
        """Test 200 messages from 30 peers in random order, with IHAVE interleaved."""
        rng = random.Random(seed)
        credits = Counter()
        router = Router('crawler', GossipParams(seen_ttl_ms=5_000), rng=random.Random(seed))
        router.on_first_delivery = lambda peer_id, topic: credits.update([(peer_id, topic)])
        for topic in DEFAULT_TOPICS:
            router.subscribe(topic)
        peers = [f'peer-{i:02d}' for i in range(30)]
        for peer_id in peers:
            router.add_peer(peer_id, DEFAULT_TOPICS)

        messages = [GossipMessage(rng.choice(DEFAULT_TOPICS), f'm{i}'.encode()) for i in range(200)]
        copies = data.draw(st.integers(min_value=1, max_value=4), label='copies')
        schedule = [(rng.random() * 60_000, m, rng.choice(peers)) for m in messages for _ in range(copies)]
        schedule.sort(key=lambda item: item[0])

        credited_ids = Counter()
        next_heartbeat = 0.0
        for now, message, peer_id in schedule:
            while next_heartbeat <= now:
                router.heartbeat(next_heartbeat)
                next_heartbeat += router.params.heartbeat_ms
            if rng.random() < 0.3:
                announced = [m.msg_id for m in rng.sample(messages, 5) if m.topic == message.topic]
                seen_before = {m for m in announced if router.is_seen(m)}
                wanted = router.handle_ihave(rng.choice(peers), message.topic, announced)
                assert not set(wanted) & seen_before
            if router.handle_full_message(peer_id, message, now) == DeliveryOutcome.DELIVERED_FIRST:
                credited_ids[message.msg_id] += 1
            router.drain_outbox()

        assert all(count == 1 for count in credited_ids.values())
        assert len(credited_ids) == 200
        assert sum(credits.values()) == 200
