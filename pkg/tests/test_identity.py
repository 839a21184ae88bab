"""
Tests for node identity records: generation, canonical encoding, signature
verification, sequence bumps and the config-file text form.
"""

import hashlib
from dataclasses import replace
from unittest.mock import patch

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from libp2p.peer.id import ID

from gossipwatch.identity import (
    KeyMismatch,
    Keypair,
    RecordDecodeError,
    bump_record,
    decode_record,
    encode_record,
    format_record_text,
    generate_identity,
    network_id_text,
    parse_record_text,
    record_multiaddr,
    signing_preimage,
    tcp_port_from_multiaddr,
    verify_record,
)

ZERO_SEED = bytes(32)


def seed(n: int) -> bytes:
    return hashlib.sha256(str(n).encode()).digest()


@pytest.fixture
def identity():
    return generate_identity(ZERO_SEED, '127.0.0.1', 9000, 9000, 'mainnet')


class TestGenerateIdentity:
    """Tests for generate_identity."""

    def test_zero_seed_record_verifies(self, identity):
        """Test that a freshly generated record has seq 1 and verifies."""
        _, record = identity
        assert record.seq == 1
        assert verify_record(record) is True

    def test_generation_is_deterministic(self, identity):
        """Test that the same seed gives a bit-identical record."""
        _, again = generate_identity(ZERO_SEED, '127.0.0.1', 9000, 9000, 'mainnet')
        assert encode_record(identity[1]) == encode_record(again)

    def test_distinct_seeds_give_distinct_node_ids(self):
        """Test that 1000 seeds yield 1000 different node ids."""
        node_ids = {Keypair.from_seed(seed(i)).public_key for i in range(1000)}
        assert len(node_ids) == 1000

    def test_node_id_is_digest_of_pubkey(self, identity):
        """Test that node_id = SHA-256(pubkey)."""
        _, record = identity
        assert record.node_id == hashlib.sha256(record.pubkey).digest()

    def test_peer_id_has_libp2p_prefix(self, identity):
        """Test that the peer id looks like an Ed25519 libp2p id."""
        _, record = identity
        assert record.peer_id.startswith('12D3KooW')

    def test_peer_id_inlines_the_key(self, identity):
        """Test that the peer id decodes to the identity multihash of the protobuf key."""
        _, record = identity
        raw = ID.from_base58(record.peer_id).to_bytes()
        assert raw == b'\x00\x24\x08\x01\x12\x20' + record.pubkey

    def test_distinct_keys_distinct_peer_ids(self):
        """Test that different keys give different peer ids."""
        ids = {generate_identity(seed(n), '127.0.0.1', 9000, 9000, 'mainnet')[1].peer_id for n in range(5)}
        assert len(ids) == 5

    def test_zero_port_rejected(self):
        """Test that a zero port is refused."""
        with pytest.raises(ValueError):
            generate_identity(ZERO_SEED, '127.0.0.1', 0, 9000, 'mainnet')

    def test_short_seed_rejected(self):
        """Test that the seed must be 32 bytes."""
        with pytest.raises(ValueError):
            generate_identity(b'short', '127.0.0.1', 9000, 9000, 'mainnet')


class TestEncoding:
    """Tests for the canonical encoding."""

    def test_round_trip(self, identity):
        """Test decode(encode(r)) == r."""
        _, record = identity
        assert decode_record(encode_record(record)) == record

    def test_ipv6_round_trip(self):
        """Test that IPv6 addresses survive the encoding."""
        _, record = generate_identity(seed(1), '2001:db8::1', 9000, 9001, 'mainnet')
        assert decode_record(encode_record(record)).ip == '2001:db8::1'

    def test_seq_changes_encoding(self, identity):
        """Test that records differing only in seq encode differently."""
        _, record = identity
        assert encode_record(record) != encode_record(replace(record, seq=2))

    def test_preimage_ignores_signature(self, identity):
        """Test that the signing preimage does not cover the signature."""
        _, record = identity
        assert signing_preimage(record) == signing_preimage(replace(record, signature=b'x' * 64))

    def test_truncated_bytes_rejected(self, identity):
        """Test that truncated input raises RecordDecodeError."""
        data = encode_record(identity[1])
        with pytest.raises(RecordDecodeError):
            decode_record(data[:-3])

    def test_trailing_bytes_rejected(self, identity):
        """Test that trailing garbage raises RecordDecodeError."""
        with pytest.raises(RecordDecodeError):
            decode_record(encode_record(identity[1]) + b'\x00')

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(min_value=0, max_value=10_000),
        tcp=st.integers(min_value=1, max_value=0xFFFF),
        udp=st.integers(min_value=1, max_value=0xFFFF),
        network=st.text(alphabet='abcdefghij-0123456789', min_size=1, max_size=12),
    )
    def test_round_trip_any_record(self, n, tcp, udp, network):
        """Test the encoding round trip over generated records."""
        _, record = generate_identity(seed(n), '10.1.2.3', tcp, udp, network)
        assert decode_record(encode_record(record)) == record


class TestVerifyRecord:
    """Tests for verify_record."""

    def test_mutated_ip_fails(self, identity):
        """Test that changing the ip after signing breaks the signature."""
        _, record = identity
        assert verify_record(replace(record, ip='127.0.0.2')) is False

    def test_random_node_id_fails(self, identity):
        """Test that a node id that is not the pubkey digest fails."""
        _, record = identity
        assert verify_record(replace(record, node_id=seed(99))) is False

    def test_malformed_pubkey_returns_false(self, identity):
        """Test that a malformed key yields False instead of raising."""
        _, record = identity
        bad_key = b'\x01' * 7
        tampered = replace(record, pubkey=bad_key, node_id=hashlib.sha256(bad_key).digest())
        assert verify_record(tampered) is False


class TestBumpRecord:
    """Tests for bump_record."""

    def test_new_ip_increments_seq(self, identity):
        """Test that a change bumps seq by exactly one and re-signs."""
        keypair, record = identity
        bumped = bump_record(keypair, record, {'ip': '192.0.2.1'})
        assert bumped.seq == record.seq + 1
        assert bumped.ip == '192.0.2.1'
        assert verify_record(bumped)

    def test_empty_change_set(self, identity):
        """Test that an empty bump only changes seq and signature."""
        keypair, record = identity
        bumped = bump_record(keypair, record, {})
        assert replace(bumped, seq=record.seq, signature=record.signature) == record
        assert bumped.signature != record.signature

    def test_wrong_keypair(self, identity):
        """Test that bumping with another key raises KeyMismatch."""
        _, record = identity
        with pytest.raises(KeyMismatch):
            bump_record(Keypair.from_seed(seed(5)), record, {'ip': '192.0.2.1'})

    def test_identity_fields_are_immutable(self, identity):
        """Test that node_id and pubkey cannot be changed by a bump."""
        keypair, record = identity
        with pytest.raises(ValueError):
            bump_record(keypair, record, {'node_id': bytes(32)})


class TestTextForm:
    """Tests for the text form used in config files."""

    def test_round_trip(self, identity):
        """Test parse(format(r)) == r."""
        _, record = identity
        text = format_record_text(record)
        assert text.startswith(f'nodeid:{record.node_id.hex()}/seq:1/127.0.0.1:9000:9000/net:mainnet/')
        assert parse_record_text(text) == record

    def test_ipv6_text_round_trip(self):
        """Test that IPv6 endpoints parse back (ip split from the right)."""
        _, record = generate_identity(seed(3), '2001:db8::7', 9000, 9000, 'mainnet')
        assert parse_record_text(format_record_text(record)) == record

    def test_binary_network_id_rendered_as_hex(self):
        """Test that a non-printable network id is rendered as 0x-hex."""
        assert network_id_text(b'\x00\x01') == '0x0001'
        assert network_id_text(b'mainnet') == 'mainnet'

    def test_binary_network_id_round_trip(self):
        """Test that a binary network id survives the text form."""
        _, record = generate_identity(seed(4), '127.0.0.1', 9000, 9000, b'\xb5\x30\x3f\x2a')
        assert parse_record_text(format_record_text(record)) == record

    @pytest.mark.parametrize('text', [
        '',
        'nodeid:00/seq:1',
        'node:00/seq:1/127.0.0.1:1:1/net:x/pubkey:AA/sig:AA',
    ])
    def test_malformed_text_rejected(self, text):
        """Test that malformed text raises RecordDecodeError."""
        with pytest.raises(RecordDecodeError):
            parse_record_text(text)


class TestMultiaddr:
    """Tests for multiaddr helpers."""

    def test_record_multiaddr(self, identity):
        """Test the multiaddr of a record names ip, port and peer id."""
        _, record = identity
        addr = record_multiaddr(record)
        assert addr.startswith('/ip4/127.0.0.1/tcp/9000/p2p/')
        assert tcp_port_from_multiaddr(addr) == 9000

    def test_port_of_garbage_is_zero(self):
        """Test that an unparsable multiaddr gives port 0."""
        assert tcp_port_from_multiaddr('not a multiaddr') == 0
        assert tcp_port_from_multiaddr('') == 0

    def test_port_missing_logged(self):
        """Test that an address without a TCP component gives 0 and a debug line."""
        with patch('gossipwatch.identity.logger') as logger:
            assert tcp_port_from_multiaddr('/ip4/192.0.2.1/udp/9000') == 0
        logger.debug.assert_called_once()

    def test_unexpected_error_propagates(self):
        """Test that errors other than parse or lookup failures are not swallowed."""
        with patch('gossipwatch.identity.Multiaddr', side_effect=RuntimeError('boom')):
            with pytest.raises(RuntimeError):
                tcp_port_from_multiaddr('/ip4/192.0.2.1/tcp/9000')
