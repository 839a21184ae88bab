"""
Node identity records.

A node record is a signed, sequence-numbered description of a peer: its
public key, the endpoints it listens on and the network it belongs to.
Records are signed with Ed25519 over a canonical length-prefixed encoding
of every field except the signature, and node ids are the SHA-256 digest
of the raw public key.
"""

import base64
import functools
import hashlib
import ipaddress
import string
import struct
from dataclasses import dataclass, replace
from typing import Any, List, Mapping, Tuple, Union

from libp2p.crypto.ed25519 import Ed25519PublicKey as Libp2pEd25519PublicKey
from libp2p.peer.id import ID
from multiaddr import Multiaddr
from multiaddr.exceptions import ProtocolLookupError, StringParseError
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import GossipwatchError
from .logging_utils import get_logger

logger = get_logger('identity')

SEED_SIZE = 32
NODE_ID_SIZE = 32
MAX_SEQ = 2 ** 64 - 1

# Field order of the canonical encoding
RECORD_FIELDS = (
    'node_id', 'pubkey', 'seq', 'ip', 'tcp_port', 'udp_port', 'network_id', 'signature',
)
MUTABLE_FIELDS = frozenset({'ip', 'tcp_port', 'udp_port', 'network_id'})


class KeyMismatch(GossipwatchError):
    """Raised when a keypair does not own the record it is asked to re-sign."""
    pass


class RecordDecodeError(GossipwatchError):
    """Raised when bytes or text cannot be decoded into a node record."""
    pass


@dataclass(frozen=True)
class Keypair:
    """
    Ed25519 keypair.

    Attributes:
        private_key: 32-byte seed used as the Ed25519 private key
        public_key: 32-byte raw public key
    """
    private_key: bytes
    public_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> 'Keypair':
        """Derive a keypair deterministically from 32 bytes of entropy."""
        if len(seed) != SEED_SIZE:
            raise ValueError(f"Seed must be {SEED_SIZE} bytes, got {len(seed)}")
        private = Ed25519PrivateKey.from_private_bytes(bytes(seed))
        public = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(private_key=bytes(seed), public_key=public)

    def sign(self, message: bytes) -> bytes:
        """Sign a message; Ed25519 signatures are deterministic."""
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)


@dataclass(frozen=True)
class NodeRecord:
    """
    Signed node record.

    Attributes:
        node_id: SHA-256 digest of the public key
        pubkey: Raw Ed25519 public key
        seq: Sequence number, bumped on every change
        ip: IPv4 or IPv6 address (normalized text form)
        tcp_port: libp2p listening port
        udp_port: Discovery port
        network_id: Opaque network membership tag
        signature: Signature over the canonical encoding of the other fields
    """
    node_id: bytes
    pubkey: bytes
    seq: int
    ip: str
    tcp_port: int
    udp_port: int
    network_id: bytes
    signature: bytes = b''

    def __post_init__(self):
        """Normalize the address and reject structurally invalid values."""
        try:
            normalized = str(ipaddress.ip_address(self.ip))
        except ValueError:
            raise ValueError(f"Invalid IP address: '{self.ip}'")
        object.__setattr__(self, 'ip', normalized)

        if not (1 <= self.seq <= MAX_SEQ):
            raise ValueError(f"Sequence number out of range: {self.seq}")
        for name in ('tcp_port', 'udp_port'):
            port = getattr(self, name)
            if not (0 <= port <= 0xFFFF):
                raise ValueError(f"{name} out of range: {port}")

    @property
    def peer_id(self) -> str:
        """libp2p-style peer id for this record's key."""
        return peer_id_from_pubkey(self.pubkey)

    @property
    def node_id_hex(self) -> str:
        return self.node_id.hex()


def node_id_from_pubkey(pubkey: bytes) -> bytes:
    """Compute the 32-byte node id for a public key."""
    return hashlib.sha256(pubkey).digest()


@functools.lru_cache(maxsize=4096)
def peer_id_from_pubkey(pubkey: bytes) -> str:
    """
    Compute the libp2p peer id for an Ed25519 public key.

    Ed25519 keys are short enough to be inlined as an identity multihash,
    which yields the familiar '12D3KooW' prefix.
    """
    return ID.from_pubkey(Libp2pEd25519PublicKey.from_bytes(pubkey)).to_base58()


def record_multiaddr(record: NodeRecord) -> str:
    """Dialable multiaddress of a record: /ip4|ip6/<ip>/tcp/<port>/p2p/<peer id>."""
    proto = 'ip6' if ipaddress.ip_address(record.ip).version == 6 else 'ip4'
    transport = Multiaddr(f"/{proto}/{record.ip}/tcp/{record.tcp_port}")
    return f"{transport}/p2p/{record.peer_id}"


def tcp_port_from_multiaddr(value: str) -> int:
    """Extract the TCP port of a multiaddress string (0 when it has none)."""
    try:
        return int(Multiaddr(value.split('/p2p/')[0]).value_for_protocol('tcp'))
    except (StringParseError, ProtocolLookupError, ValueError) as e:
        logger.debug(f"No TCP port in multiaddr {value!r}: {e}")
        return 0


def _pack_field(value: bytes) -> bytes:
    return struct.pack('>I', len(value)) + value


def _field_bytes(record: NodeRecord) -> List[bytes]:
    return [
        record.node_id,
        record.pubkey,
        struct.pack('>Q', record.seq),
        ipaddress.ip_address(record.ip).packed,
        struct.pack('>H', record.tcp_port),
        struct.pack('>H', record.udp_port),
        record.network_id,
    ]


def signing_preimage(record: NodeRecord) -> bytes:
    """Canonical encoding of every field except the signature."""
    return b''.join(_pack_field(value) for value in _field_bytes(record))


def encode_record(record: NodeRecord) -> bytes:
    """
    Encode a record canonically, signature included.

    Fields are length-prefixed (4-byte big-endian) and concatenated in
    RECORD_FIELDS order.
    """
    return signing_preimage(record) + _pack_field(record.signature)


def decode_record(data: bytes) -> NodeRecord:
    """
    Decode bytes produced by encode_record.

    Raises:
        RecordDecodeError: If the data is truncated, has trailing bytes or
            carries out-of-range field values
    """
    fields: List[bytes] = []
    offset = 0
    try:
        for _ in RECORD_FIELDS:
            (length,) = struct.unpack_from('>I', data, offset)
            offset += 4
            if offset + length > len(data):
                raise RecordDecodeError("Record truncated")
            fields.append(bytes(data[offset:offset + length]))
            offset += length
    except struct.error:
        raise RecordDecodeError("Record truncated")

    if offset != len(data):
        raise RecordDecodeError(f"{len(data) - offset} trailing byte(s) after record")

    node_id, pubkey, seq_raw, ip_raw, tcp_raw, udp_raw, network_id, signature = fields
    if len(seq_raw) != 8 or len(tcp_raw) != 2 or len(udp_raw) != 2:
        raise RecordDecodeError("Malformed integer field")
    if len(ip_raw) not in (4, 16):
        raise RecordDecodeError(f"Malformed address field ({len(ip_raw)} bytes)")

    try:
        return NodeRecord(
            node_id=node_id,
            pubkey=pubkey,
            seq=struct.unpack('>Q', seq_raw)[0],
            ip=str(ipaddress.ip_address(ip_raw)),
            tcp_port=struct.unpack('>H', tcp_raw)[0],
            udp_port=struct.unpack('>H', udp_raw)[0],
            network_id=network_id,
            signature=signature,
        )
    except ValueError as e:
        raise RecordDecodeError(str(e))


def verify_record(record: NodeRecord) -> bool:
    """
    Check a record's signature and node id.

    Returns:
        True iff node_id is the digest of pubkey and the signature verifies.
        Malformed keys or signatures yield False rather than an exception.
    """
    try:
        if record.node_id != node_id_from_pubkey(record.pubkey):
            return False
        public = Ed25519PublicKey.from_public_bytes(record.pubkey)
        public.verify(record.signature, signing_preimage(record))
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def _as_network_id(network_id: Union[str, bytes]) -> bytes:
    if isinstance(network_id, str):
        return network_id.encode('utf-8')
    return bytes(network_id)


def generate_identity(
    seed: bytes,
    ip: str,
    tcp_port: int,
    udp_port: int,
    network_id: Union[str, bytes],
) -> Tuple[Keypair, NodeRecord]:
    """
    Create a keypair and a signed seq=1 record from 32 bytes of entropy.

    Generation is deterministic: the same seed and endpoints always yield a
    bit-identical record.
    """
    if tcp_port == 0 or udp_port == 0:
        raise ValueError("Ports must be nonzero")

    keypair = Keypair.from_seed(seed)
    unsigned = NodeRecord(
        node_id=node_id_from_pubkey(keypair.public_key),
        pubkey=keypair.public_key,
        seq=1,
        ip=ip,
        tcp_port=tcp_port,
        udp_port=udp_port,
        network_id=_as_network_id(network_id),
    )
    record = replace(unsigned, signature=keypair.sign(signing_preimage(unsigned)))
    return keypair, record


def bump_record(keypair: Keypair, record: NodeRecord, changes: Mapping[str, Any]) -> NodeRecord:
    """
    Apply field changes, increment seq by one and re-sign.

    Args:
        keypair: Owner of the record
        record: Current record
        changes: Updates for any of ip, tcp_port, udp_port, network_id

    Raises:
        KeyMismatch: If the keypair does not match the record's public key
        ValueError: If a change targets an identity or bookkeeping field
    """
    if keypair.public_key != record.pubkey:
        raise KeyMismatch("Keypair public key does not match record pubkey")

    unknown = set(changes) - MUTABLE_FIELDS
    if unknown:
        raise ValueError(f"Cannot change record field(s): {', '.join(sorted(unknown))}")

    updates = dict(changes)
    if 'network_id' in updates:
        updates['network_id'] = _as_network_id(updates['network_id'])

    unsigned = replace(record, seq=record.seq + 1, signature=b'', **updates)
    return replace(unsigned, signature=keypair.sign(signing_preimage(unsigned)))


# -- text form -------------------------------------------------------------
#
# nodeid:<64 hex>/seq:<n>/<ip>:<tcp>:<udp>/net:<network_id>/pubkey:<b64url>/sig:<b64url>

_NETWORK_TEXT_CHARS = set(string.ascii_letters + string.digits + string.punctuation) - {'/'}


def network_id_text(network_id: bytes) -> str:
    try:
        text = network_id.decode('ascii')
    except UnicodeDecodeError:
        text = ''
    if text and all(c in _NETWORK_TEXT_CHARS for c in text) and not text.startswith('0x'):
        return text
    return '0x' + network_id.hex()


def _b64(value: bytes) -> str:
    return base64.urlsafe_b64encode(value).decode('ascii').rstrip('=')


def _unb64(value: str) -> bytes:
    return base64.urlsafe_b64decode(value + '=' * (-len(value) % 4))


def format_record_text(record: NodeRecord) -> str:
    """Render a record in the config-file text form."""
    return (
        f"nodeid:{record.node_id.hex()}/seq:{record.seq}"
        f"/{record.ip}:{record.tcp_port}:{record.udp_port}"
        f"/net:{network_id_text(record.network_id)}"
        f"/pubkey:{_b64(record.pubkey)}/sig:{_b64(record.signature)}"
    )


def parse_record_text(text: str) -> NodeRecord:
    """
    Parse the config-file text form.

    Raises:
        RecordDecodeError: If the text does not follow the grammar
    """
    parts = text.strip().split('/')
    if len(parts) != 6:
        raise RecordDecodeError(f"Expected 6 '/'-separated parts, got {len(parts)}")

    node_part, seq_part, endpoint, net_part, pubkey_part, sig_part = parts
    prefixes = (
        (node_part, 'nodeid:'),
        (seq_part, 'seq:'),
        (net_part, 'net:'),
        (pubkey_part, 'pubkey:'),
        (sig_part, 'sig:'),
    )
    for part, prefix in prefixes:
        if not part.startswith(prefix):
            raise RecordDecodeError(f"Expected '{prefix}' in '{part}'")

    try:
        ip, tcp, udp = endpoint.rsplit(':', 2)
        network = net_part[len('net:'):]
        network_id = bytes.fromhex(network[2:]) if network.startswith('0x') else network.encode()
        return NodeRecord(
            node_id=bytes.fromhex(node_part[len('nodeid:'):]),
            pubkey=_unb64(pubkey_part[len('pubkey:'):]),
            seq=int(seq_part[len('seq:'):]),
            ip=ip.strip('[]'),
            tcp_port=int(tcp),
            udp_port=int(udp),
            network_id=network_id,
            signature=_unb64(sig_part[len('sig:'):]),
        )
    except (ValueError, TypeError) as e:
        raise RecordDecodeError(f"Invalid record text: {e}")
