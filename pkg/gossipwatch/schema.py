"""
Central file-format definitions for gossipwatch.

This module is the single source of truth for the snapshot JSON keys, the
report CSV headers, the peerstore dump fields and the geolocation mapping
columns. Writers and readers both go through these classes.
"""

from typing import Dict, List, Optional, Tuple


class CSVDialect:
    """CSV conventions shared by every file gossipwatch writes."""

    ENCODING = 'utf-8'
    DELIMITER = ','
    LINETERMINATOR = '\n'
    NEWLINE = ''  # Use '' for universal newline mode in Python's csv module


class SnapshotSchema:
    """
    Key names of the snapshot JSON document.

    Version 1 layout: top-level metadata plus a `peers` array; each peer
    carries its identity fields, an `events` array and a `counters` map.
    """

    VERSION = 1

    SCHEMA = 'schema'
    CAPTURED_AT_MS = 'captured_at_ms'
    HOST_NODE_ID = 'host_node_id'
    NETWORK_ID = 'network_id'
    PEERS = 'peers'

    PEER_ID = 'peer_id'
    NODE_ID = 'node_id'
    PUBKEY = 'pubkey'
    MULTIADDR = 'multiaddr'
    IP = 'ip'
    COUNTRY = 'country'
    CITY = 'city'
    ISP = 'isp'
    CLIENT_FAMILY = 'client_family'
    CLIENT_VERSION = 'client_version'
    LATENCY_S = 'latency_s'
    EVENTS = 'events'
    COUNTERS = 'counters'

    KIND = 'kind'
    T_MS = 't_ms'

    REQUIRED_TOP_LEVEL: List[str] = [SCHEMA, CAPTURED_AT_MS, HOST_NODE_ID, NETWORK_ID, PEERS]

    REQUIRED_PEER: List[str] = [
        PEER_ID,
        NODE_ID,
        PUBKEY,
        MULTIADDR,
        IP,
        COUNTRY,
        CITY,
        CLIENT_FAMILY,
        CLIENT_VERSION,
        LATENCY_S,
        EVENTS,
        COUNTERS,
    ]

    # Optional peer keys and the value used when they are absent
    OPTIONAL_PEER: Dict[str, str] = {
        ISP: 'Unknown',
    }

    REQUIRED_EVENT: List[str] = [KIND, T_MS]

    @classmethod
    def missing_keys(cls, document: dict, required: List[str]) -> List[str]:
        """Return the required keys absent from a JSON object, in schema order."""
        return [key for key in required if key not in document]


class ReportSchema:
    """Headers of the analyzer's CSV reports and the crawler's side exports."""

    PER_PEER_FILE = 'per_peer.csv'
    PER_CLIENT_FILE = 'per_client.csv'
    PER_COUNTRY_FILE = 'per_country.csv'
    SUMMARY_FILE = 'summary.csv'
    FLAGS_FILE = 'flags.csv'
    CLIENT_VERSIONS_FILE = 'client_versions.csv'

    DELIVERY_LOG_FILE = 'deliveries.csv'
    PEERSTORE_DUMP_FILE = 'peerstore.jsonl'

    @staticmethod
    def per_peer_headers(topics: List[str]) -> List[str]:
        return (
            ['peer_id', 'client_family', 'client_version', 'country', 'city', 'isp', 'ip',
             'latency_s', 'connections', 'disconnections', 'connected_time_min']
            + list(topics)
            + ['total_messages']
        )

    @staticmethod
    def per_client_headers(topics: List[str]) -> List[str]:
        headers = ['client_family', 'peer_count', 'avg_connections', 'avg_disconnections',
                   'avg_connected_time_min', 'avg_latency_s']
        for topic in topics:
            headers.append(f'{topic}_total')
            headers.append(f'{topic}_avg')
        headers.append('version_count')
        return headers

    PER_COUNTRY_HEADERS: List[str] = ['country', 'peer_count']
    SUMMARY_HEADERS: List[str] = ['key', 'value']
    FLAGS_HEADERS: List[str] = ['peer_id', 'flag']
    CLIENT_VERSIONS_HEADERS: List[str] = ['client_family', 'version_count']

    DELIVERY_LOG_HEADERS: List[str] = ['msg_id_hex', 'topic', 'first_relayer_peer_id', 't_ms']

    PEERSTORE_DUMP_FIELDS: List[str] = [
        'node_id', 'seq', 'ip', 'tcp', 'udp', 'network_id', 'first_seen_ms', 'last_seen_ms',
    ]


class GeoSchema:
    """
    Columns of the offline geolocation mapping file.

    Accepts a few common alternative header spellings found in exported
    geo databases.
    """

    IP = 'ip'
    COUNTRY = 'country'
    CITY = 'city'
    ISP = 'isp'

    REQUIRED_HEADERS: List[str] = [IP, COUNTRY, CITY]
    OPTIONAL_HEADERS: List[str] = [ISP]

    # Maps alternative header names to canonical names
    ALIASES: Dict[str, str] = {
        'network': IP,
        'cidr': IP,
        'country_name': COUNTRY,
        'city_name': CITY,
        'organization': ISP,
        'org': ISP,
    }

    @classmethod
    def normalize_header(cls, header: str) -> str:
        """
        Normalize a header name to canonical form.

        Examples:
            >>> GeoSchema.normalize_header('  Country_Name ')
            'country'
            >>> GeoSchema.normalize_header('CIDR')
            'ip'
        """
        normalized = header.strip().lower()
        return cls.ALIASES.get(normalized, normalized)

    @classmethod
    def validate_headers(cls, headers: Optional[List[str]]) -> Tuple[bool, Optional[str]]:
        """
        Validate that all required headers are present.

        Returns:
            Tuple of (is_valid, error_message)
        """
        if not headers:
            return False, "Geo mapping file is empty or has no headers"

        normalized = [cls.normalize_header(h) for h in headers]
        missing = [h for h in cls.REQUIRED_HEADERS if h not in normalized]
        if missing:
            return False, f"Geo mapping missing required headers: {', '.join(missing)}"

        return True, None

    @classmethod
    def create_header_mapping(cls, headers: List[str]) -> Dict[str, str]:
        """Map raw header -> canonical header."""
        return {header: cls.normalize_header(header) for header in headers}
