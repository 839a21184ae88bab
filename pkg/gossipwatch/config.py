"""
Configuration for the gossipwatch crawler.

This module centralizes the host settings (endpoints, network, topics,
timers and timeouts) and loads them from JSON or TOML files whose keys are
exactly the HostConfig field names.
"""

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .errors import GossipwatchError
from .gossip import DEFAULT_TOPICS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class BadConfig(GossipwatchError):
    """Raised when a host configuration is missing, malformed or invalid."""
    pass


@dataclass(frozen=True)
class GeoProviderConfig:
    """
    Geolocation provider selection.

    Attributes:
        name: Provider name ('offline' is the only built-in provider)
        path: Mapping file; None selects the bundled sample mapping
    """
    name: str = 'offline'
    path: Optional[str] = None


@dataclass(frozen=True)
class HostConfig:
    """
    Crawler host configuration.

    Attributes:
        listen_ip: Address advertised in the host's record
        tcp_port: libp2p port
        udp_port: Discovery port
        network_id: Network to join (advertised in the record and status)
        topics: Gossip topics to subscribe to
        export_interval_s: Seconds between snapshot exports
        max_outbound_dials_in_flight: Concurrent outbound dial limit
        geo_provider: Geolocation provider
        user_agent: Agent string presented to peers
        bootnodes: Bootnode records in text form
        discovery_interval_ms: Delay between discovery lookup rounds
        lookup_alpha: Peers queried per lookup round
        lookup_timeout_ms: Discovery request timeout
        dial_timeout_ms: Outbound dial timeout
        handshake_timeout_ms: Status exchange timeout
        ping_interval_s: Seconds between latency samples per peer
        ping_timeout_ms: Ping timeout
        dial_tick_ms: Connect-all scheduling period
    """
    listen_ip: str = '127.0.0.1'
    tcp_port: int = 9000
    udp_port: int = 9000
    network_id: str = 'mainnet'
    topics: List[str] = field(default_factory=lambda: list(DEFAULT_TOPICS))
    export_interval_s: int = 300
    max_outbound_dials_in_flight: int = 16
    geo_provider: GeoProviderConfig = field(default_factory=GeoProviderConfig)
    user_agent: str = 'gossipwatch/v0.3.0'
    bootnodes: List[str] = field(default_factory=list)
    discovery_interval_ms: int = 1000
    lookup_alpha: int = 3
    lookup_timeout_ms: int = 2000
    dial_timeout_ms: int = 5000
    handshake_timeout_ms: int = 10000
    ping_interval_s: int = 60
    ping_timeout_ms: int = 5000
    dial_tick_ms: int = 1000

    def validate(self):
        """
        Validate configuration.

        Raises:
            BadConfig: If configuration is invalid
        """
        if not isinstance(self.export_interval_s, int) or self.export_interval_s < 1:
            raise BadConfig(f"export_interval_s must be >= 1, got: {self.export_interval_s}")

        if not self.topics:
            raise BadConfig("topics cannot be empty")
        if len(set(self.topics)) != len(self.topics):
            raise BadConfig("topics must be unique")

        for name in ('tcp_port', 'udp_port'):
            port = getattr(self, name)
            if not isinstance(port, int) or not (1 <= port <= 0xFFFF):
                raise BadConfig(f"{name} must be between 1 and 65535, got: {port}")

        if not self.network_id:
            raise BadConfig("network_id cannot be empty")

        positive = (
            'max_outbound_dials_in_flight', 'discovery_interval_ms', 'lookup_alpha',
            'lookup_timeout_ms', 'dial_timeout_ms', 'handshake_timeout_ms',
            'ping_interval_s', 'ping_timeout_ms', 'dial_tick_ms',
        )
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise BadConfig(f"{name} must be a positive integer, got: {value}")

        if self.geo_provider.name != 'offline':
            raise BadConfig(f"Unknown geo provider: {self.geo_provider.name}")

    def with_overrides(self, overrides: Mapping[str, Any]) -> 'HostConfig':
        """Return a copy with the given fields replaced (keys checked)."""
        return replace(self, **_coerce_fields(overrides))


def _coerce_fields(data: Mapping[str, Any]) -> Dict[str, Any]:
    known = {f.name for f in fields(HostConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise BadConfig(f"Unknown config key(s): {', '.join(unknown)}")

    values = dict(data)
    geo = values.get('geo_provider')
    if isinstance(geo, Mapping):
        try:
            values['geo_provider'] = GeoProviderConfig(**geo)
        except TypeError as e:
            raise BadConfig(f"Invalid geo_provider: {e}")
    if 'topics' in values:
        values['topics'] = list(values['topics'])
    if 'bootnodes' in values:
        values['bootnodes'] = list(values['bootnodes'])
    return values


def config_from_mapping(data: Mapping[str, Any]) -> HostConfig:
    """
    Build and validate a HostConfig from parsed file contents.

    Raises:
        BadConfig: On unknown keys or invalid values
    """
    if not isinstance(data, Mapping):
        raise BadConfig("Config root must be an object/table")
    try:
        config = HostConfig(**_coerce_fields(data))
    except TypeError as e:
        raise BadConfig(f"Invalid config: {e}")
    config.validate()
    return config


def load_host_config(path: str) -> HostConfig:
    """
    Load a host configuration from a JSON or TOML file.

    TOML is selected by the '.toml' suffix; anything else is read as JSON.

    Raises:
        BadConfig: If the file is missing, unparseable or invalid
    """
    config_path = Path(path)
    if not config_path.exists():
        raise BadConfig(f"Config file not found: {path}")

    try:
        if config_path.suffix.lower() == '.toml':
            with open(config_path, 'rb') as f:
                data = tomllib.load(f)
        else:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
    except (OSError, ValueError) as e:
        raise BadConfig(f"Cannot parse config file {path}: {e}")

    return config_from_mapping(data)


# Default configuration instance
DEFAULT_CONFIG = HostConfig()
