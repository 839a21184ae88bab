"""
Offline geolocation for peer addresses.

This module loads an ip/CIDR -> (country, city, isp) mapping from a CSV file
and resolves peer addresses against it. No network service is contacted.

Expected mapping format:
    ip,country,city,isp
    198.51.100.7,United States,North Bergen,Choopa LLC
    95.216.0.0/16,Finland,Helsinki,Hetzner Online GmbH
"""

import csv
import ipaddress
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple, Union

from .config import GeoProviderConfig
from .errors import GossipwatchError
from .logging_utils import get_logger
from .models import UNKNOWN
from .schema import CSVDialect, GeoSchema

logger = get_logger('geo')

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]
IPNetwork = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]

BUNDLED_MAPPING = Path(__file__).parent / 'data' / 'geo_sample.csv'


class ProviderUnavailable(GossipwatchError):
    """Raised when a geolocation provider cannot be initialized."""
    pass


@dataclass(frozen=True)
class GeoLocation:
    country: str = UNKNOWN
    city: str = UNKNOWN
    isp: str = UNKNOWN


UNRESOLVED = GeoLocation()


class GeoProvider(Protocol):
    """Anything that can resolve an address to a location."""

    def lookup(self, ip: str) -> GeoLocation:
        ...


class OfflineGeoProvider:
    """
    Geolocation backed by a local mapping file.

    Single-address rows win over network rows; among network rows the
    longest prefix wins. Private and reserved addresses only resolve
    through an explicit single-address row.
    """

    def __init__(self, file_path: Union[str, Path]):
        """
        Load the mapping file.

        Args:
            file_path: Path to the mapping CSV

        Raises:
            ProviderUnavailable: If the file is missing or malformed
        """
        self.file_path = Path(file_path)
        if not self.file_path.exists():
            raise ProviderUnavailable(f"Geo mapping file not found: {file_path}")

        self._exact: Dict[IPAddress, GeoLocation] = {}
        self._networks: List[Tuple[IPNetwork, GeoLocation]] = []

        try:
            with open(self.file_path, 'r', encoding=CSVDialect.ENCODING, newline=CSVDialect.NEWLINE) as f:
                reader = csv.DictReader(f)
                is_valid, error_message = GeoSchema.validate_headers(reader.fieldnames)
                if not is_valid:
                    raise ProviderUnavailable(error_message)
                self._parse_rows(reader)
        except ProviderUnavailable:
            raise
        except Exception as e:
            raise ProviderUnavailable(f"Failed to load geo mapping: {e}")

        # Longest prefix first
        self._networks.sort(key=lambda item: item[0].prefixlen, reverse=True)
        logger.debug(
            f"Loaded geo mapping {self.file_path.name}: "
            f"{len(self._exact)} addresses, {len(self._networks)} networks"
        )

    def _parse_rows(self, reader: csv.DictReader):
        for line_num, row_dict in enumerate(reader, start=2):  # Start at 2 (header is line 1)
            row = {GeoSchema.normalize_header(k): (v or '').strip() for k, v in row_dict.items() if k}
            raw_ip = row.get(GeoSchema.IP, '')
            if not raw_ip:
                continue

            location = GeoLocation(
                country=row.get(GeoSchema.COUNTRY) or UNKNOWN,
                city=row.get(GeoSchema.CITY) or UNKNOWN,
                isp=row.get(GeoSchema.ISP) or UNKNOWN,
            )
            try:
                if '/' in raw_ip:
                    self._networks.append((ipaddress.ip_network(raw_ip, strict=False), location))
                else:
                    self._exact[ipaddress.ip_address(raw_ip)] = location
            except ValueError as e:
                raise ProviderUnavailable(f"Error on line {line_num}: {e}")

    def lookup(self, ip: str) -> GeoLocation:
        try:
            address = ipaddress.ip_address(ip)
        except ValueError:
            return UNRESOLVED

        if address in self._exact:
            return self._exact[address]
        if address.is_private or address.is_reserved or address.is_loopback:
            return UNRESOLVED

        for network, location in self._networks:
            if address.version == network.version and address in network:
                return location
        return UNRESOLVED


def create_geo_provider(config: Optional[GeoProviderConfig] = None) -> OfflineGeoProvider:
    """
    Build the provider selected by the configuration.

    Raises:
        ProviderUnavailable: If the provider is unknown or its data is missing
    """
    config = config or GeoProviderConfig()
    if config.name != 'offline':
        raise ProviderUnavailable(f"Unknown geo provider: {config.name}")
    return OfflineGeoProvider(config.path or BUNDLED_MAPPING)


def locate_peer(provider: GeoProvider, ip: str) -> Tuple[str, str]:
    """
    Resolve an address to (country, city).

    Unresolvable addresses give ("Unknown", "Unknown").
    """
    location = provider.lookup(ip)
    return location.country, location.city
