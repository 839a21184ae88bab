"""
Base exception types shared across gossipwatch modules.

Each module defines its own specific errors; they all derive from
GossipwatchError so the CLI can catch the family in one place.
"""


class GossipwatchError(Exception):
    """Base class for all gossipwatch errors."""
    pass


class IoFailure(GossipwatchError):
    """Raised when a snapshot, dump or report file cannot be written or read."""
    pass
