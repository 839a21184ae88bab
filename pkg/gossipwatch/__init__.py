"""
gossipwatch - monitoring crawler and analyzer for GossipSub networks.

The crawler discovers peers through a discv5-style peerstore, connects to
as many as it can, and records connection events, client identity,
latency, location and first-delivered messages. The analyzer turns the
exported snapshots into tables and charts; the simulated network provides
a deterministic stand-in for the real one, with ground truth to check
against.
"""

__version__ = '0.3.0'
__author__ = 'Gossipwatch Team'

from .analyzer import AnalysisReport, DedupPolicy, aggregate
from .config import HostConfig, load_host_config
from .crawler import CrawlerHost, init_host
from .metrics import MetricsStore, read_snapshot, write_snapshot
from .simnet import Scenario, load_scenario, run_scenario

__all__ = [
    'AnalysisReport',
    'DedupPolicy',
    'aggregate',
    'HostConfig',
    'load_host_config',
    'CrawlerHost',
    'init_host',
    'MetricsStore',
    'read_snapshot',
    'write_snapshot',
    'Scenario',
    'load_scenario',
    'run_scenario',
]
