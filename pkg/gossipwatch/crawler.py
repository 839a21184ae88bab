"""
Monitoring host.

The crawler host claims the genesis state, joins the configured gossip
topics, discovers peers through the peerstore and tries to connect to every
one of them. For each peer it records connection events, classifies the
client from its user agent, samples latency and geolocates the address;
the router credits first deliveries to per-topic counters. Snapshots of
the metrics store are exported on a timer.

All services run as callbacks on a virtual-clock Scheduler and mutate the
metrics store only from that single loop.
"""

import random
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Deque, Dict, List, Optional, Set, Tuple, Union

from .backoff import BackoffConfig, BackoffTable
from .config import BadConfig, HostConfig
from .discovery import DiscoveryService, Peerstore, bootstrap, dump_peerstore
from .errors import GossipwatchError, IoFailure
from .geo import GeoProvider, create_geo_provider
from .gossip import GossipMessage, GossipParams, Router, write_delivery_log
from .identity import (
    Keypair,
    NodeRecord,
    RecordDecodeError,
    generate_identity,
    parse_record_text,
    record_multiaddr,
)
from .logging_utils import get_logger, log_error, log_section, log_step, log_success
from .metrics import MetricsStore, write_snapshot
from .models import ClientFamily, EventKind, PeerInfo, StatusMessage, quantize_latency
from .scheduler import EventHandle, Scheduler
from .schema import ReportSchema
from .transport import (
    DialOutcome,
    DialResult,
    HandshakeTimeout,
    PingTimeout,
    Transport,
)

logger = get_logger('crawler')

LATENCY_ALPHA = Decimal('0.3')


class NetworkMismatch(GossipwatchError):
    """Raised when a remote's status names a different network."""
    pass


_KNOWN_FAMILIES = {
    family.value.lower(): family
    for family in ClientFamily.ordered()
    if family != ClientFamily.UNKNOWN
}


def classify_client(user_agent: Optional[str]) -> Tuple[ClientFamily, str]:
    """
    Classify a user agent into (client family, version).

    The family is a case-insensitive match of the first '/'-separated
    token; the version is the second token. Absent or unrecognized agents
    give (Unknown, "").

    Examples:
        >>> classify_client('Lighthouse/v1.0.1-5a3b94cb/x86_64-linux')
        (<ClientFamily.LIGHTHOUSE: 'Lighthouse'>, 'v1.0.1-5a3b94cb')
    """
    if not user_agent:
        return ClientFamily.UNKNOWN, ''
    tokens = user_agent.strip().split('/')
    family = _KNOWN_FAMILIES.get(tokens[0].strip().lower())
    if family is None:
        return ClientFamily.UNKNOWN, ''
    version = tokens[1].strip() if len(tokens) > 1 else ''
    return family, version


@dataclass
class Session:
    """One transport session with a peer, as seen by the host."""
    session_id: int
    peer_id: str
    opened_ms: int
    closed_ms: Optional[int] = None
    ping_handle: Optional[EventHandle] = None


@dataclass
class DialAttempt:
    peer_id: str
    started_ms: int
    outcome: DialOutcome
    finished_ms: int


@dataclass
class CrawlerHost:
    """
    Running crawler host.

    Attributes:
        config: Host configuration
        keypair: Host identity key
        record: Host node record
        status: Status sent at every handshake (genesis claim)
        transport: Network the host is bound to
        scheduler: Virtual clock driving every service
        router: Gossip router
        peerstore: Discovered node records
        metrics: Per-peer metrics store
        discovery: Lookup service feeding the dial queue
        output_dir: Where snapshots and final dumps go (None disables exports)
    """
    config: HostConfig
    keypair: Keypair
    record: NodeRecord
    status: StatusMessage
    transport: Transport
    scheduler: Scheduler
    geo: GeoProvider
    router: Router
    peerstore: Peerstore
    metrics: MetricsStore
    discovery: DiscoveryService
    backoff: BackoffTable
    output_dir: Optional[Path] = None

    records: Dict[str, NodeRecord] = field(default_factory=dict)
    sessions: Dict[int, Session] = field(default_factory=dict)
    open_sessions: Dict[str, int] = field(default_factory=dict)
    dial_queue: Deque[str] = field(default_factory=deque)
    queued: Set[str] = field(default_factory=set)
    in_flight: Set[str] = field(default_factory=set)
    dial_log: List[DialAttempt] = field(default_factory=list)
    exported: List[Path] = field(default_factory=list)
    stopped: bool = False

    _timers: Dict[str, EventHandle] = field(default_factory=dict)
    latency_sampled: Set[str] = field(default_factory=set)

    @property
    def peer_id(self) -> str:
        return self.record.peer_id

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        self.discovery.start()
        self._timers['dial'] = self.scheduler.schedule_after(0, self._connect_all_tick)
        self._timers['heartbeat'] = self.scheduler.schedule_after(
            self.router.params.heartbeat_ms, self._heartbeat_tick
        )
        if self.output_dir is not None:
            self._timers['export'] = self.scheduler.schedule_after(
                self.config.export_interval_s * 1000, self._export_tick
            )

    def run_for(self, duration_ms: float) -> int:
        """Advance virtual time, running every service, for duration_ms."""
        return self.scheduler.run_until(self.scheduler.now + duration_ms)

    def stop(self, flush: bool = True):
        """
        Stop all services. In-flight dials still complete; their sessions
        are closed right away. With flush, write the final snapshot,
        peerstore dump and delivery log.
        """
        if self.stopped:
            return
        self.stopped = True
        self.discovery.stop()
        for handle in self._timers.values():
            self.scheduler.cancel(handle)
        self._timers.clear()
        for session in self.sessions.values():
            self.scheduler.cancel(session.ping_handle)
        if flush:
            self.flush()
        log_success(f"Crawler stopped: {len(self.open_sessions)} sessions open, "
                    f"{len(self.peerstore)} peers known", logger)

    def flush(self):
        if self.output_dir is None:
            return
        self.export_snapshot()
        try:
            dump_peerstore(self.peerstore, self.output_dir / ReportSchema.PEERSTORE_DUMP_FILE)
            write_delivery_log(self.router, self.output_dir / ReportSchema.DELIVERY_LOG_FILE)
        except IoFailure as e:
            log_error(f"Final flush failed: {e}", logger)

    # -- connect-all -------------------------------------------------------

    def _admit_candidates(self):
        for node_id in self.discovery.drain():
            entry = self.peerstore.get(node_id)
            if entry is None:
                continue
            record = entry.record
            peer_id = record.peer_id
            self.records[peer_id] = record
            location = self.geo.lookup(record.ip)
            self.metrics.upsert_info(PeerInfo(
                peer_id=peer_id,
                node_id=record.node_id.hex(),
                pubkey=record.pubkey.hex(),
                multiaddr=record_multiaddr(record),
                ip=record.ip,
                country=location.country,
                city=location.city,
                isp=location.isp,
            ))
            self._enqueue(peer_id)

    def _enqueue(self, peer_id: str):
        if peer_id in self.queued or peer_id in self.in_flight or peer_id in self.open_sessions:
            return
        self.queued.add(peer_id)
        self.dial_queue.append(peer_id)

    def _connect_all_tick(self):
        if self.stopped:
            return
        now = self.scheduler.now_ms
        self._admit_candidates()

        for peer_id, _ in sorted(self.backoff.due(now).items(), key=lambda item: (item[1], item[0])):
            self.backoff.clear_retry(peer_id)
            self._enqueue(peer_id)

        while self.dial_queue and len(self.in_flight) < self.config.max_outbound_dials_in_flight:
            peer_id = self.dial_queue.popleft()
            self.queued.discard(peer_id)
            self._dial(peer_id)

        self._timers['dial'] = self.scheduler.schedule_after(self.config.dial_tick_ms, self._connect_all_tick)

    def _dial(self, peer_id: str):
        entry = self.peerstore.get(self.records[peer_id].node_id)
        record = entry.record if entry else self.records[peer_id]
        started = self.scheduler.now_ms
        result = self.transport.dial(record, self.config.dial_timeout_ms)
        self.in_flight.add(peer_id)
        self.scheduler.schedule_after(result.elapsed_ms, self._dial_finished, peer_id, result, started)

    def _dial_finished(self, peer_id: str, result: DialResult, started_ms: int):
        self.in_flight.discard(peer_id)
        now = self.scheduler.now_ms
        outcome = result.outcome

        if outcome == DialOutcome.CONNECTED:
            if self.stopped:
                self.transport.close(result.session_id)
                return
            try:
                partial = status_handshake(self, peer_id, result.session_id)
                self.metrics.update_info(
                    peer_id,
                    client_family=partial.client_family,
                    client_version=partial.client_version,
                )
                self.transport.open_streams(result.session_id, list(self.config.topics))
            except (NetworkMismatch, HandshakeTimeout) as e:
                logger.debug(f"Handshake with {peer_id} failed: {e}")
                self.transport.close(result.session_id)
                outcome = DialOutcome.HANDSHAKE_FAILED

        self.dial_log.append(DialAttempt(peer_id, started_ms, outcome, now))
        if outcome == DialOutcome.CONNECTED:
            self.backoff.reset(peer_id)
        elif not self.stopped:
            self.backoff.record_failure(peer_id, now)

    def last_outcome(self, peer_id: str) -> Optional[DialOutcome]:
        for attempt in reversed(self.dial_log):
            if attempt.peer_id == peer_id:
                return attempt.outcome
        return None

    def connected_peers(self) -> List[str]:
        return sorted(self.open_sessions)

    # -- transport listener ------------------------------------------------

    def connected(self, peer_id: str, session_id: int):
        now = self.scheduler.now_ms
        self.metrics.record_event(peer_id, EventKind.CONNECT, now)
        if session_id in self.sessions:
            return

        session = Session(session_id=session_id, peer_id=peer_id, opened_ms=now)
        self.sessions[session_id] = session
        self.open_sessions[peer_id] = session_id
        self.router.add_peer(peer_id, self.config.topics)
        session.ping_handle = self.scheduler.schedule_after(0, self._ping_tick, session_id)
        logger.debug(f"Connected to {peer_id} (session {session_id})")

    def disconnected(self, peer_id: str, session_id: int):
        session = self.sessions.get(session_id)
        if session is None:
            logger.debug(f"Ignoring disconnect for unknown session {session_id}")
            return

        now = self.scheduler.now_ms
        self.metrics.record_event(peer_id, EventKind.DISCONNECT, now)
        if session.closed_ms is not None:
            return

        session.closed_ms = now
        self.scheduler.cancel(session.ping_handle)
        if self.open_sessions.get(peer_id) == session_id:
            del self.open_sessions[peer_id]
        self.router.remove_peer(peer_id)
        if not self.stopped:
            self.backoff.schedule_retry(peer_id, now + self.backoff.config.base_delay_ms)
        logger.debug(f"Disconnected from {peer_id} (session {session_id})")

    def message_received(self, peer_id: str, session_id: int, message: GossipMessage):
        if self.open_sessions.get(peer_id) != session_id:
            return
        self.router.handle_full_message(peer_id, message, self.scheduler.now)
        self._flush_outbox()

    def _on_first_delivery(self, peer_id: str, topic: str):
        self.metrics.increment_counter(peer_id, topic)

    # -- gossip ------------------------------------------------------------

    def _flush_outbox(self):
        for frame in self.router.drain_outbox():
            session_id = self.open_sessions.get(frame.peer_id)
            if session_id is not None:
                self.transport.send(session_id, frame)

    def _heartbeat_tick(self):
        if self.stopped:
            return
        self.router.heartbeat(self.scheduler.now)
        self._flush_outbox()
        self._timers['heartbeat'] = self.scheduler.schedule_after(
            self.router.params.heartbeat_ms, self._heartbeat_tick
        )

    def publish(self, topic: str, payload: bytes) -> GossipMessage:
        message = self.router.publish(topic, payload, self.scheduler.now)
        self._flush_outbox()
        return message

    # -- latency -----------------------------------------------------------

    def _ping_tick(self, session_id: int):
        session = self.sessions.get(session_id)
        if session is None or session.closed_ms is not None or self.stopped:
            return
        measure_latency(self, session.peer_id)
        session.ping_handle = self.scheduler.schedule_after(
            self.config.ping_interval_s * 1000, self._ping_tick, session_id
        )

    # -- export ------------------------------------------------------------

    def export_snapshot(self, now_ms: Optional[int] = None) -> Optional[Path]:
        """
        Write `<output_dir>/snapshot-<unix_ms>.json`.

        IoFailure is logged; the next interval tries again.
        """
        if self.output_dir is None:
            return None
        now_ms = self.scheduler.now_ms if now_ms is None else now_ms
        path = self.output_dir / f"snapshot-{now_ms}.json"
        try:
            write_snapshot(self.metrics, path, now_ms)
        except IoFailure as e:
            log_error(f"Snapshot export failed: {e}", logger)
            return None
        self.exported.append(path)
        logger.info(f"Snapshot exported: {path.name} ({len(self.metrics)} peers)")
        return path

    def _export_tick(self):
        if self.stopped:
            return
        self.export_snapshot()
        self._timers['export'] = self.scheduler.schedule_after(
            self.config.export_interval_s * 1000, self._export_tick
        )


def status_handshake(host: CrawlerHost, peer_id: str, session_id: int) -> PeerInfo:
    """
    Exchange status messages over an established session.

    The host always sends its genesis status. The remote's user agent is
    classified into the returned partial PeerInfo.

    Raises:
        NetworkMismatch: If the remote is on another network
        HandshakeTimeout: If the remote does not answer
    """
    if not host.status.is_genesis:
        raise ValueError("Crawler status must claim the genesis state")
    reply = host.transport.exchange_status(
        session_id, host.status, host.config.user_agent, host.config.handshake_timeout_ms
    )
    if reply.status.network_id != host.status.network_id:
        raise NetworkMismatch(
            f"Peer {peer_id} is on network {reply.status.network_id!r}, "
            f"expected {host.status.network_id!r}"
        )
    family, version = classify_client(reply.user_agent)
    return PeerInfo(peer_id=peer_id, client_family=family, client_version=version)


def measure_latency(host: CrawlerHost, peer_id: str) -> Optional[Decimal]:
    """
    Ping a connected peer and fold the RTT (seconds) into its latency.

    The first sample is stored as is; later samples are averaged with an
    exponential weight of 0.3. A ping timeout keeps the previous value.

    Returns:
        The peer's latency after this measurement, None when not connected
    """
    session_id = host.open_sessions.get(peer_id)
    if session_id is None:
        return None

    current = host.metrics.peer(peer_id).info.latency_s
    try:
        rtt_ms = host.transport.ping(session_id, host.config.ping_timeout_ms)
    except PingTimeout:
        logger.debug(f"Ping to {peer_id} timed out, keeping {current}")
        return current

    sample = Decimal(str(rtt_ms)) / 1000
    if peer_id in host.latency_sampled:
        value = current + LATENCY_ALPHA * (sample - current)
    else:
        value = sample
        host.latency_sampled.add(peer_id)
    value = quantize_latency(value)
    host.metrics.update_info(peer_id, latency_s=value)
    return value


def load_bootnodes(texts: List[str]) -> List[NodeRecord]:
    """
    Parse bootnode records given in text form.

    Raises:
        BadConfig: If a record cannot be parsed
    """
    records = []
    for text in texts:
        try:
            records.append(parse_record_text(text))
        except RecordDecodeError as e:
            raise BadConfig(f"Invalid bootnode record: {e}")
    return records


def init_host(
    config: HostConfig,
    seed: bytes,
    transport: Transport,
    scheduler: Optional[Scheduler] = None,
    geo: Optional[GeoProvider] = None,
    bootnodes: Optional[List[NodeRecord]] = None,
    output_dir: Optional[Union[str, Path]] = None,
    gossip_params: Optional[GossipParams] = None,
    backoff_config: Optional[BackoffConfig] = None,
) -> CrawlerHost:
    """
    Set up and start a crawler host.

    Generates the identity, binds the transport, subscribes to the
    configured topics, bootstraps the peerstore and starts the discovery,
    connect-all, heartbeat and export services.

    Raises:
        BadConfig: If the configuration is invalid
        BindFailure: If the transport endpoint is taken
    """
    log_section("CRAWLER HOST", logger)
    config.validate()
    scheduler = scheduler or Scheduler()
    geo = geo or create_geo_provider(config.geo_provider)
    rng = random.Random(seed)

    log_step("Generating identity", logger)
    keypair, record = generate_identity(
        seed, config.listen_ip, config.tcp_port, config.udp_port, config.network_id
    )
    status = StatusMessage.genesis(record.network_id)
    logger.info(f"Host peer id: {record.peer_id}")

    out_path = None
    if output_dir is not None:
        out_path = Path(output_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    peerstore = Peerstore(record.node_id)
    metrics = MetricsStore(config.topics, host_node_id=record.node_id.hex(), network_id=config.network_id)
    discovery = DiscoveryService(
        peerstore,
        transport,
        scheduler,
        interval_ms=config.discovery_interval_ms,
        alpha=config.lookup_alpha,
        timeout_ms=config.lookup_timeout_ms,
        rng=random.Random(rng.getrandbits(64)),
    )
    router = Router(record.peer_id, gossip_params, rng=random.Random(rng.getrandbits(64)))

    host = CrawlerHost(
        config=config,
        keypair=keypair,
        record=record,
        status=status,
        transport=transport,
        scheduler=scheduler,
        geo=geo,
        router=router,
        peerstore=peerstore,
        metrics=metrics,
        discovery=discovery,
        backoff=BackoffTable(backoff_config),
        output_dir=out_path,
    )
    router.on_first_delivery = host._on_first_delivery

    log_step(f"Binding {config.listen_ip}:{config.tcp_port}/{config.udp_port}", logger)
    transport.bind(record, host)

    for topic in config.topics:
        router.subscribe(topic)
    log_step(f"Subscribed to {len(config.topics)} topics", logger)

    all_bootnodes = load_bootnodes(config.bootnodes) + list(bootnodes or [])
    admitted = bootstrap(peerstore, all_bootnodes, scheduler.now_ms)
    log_step(f"Bootstrapped with {admitted} bootnodes", logger)

    host.start()
    log_success("Discovery and connect-all services started", logger)
    return host
