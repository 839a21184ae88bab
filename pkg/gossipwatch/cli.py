"""
Command-line interface for gossipwatch.

Subcommands wire the modules together: crawl runs a crawler host, analyze
turns a snapshot into a report, simulate runs a scenario and writes the
crawler's snapshot plus the ground truth, and verify checks one against the
other. Logs go to stderr; stdout carries stable key=value lines.
"""

import argparse
import hashlib
import signal
import sys
from pathlib import Path
from typing import List, Optional

from .analyzer import DedupPolicy, aggregate
from .config import BadConfig, load_host_config
from .crawler import init_host
from .errors import GossipwatchError, IoFailure
from .logging_utils import get_logger, log_error, log_section, log_success, setup_logging
from .metrics import SchemaViolation, read_snapshot, write_snapshot
from .oracle import DEFAULT_TOLERANCE_MS, verify_counters, verify_durations
from .report import emit_report, format_summary_lines
from .simnet import (
    ScenarioInvalid,
    build_simulation,
    load_scenario,
    read_ground_truth,
    run_scenario,
    write_ground_truth,
)
from .transport import BindFailure, LiveTransport, Unsupported

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_BIND = 3

SNAPSHOT_FILE = 'snapshot.json'
TRUTH_FILE = 'truth.json'
DEFAULT_SCENARIO = 'basic_50'


def create_parser() -> argparse.ArgumentParser:
    """
    Create and configure the argument parser.

    Returns:
        Configured ArgumentParser
    """
    parser = argparse.ArgumentParser(
        prog='gossipwatch',
        description='Crawl, simulate and analyze GossipSub networks',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Crawl the bundled simulated network for 10 virtual minutes
  python -m gossipwatch crawl --config host.toml --out run/ --duration 600

  # Analyze a snapshot
  python -m gossipwatch analyze --input run/snapshot-1606824623000.json --out report/

  # Simulate a scenario and check the crawler against the ground truth
  python -m gossipwatch simulate --scenario basic_50 --seed 7 --out sim/
  python -m gossipwatch verify --snapshot sim/snapshot.json --truth sim/truth.json

Log verbosity: GOSSIPWATCH_LOG=error|info|debug, or --verbose.
        """
    )
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    crawl_parser = subparsers.add_parser('crawl', help='Run a crawler host and export snapshots')
    crawl_parser.add_argument('--config', required=True, metavar='PATH', help='Host config (JSON or TOML)')
    crawl_parser.add_argument('--out', required=True, metavar='DIR', help='Directory for snapshots and dumps')
    crawl_parser.add_argument('--duration', type=float, metavar='SECONDS',
                              help='Stop after this many (virtual) seconds')
    crawl_parser.add_argument('--transport', choices=['sim', 'live'], default='sim',
                              help='Network to crawl (default: sim)')
    crawl_parser.add_argument('--scenario', default=DEFAULT_SCENARIO, metavar='NAME|PATH',
                              help=f'Simulated network to crawl (default: {DEFAULT_SCENARIO})')
    crawl_parser.add_argument('--seed', type=int, metavar='N', help='Override the scenario seed')

    analyze_parser = subparsers.add_parser('analyze', help='Build CSV tables and SVG charts from a snapshot')
    analyze_parser.add_argument('--input', required=True, metavar='PATH', help='Snapshot JSON file')
    analyze_parser.add_argument('--out', required=True, metavar='DIR', help='Report directory')
    analyze_parser.add_argument('--window-ms', type=int, default=500, metavar='MS',
                                help='Event dedup window (default: 500)')
    analyze_parser.add_argument('--top-k', type=int, default=10, metavar='K',
                                help='Peers in the top-k share (default: 10)')

    simulate_parser = subparsers.add_parser('simulate', help='Run a scenario and write snapshot and ground truth')
    simulate_parser.add_argument('--scenario', required=True, metavar='NAME|PATH', help='Scenario file or bundled name')
    simulate_parser.add_argument('--out', required=True, metavar='DIR', help='Output directory')
    simulate_parser.add_argument('--seed', type=int, metavar='N', help='Override the scenario seed')

    verify_parser = subparsers.add_parser('verify', help='Check a simulated snapshot against its ground truth')
    verify_parser.add_argument('--snapshot', required=True, metavar='PATH')
    verify_parser.add_argument('--truth', required=True, metavar='PATH')
    verify_parser.add_argument('--tolerance-ms', type=int, default=DEFAULT_TOLERANCE_MS, metavar='MS',
                               help=f'Allowed session boundary error (default: {DEFAULT_TOLERANCE_MS})')

    for sub in (crawl_parser, analyze_parser, simulate_parser, verify_parser):
        sub.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging (debug level)')

    return parser


def emit(lines: List[str]):
    for line in lines:
        print(line)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_crawl(args: argparse.Namespace) -> int:
    logger = get_logger('cli')

    try:
        config = load_host_config(args.config)
    except BadConfig as e:
        log_error(f"Configuration error: {e}", logger)
        return EXIT_BAD_INPUT

    out_dir = Path(args.out)

    if args.transport == 'live':
        try:
            host = init_host(config, seed=hashlib.sha256(str(args.seed or 0).encode()).digest(),
                             transport=LiveTransport(), output_dir=out_dir)
        except Unsupported as e:
            log_error(f"Live transport unavailable: {e}", logger)
            return EXIT_FAILED
        except BindFailure as e:
            log_error(f"Cannot bind: {e}", logger)
            return EXIT_BIND
        log_error("Live transport bound, but live crawling is not implemented; use --transport sim", logger)
        host.stop(flush=False)
        return EXIT_FAILED

    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
        simulation = build_simulation(scenario, config, output_dir=out_dir)
    except (BadConfig, ScenarioInvalid) as e:
        log_error(f"Invalid input: {e}", logger)
        return EXIT_BAD_INPUT
    except BindFailure as e:
        log_error(f"Cannot bind: {e}", logger)
        return EXIT_BIND

    duration_ms = int(args.duration * 1000) if args.duration is not None else scenario.duration_ms
    log_section(f"Crawling '{scenario.name}' for {duration_ms / 1000:.0f} virtual seconds", logger)
    previous = signal.signal(signal.SIGTERM, signal.default_int_handler)
    try:
        simulation.run(duration_ms)
    except KeyboardInterrupt:
        logger.warning("Interrupted, flushing final snapshot")
    finally:
        signal.signal(signal.SIGTERM, previous if previous is not None else signal.SIG_DFL)
    snapshot, _ = simulation.finish(flush=True)

    host = simulation.host
    emit([
        f'snapshots={len(host.exported)}',
        f'peers={len(snapshot.peers)}',
        f'connected={len(host.open_sessions)}',
        f'out={out_dir}',
    ])
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    logger = get_logger('cli')

    try:
        policy = DedupPolicy(window_ms=args.window_ms)
        if args.top_k < 1:
            raise ValueError(f"--top-k must be >= 1, got {args.top_k}")
    except ValueError as e:
        log_error(str(e), logger)
        return EXIT_BAD_INPUT

    try:
        snapshot = read_snapshot(args.input)
    except (SchemaViolation, IoFailure) as e:
        log_error(f"Cannot load snapshot: {e}", logger)
        return EXIT_BAD_INPUT

    report = aggregate(snapshot, policy, top_k=args.top_k)
    try:
        emit_report(report, args.out)
    except IoFailure as e:
        log_error(f"Report failed: {e}", logger)
        return EXIT_FAILED

    emit(format_summary_lines(report))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    logger = get_logger('cli')

    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
    except ScenarioInvalid as e:
        log_error(f"Invalid scenario: {e}", logger)
        return EXIT_BAD_INPUT

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot, truth = run_scenario(scenario)
        snapshot_path = out_dir / SNAPSHOT_FILE
        truth_path = out_dir / TRUTH_FILE
        write_snapshot(snapshot, snapshot_path)
        write_ground_truth(truth, truth_path)
    except (BadConfig, ScenarioInvalid) as e:
        log_error(f"Invalid scenario: {e}", logger)
        return EXIT_BAD_INPUT
    except (IoFailure, OSError) as e:
        log_error(f"Cannot write results: {e}", logger)
        return EXIT_FAILED

    log_success(f"Simulation results in {out_dir}", logger)
    emit([
        f'snapshot_sha256={sha256_file(snapshot_path)}',
        f'truth_sha256={sha256_file(truth_path)}',
        f'peers={len(snapshot.peers)}',
        f'publishes={len(truth.publish_log)}',
    ])
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    logger = get_logger('cli')

    try:
        snapshot = read_snapshot(args.snapshot)
        truth = read_ground_truth(args.truth)
    except (SchemaViolation, IoFailure) as e:
        log_error(f"Cannot load inputs: {e}", logger)
        return EXIT_BAD_INPUT

    counters = verify_counters(snapshot, truth)
    durations = verify_durations(snapshot, truth, tolerance_ms=args.tolerance_ms)
    emit(counters.lines() + durations.lines())

    if counters.ok and durations.ok:
        log_success("Snapshot matches the ground truth", logger)
        return EXIT_OK
    log_error("Snapshot does not match the ground truth", logger)
    return EXIT_FAILED


COMMANDS = {
    'crawl': cmd_crawl,
    'analyze': cmd_analyze,
    'simulate': cmd_simulate,
    'verify': cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Args:
        argv: Command-line arguments (defaults to sys.argv)

    Returns:
        Exit code
    """
    parser = create_parser()
    args = parser.parse_args(argv)

    setup_logging(verbose=getattr(args, 'verbose', False))
    logger = get_logger('cli')

    if not args.command:
        parser.print_help()
        return EXIT_FAILED

    try:
        return COMMANDS[args.command](args)
    except GossipwatchError as e:
        log_error(f"{args.command} failed: {e}", logger)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
