"""
Report writer for analysis results.

Renders the AnalysisReport tables as CSV (shared dialect, six-digit
decimals) and hands the charts to the charts module. Rendering is a pure
function of the report, so the same report always produces byte-identical
files.
"""

from decimal import Decimal
from pathlib import Path
from typing import Dict, List, Sequence, Union

import pandas as pd

from .analyzer import AnalysisReport
from .charts import render_charts
from .errors import IoFailure
from .fileutils import atomic_write_text, render_csv
from .logging_utils import get_logger, log_success
from .metrics import format_latency
from .schema import ReportSchema

logger = get_logger('report')

INTEGER_COLUMNS = {'peer_count', 'version_count'}


def format_decimal(value: Union[Decimal, float]) -> str:
    return format(value, '.6f')


def per_peer_rows(report: AnalysisReport) -> List[List[str]]:
    rows = []
    for peer in report.per_peer:
        row = [
            peer.peer_id,
            peer.client_family.value,
            peer.client_version,
            peer.country,
            peer.city,
            peer.isp,
            peer.ip,
            format_latency(peer.latency_s),
            str(peer.connections),
            str(peer.disconnections),
            format_decimal(peer.connected_time_min),
        ]
        row.extend(str(peer.counters.get(topic, 0)) for topic in report.topics)
        row.append(str(peer.total_messages))
        rows.append(row)
    return rows


def _table_rows(table: pd.DataFrame, headers: Sequence[str]) -> List[List[str]]:
    rows = []
    for record in table.to_dict(orient='records'):
        row = []
        for column in headers:
            value = record[column]
            if column in INTEGER_COLUMNS or column.endswith('_total'):
                row.append(str(int(value)))
            elif isinstance(value, float):
                row.append(format_decimal(value))
            else:
                row.append(str(value))
        rows.append(row)
    return rows


def render_tables(report: AnalysisReport) -> Dict[str, str]:
    """CSV text of every table, keyed by file name."""
    client_headers = ReportSchema.per_client_headers(report.topics)
    return {
        ReportSchema.PER_PEER_FILE: render_csv(
            ReportSchema.per_peer_headers(report.topics), per_peer_rows(report)
        ),
        ReportSchema.PER_CLIENT_FILE: render_csv(
            client_headers, _table_rows(report.per_client, client_headers)
        ),
        ReportSchema.PER_COUNTRY_FILE: render_csv(
            ReportSchema.PER_COUNTRY_HEADERS,
            _table_rows(report.per_country, ReportSchema.PER_COUNTRY_HEADERS),
        ),
        ReportSchema.SUMMARY_FILE: render_csv(ReportSchema.SUMMARY_HEADERS, report.summary),
        ReportSchema.FLAGS_FILE: render_csv(ReportSchema.FLAGS_HEADERS, report.flags),
        ReportSchema.CLIENT_VERSIONS_FILE: render_csv(
            ReportSchema.CLIENT_VERSIONS_HEADERS,
            [(family.value, count) for family, count in report.versions.items()],
        ),
    }


def emit_report(report: AnalysisReport, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write the CSV tables and SVG charts into out_dir.

    Raises:
        IoFailure: If out_dir cannot be created or written
    """
    target = Path(out_dir)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"Cannot create report directory {target}: {e}")

    written = []
    for name, text in render_tables(report).items():
        written.append(atomic_write_text(target / name, text))
    written.extend(render_charts(report, target))

    log_success(f"Report written: {len(written)} files in {target}", logger)
    return written


def format_summary_lines(report: AnalysisReport) -> List[str]:
    """Stable key=value lines for standard output."""
    lines = [f'{key}={value}' for key, value in report.summary]
    for family, count in report.versions.items():
        lines.append(f'version_count_{family.value}={count}')
    for peer_id, flag in report.flags:
        lines.append(f'flag={peer_id}:{flag}')
    return lines
