"""
SVG charts for analysis reports.

Every chart is drawn on its own matplotlib Figure (Agg backend, no pyplot
state) and saved as self-contained SVG with text rendered as paths, a fixed
hash salt and no date metadata, so output bytes only depend on the report.
"""

import io
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')

from matplotlib.axes import Axes  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .analyzer import AnalysisReport  # noqa: E402
from .fileutils import atomic_write_text  # noqa: E402
from .logging_utils import get_logger  # noqa: E402

logger = get_logger('charts')

SVG_RC = {
    'svg.hashsalt': 'gossipwatch',
    'svg.fonttype': 'path',
    'font.size': 8,
}
FIGSIZE = (9, 4.5)
NO_DATA = 'no data'


def short_id(peer_id: str) -> str:
    return f'…{peer_id[-6:]}'


def _no_data(ax: Axes, title: str):
    ax.set_title(title)
    ax.text(0.5, 0.5, NO_DATA, ha='center', va='center', transform=ax.transAxes, fontsize=14)
    ax.set_xticks([])
    ax.set_yticks([])


def _bar(ax: Axes, labels: Sequence[str], values: Sequence[float], title: str, ylabel: str, rotate: bool = False):
    if not labels:
        _no_data(ax, title)
        return
    positions = list(range(len(labels)))
    ax.bar(positions, values, color='#4c72b0')
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=90 if rotate else 0, fontsize=6 if rotate else 8)
    ax.set_title(title)
    ax.set_ylabel(ylabel)


def peers_per_country(fig: Figure, report: AnalysisReport):
    table = report.per_country
    _bar(fig.add_subplot(), list(table['country']), list(table['peer_count']),
         'Peers per country', 'peers', rotate=True)


def peers_per_client(fig: Figure, report: AnalysisReport):
    table = report.per_client
    _bar(fig.add_subplot(), list(table['client_family']), list(table['peer_count']),
         'Peers per client', 'peers')


def _per_peer(attribute: str, title: str, ylabel: str) -> Callable[[Figure, AnalysisReport], None]:
    def draw(fig: Figure, report: AnalysisReport):
        peers = report.per_peer
        _bar(fig.add_subplot(), [short_id(p.peer_id) for p in peers],
             [float(getattr(p, attribute)) for p in peers], title, ylabel, rotate=True)
    return draw


def client_averages(fig: Figure, report: AnalysisReport):
    columns = [
        ('avg_connections', 'Connections'),
        ('avg_disconnections', 'Disconnections'),
        ('avg_connected_time_min', 'Connected time (min)'),
        ('avg_latency_s', 'Latency (s)'),
    ]
    table = report.per_client
    for i, (column, title) in enumerate(columns, start=1):
        ax = fig.add_subplot(2, 2, i)
        _bar(ax, list(table['client_family']), [float(v) for v in table[column]], f'Mean {title.lower()}', title)


def client_messages(fig: Figure, report: AnalysisReport):
    table = report.per_client
    for i, (suffix, title) in enumerate((('total', 'Messages per client'), ('avg', 'Mean messages per peer')), start=1):
        ax = fig.add_subplot(1, 2, i)
        if table.empty:
            _no_data(ax, title)
            continue
        width = 0.8 / max(1, len(report.topics))
        families = list(table['client_family'])
        for j, topic in enumerate(report.topics):
            positions = [k + j * width for k in range(len(families))]
            ax.bar(positions, [float(v) for v in table[f'{topic}_{suffix}']], width=width, label=topic)
        ax.set_xticks([k + 0.4 - width / 2 for k in range(len(families))])
        ax.set_xticklabels(families)
        ax.set_title(title)
        ax.legend(fontsize=6)


def messages_vs_connected_time(fig: Figure, report: AnalysisReport):
    ax = fig.add_subplot()
    title = 'Messages vs connected time'
    if not report.per_peer:
        _no_data(ax, title)
        return
    ax.scatter(
        [float(p.connected_time_min) for p in report.per_peer],
        [p.total_messages for p in report.per_peer],
        s=10,
        color='#dd8452',
    )
    ax.set_title(title)
    ax.set_xlabel('connected time (min)')
    ax.set_ylabel('first-delivered messages')


CHARTS: List[Tuple[str, Callable[[Figure, AnalysisReport], None]]] = [
    ('peers_per_country.svg', peers_per_country),
    ('peers_per_client.svg', peers_per_client),
    ('connections_per_peer.svg', _per_peer('connections', 'Connections per peer', 'connections')),
    ('connected_time_per_peer.svg', _per_peer('connected_time_min', 'Connected time per peer', 'minutes')),
    ('latency_per_peer.svg', _per_peer('latency_s', 'Latency per peer', 'seconds')),
    ('client_averages.svg', client_averages),
    ('client_messages.svg', client_messages),
    ('messages_vs_connected_time.svg', messages_vs_connected_time),
]


def render_svg(draw: Callable[[Figure, AnalysisReport], None], report: AnalysisReport) -> str:
    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=FIGSIZE)
        draw(fig, report)
        fig.tight_layout()
        buffer = io.StringIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def render_charts(report: AnalysisReport, out_dir: Path) -> List[Path]:
    written = []
    for name, draw in CHARTS:
        written.append(atomic_write_text(out_dir / name, render_svg(draw, report)))
    logger.debug(f"Rendered {len(written)} charts")
    return written
