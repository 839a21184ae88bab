"""Helpers for writing output files atomically."""

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from .errors import IoFailure
from .schema import CSVDialect


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """
    Write text to a sibling temporary file, then rename it over the target.

    Raises:
        IoFailure: If the directory is missing or not writable
    """
    target = Path(path)
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f'.{target.name}.', dir=target.parent)
    except OSError as e:
        raise IoFailure(f"Cannot write {target}: {e}")

    try:
        with os.fdopen(fd, 'w', encoding=CSVDialect.ENCODING, newline='') as f:
            f.write(text)
        os.replace(tmp_name, target)
    except OSError as e:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise IoFailure(f"Cannot write {target}: {e}")
    return target


def render_csv(headers: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Render rows with the shared dialect (header row, minimal quoting)."""
    buffer = io.StringIO()
    writer = csv.writer(
        buffer,
        delimiter=CSVDialect.DELIMITER,
        lineterminator=CSVDialect.LINETERMINATOR,
        quoting=csv.QUOTE_MINIMAL,
    )
    writer.writerow(list(headers))
    for row in rows:
        writer.writerow(list(row))
    return buffer.getvalue()


def write_csv(path: Union[str, Path], headers: List[str], rows: Iterable[Sequence[object]]) -> Path:
    return atomic_write_text(path, render_csv(headers, rows))
