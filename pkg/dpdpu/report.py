"""
Report: self-describing CSV output for scenarios.

A report starts with ``#`` metadata lines (tool version, scenario, profile,
seed, defaults hash, parameters) followed by a plain CSV table. Nothing in it
depends on wall-clock time, so identical runs give identical bytes.
"""

import csv
import io
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

from . import __version__

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


@dataclass
class Report:
    scenario: str
    columns: List[str]
    profile: str
    seed: int
    defaults_digest: str
    params: Dict[str, Any] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add_row(self, **values: Any) -> None:
        unknown = set(values) - set(self.columns)
        if unknown:
            raise ValueError(f"unknown report columns: {', '.join(sorted(unknown))}")
        self.rows.append(values)

    def metadata(self) -> List[Tuple[str, str]]:
        params = ";".join(f"{k}={format_value(v)}" for k, v in sorted(self.params.items()))
        return [
            ("tool", f"dpdpu {__version__}"),
            ("scenario", self.scenario),
            ("profile", self.profile),
            ("seed", str(self.seed)),
            ("defaults_sha256", self.defaults_digest),
            ("params", params),
        ]

    def render(self) -> str:
        buf = io.StringIO()
        for key, value in self.metadata():
            buf.write(f"# {key}={value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([format_value(row.get(col)) for col in self.columns])
        return buf.getvalue()

    def write(self, out: Optional[str] = None) -> None:
        """Write to the file out, or to stdout."""
        text = self.render()
        if out is None:
            sys.stdout.write(text)
            return
        try:
            with open(out, "w", newline="") as f:
                f.write(text)
        except OSError as e:
            logger.error("Error writing report: %s", str(e))
            raise RuntimeError(f"Failed to write report: {str(e)}") from e
        logger.info("Report written to %s", out)


def parse_report(text: str) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Split rendered report text into its metadata and its rows."""
    meta: Dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        elif line:
            body.append(line)
    rows = list(csv.DictReader(body))
    return meta, rows


def rows_by(rows: List[Mapping[str, str]], *keys: str) -> Dict[Tuple[str, ...], Mapping[str, str]]:
    return {tuple(row[k] for k in keys): row for row in rows}
