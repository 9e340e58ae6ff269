#!/usr/bin/env python
"""Flat-file artifacts of runs and analyses: CSV tables, JSON-lines event
logs and gnuplot data files"""
import csv
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from jinja2 import Template

from controller import AlphaPoint
from engine import SimResult
from metrics import RunSummary, TraceAnalysis
from records import FrameRecord, Packet, record_columns

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.csv"
FRAMES_NAME = "frames.csv"
PACKETS_NAME = "packets.csv"
ALPHA_NAME = "alpha.csv"
EVENTS_NAME = "events.jsonl"
CONFIG_NAME = "config.toml"
AGGREGATE_NAME = "aggregate.csv"

DAT_TEMPLATE = r"""# {{ columns | join(" ") }}
{% for row in rows -%}
{% for value in row %}{{ dat(value) }}{{ " " if not loop.last }}{% endfor %}
{% endfor -%}"""


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return value


def _dat(value: Any) -> str:
    if value is None:
        return "?"
    cell = _cell(value)
    return str(cell) if cell != "" else "?"


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: _cell(row.get(column)) for column in columns})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as csv_file:
        return list(csv.DictReader(csv_file))


def _attributes(record: Any, columns: Sequence[str]) -> Dict[str, Any]:
    return {column: getattr(record, column) for column in columns}


def write_frames(path: Path, frames: Iterable[FrameRecord]) -> Path:
    columns = record_columns(FrameRecord)
    return write_csv(path, columns, (_attributes(f, columns) for f in frames))


def write_packets(path: Path, packets: Iterable[Packet]) -> Path:
    columns = record_columns(Packet)
    return write_csv(path, columns, (_attributes(p, columns) for p in packets))


def write_alpha(path: Path, alpha: Iterable[AlphaPoint]) -> Path:
    return write_csv(path, AlphaPoint._fields, (point._asdict() for point in alpha))


def summary_row(
    summary: RunSummary, labels: Optional[Dict[str, Any]] = None
) -> Dict[str, Any]:
    "Labels (trace, point, seed...) go first"
    row = dict(labels or {})
    row.update(summary.as_row())
    return row


def write_summary(
    path: Path, summary: RunSummary, labels: Optional[Dict[str, Any]] = None
) -> Path:
    row = summary_row(summary, labels)
    return write_csv(path, list(row), [row])


def write_events(path: Path, events: Iterable[Dict[str, Any]]) -> Path:
    with open(path, "w", encoding="utf-8") as events_file:
        for event in events:
            events_file.write(json.dumps(event, sort_keys=True) + "\n")
    return path


def write_dat(
    path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    "Whitespace separated columns for gnuplot; missing values are '?'"
    text = Template(DAT_TEMPLATE).render(columns=columns, rows=rows, dat=_dat)
    path.write_text(text, encoding="utf-8")
    return path


def write_run(
    run_dir: Path,
    result: SimResult,
    summary: RunSummary,
    config_text: str,
    labels: Optional[Dict[str, Any]] = None,
    logger: logging.Logger = logger,
) -> Path:
    write_summary(run_dir / SUMMARY_NAME, summary, labels)
    write_frames(run_dir / FRAMES_NAME, result.frames)
    write_packets(run_dir / PACKETS_NAME, result.packets)
    write_alpha(run_dir / ALPHA_NAME, result.alpha)
    (run_dir / CONFIG_NAME).write_text(config_text, encoding="utf-8")
    if result.config.event_log:
        write_events(run_dir / EVENTS_NAME, result.events)
    logger.info("Results are written to %s", run_dir)
    return run_dir


def write_trace_analysis(
    out_dir: Path, trace_name: str, analysis: TraceAnalysis, dat: bool = False
) -> List[Path]:
    """<trace>.csv holds one row per frame instant and alpha, <trace>.dat the
    sorted samples per alpha for CDF plots"""
    out_dir.mkdir(0o750, parents=True, exist_ok=True)
    rows = []
    for alpha in analysis.alpha_grid:
        for index, value in enumerate(analysis.samples[alpha]):
            rows.append({"alpha": alpha, "frame": index, "transmission_ms": float(value)})
    written = [
        write_csv(
            out_dir / f"{trace_name}.csv", ("alpha", "frame", "transmission_ms"), rows
        )
    ]
    if dat:
        columns = ["cdf"] + [f"alpha_{alpha}" for alpha in analysis.alpha_grid]
        ordered = [sorted(analysis.samples[alpha]) for alpha in analysis.alpha_grid]
        length = max((len(values) for values in ordered), default=0)
        dat_rows = [
            [(index + 1) / length]
            + [float(values[index]) if index < len(values) else None for values in ordered]
            for index in range(length)
        ]
        written.append(write_dat(out_dir / f"{trace_name}.dat", columns, dat_rows))
    return written


def analysis_row(trace_name: str, analysis: TraceAnalysis) -> Dict[str, Any]:
    row = {
        "trace": trace_name,
        "frame_instants": analysis.frame_instants,
        "zero_capacity_frames": analysis.zero_capacity_frames,
    }  # type: Dict[str, Any]
    for alpha in analysis.alpha_grid:
        row[f"p95_alpha_{alpha}"] = analysis.p95[alpha]
    return row
