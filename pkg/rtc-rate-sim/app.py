#!/usr/bin/env python3

import glob
import json
import logging
import sys
from pathlib import Path
from traceback import format_exc
from typing import List, Optional, Tuple

import click
import numpy as np

from app_config import ConfigException, build_link, load_config
from args_helper import parse_sweep, to_floats
from context_helper import LOG_FORMAT
from encoder import EncoderConfig, step_response
from experiment import (
    CompareException,
    ExperimentException,
    ExperimentPlan,
    compare,
    run_experiment,
)
from link import PRESETS, LinkKind, LinkModel, TraceException, load_trace, write_trace
from metrics import DEFAULT_ALPHA_GRID, MetricsException, ideal_transmission_analysis
from results import analysis_row, write_csv, write_trace_analysis

logger = logging.getLogger(__name__)

# The experiment tree, one directory per trace and sweep point:
# out/
# ├── aggregate.csv
# └── <trace-stem>
#     └── <point-name>
#         ├── summary.csv, frames.csv, packets.csv, alpha.csv
#         ├── config.toml
#         ├── run.log
#         ├── events.jsonl (with EVENT_LOG)
#         └── finished or error.txt


def expand_traces(patterns: Tuple[str, ...]) -> List[Path]:
    """Globs are expanded and sorted; a plain path is kept even if it does not
    exist, its run fails on its own"""
    traces = []  # type: List[Path]
    for pattern in patterns:
        if any(char in pattern for char in "*?["):
            matched = sorted(glob.glob(pattern))
            if not matched:
                raise click.BadParameter(f"nothing matches {pattern}", param_hint="--trace")
            traces.extend(Path(path) for path in matched)
        else:
            traces.append(Path(pattern))
    return traces


def fail(message: str, code: int = 2) -> None:
    click.echo(message, err=True)
    sys.exit(code)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log DEBUG messages")
@click.pass_context
def cli(ctx: click.Context, verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    ctx.obj = {"level": level}


@cli.command("run")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML configuration")
@click.option("--trace", "traces", multiple=True, help="Mahimahi trace path or glob, repeatable")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--sweep", "sweeps", multiple=True, help="key=v1,v2,... e.g. controller.P_ms=20,33,66")
@click.option("--ablation", "ablations", multiple=True, help="Ablation mode, repeatable")
@click.option("--jobs", type=int, default=None, help="Parallel runs")
@click.option("--event-log", is_flag=True, default=False, help="Write events.jsonl")
@click.pass_context
def run_command(
    ctx: click.Context,
    config_path: Optional[str],
    traces: Tuple[str, ...],
    out_dir: str,
    seed: Optional[int],
    sweeps: Tuple[str, ...],
    ablations: Tuple[str, ...],
    jobs: Optional[int],
    event_log: bool,
) -> None:
    """Simulate every trace at every sweep point"""
    overrides = {}
    if seed is not None:
        overrides["SEED"] = seed
    if event_log:
        overrides["EVENT_LOG"] = True
    try:
        sweep = [parse_sweep(arg) for arg in sweeps]
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--sweep") from exc
    if ablations:
        sweep.append(("ABLATION", list(ablations)))
    trace_paths = expand_traces(traces)

    try:
        config = load_config(config_path, overrides, ablate=False)
        plan = ExperimentPlan(
            settings=dict(config),
            out_dir=Path(out_dir),
            traces=trace_paths,
            sweep=sweep,
            jobs=jobs if jobs is not None else config["EXPERIMENT_JOBS"],
            sweep_cap=config["EXPERIMENT_SWEEP_CAP"],
            level=ctx.obj["level"],
        )
        report = run_experiment(plan)
    except (ConfigException, ExperimentException) as e:
        fail(str(e))
    except (BaseException, Exception) as e:
        logger.debug(format_exc())
        fail(f"Exception occured during the experiment: {e}")

    if report.failed:
        fail(
            f"{len(report.failed)} of {len(report.outcomes)} runs failed, "
            "see error.txt in their directories",
            1,
        )
    click.echo(str(report.aggregate))


@cli.command("analyze")
@click.option("--ideal", "--eq3", is_flag=True, help="Ideal frame transmission times")
@click.option("--alpha", "alpha_grid", default=",".join(map(str, DEFAULT_ALPHA_GRID)))
@click.option("--trace", "traces", multiple=True, help="Mahimahi trace path or glob")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--fps", type=float, default=None, help="Frame rate, ENCODER_FPS by default")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--dat", is_flag=True, help="Also write gnuplot CDF files")
def analyze_command(
    ideal: bool,
    alpha_grid: str,
    traces: Tuple[str, ...],
    config_path: Optional[str],
    fps: Optional[float],
    out_dir: Optional[str],
    dat: bool,
) -> None:
    """P95 of the ideal frame transmission time per alpha for every trace"""
    if not ideal:
        raise click.UsageError("choose an analysis, only --ideal is available")
    try:
        alphas = to_floats(alpha_grid)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--alpha") from exc

    rows = []
    try:
        config = load_config(config_path)
        delta_ms = 1000 / (fps if fps is not None else config["ENCODER_FPS"])
        links = []  # type: List[Tuple[str, LinkModel]]
        for trace in expand_traces(traces):
            links.append((trace.stem, load_trace(trace, config["LINK_MTU"])))
        if not links:
            links.append((config["LINK_PRESET"] or "link", build_link(config)))
        for name, link in links:
            analysis = ideal_transmission_analysis(link, alphas, delta_ms)
            rows.append(analysis_row(name, analysis))
            if out_dir is not None:
                write_trace_analysis(Path(out_dir), name, analysis, dat)
    except (ConfigException, TraceException, MetricsException) as e:
        fail(str(e))

    header = list(rows[0])
    if out_dir is not None:
        write_csv(Path(out_dir) / "analysis.csv", header, rows)
    click.echo("\t".join(header))
    for row in rows:
        click.echo("\t".join(_format(row[column]) for column in header))


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


@cli.command("compare")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def compare_command(run_dirs: Tuple[str, ...], out: Optional[str]) -> None:
    """Metrics of finished experiments side by side, with deltas to the first"""
    try:
        rows = compare([Path(d) for d in run_dirs], out=Path(out) if out else None)
    except CompareException as e:
        fail(str(e))
    header = list(rows[0])
    click.echo("\t".join(header))
    for row in rows:
        click.echo("\t".join(_format(row[column]) for column in header))


@cli.command("make-trace")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--segments", default=None, help="JSON list of [duration_ms, bits/s]")
@click.option("--duration-s", type=float, default=None, help="One period by default")
@click.option("--mtu", type=int, default=1500)
@click.argument("out", type=click.Path(dir_okay=False))
def make_trace_command(
    preset: Optional[str],
    segments: Optional[str],
    duration_s: Optional[float],
    mtu: int,
    out: str,
) -> None:
    """Render a piecewise-constant link into a Mahimahi trace"""
    if (preset is None) == (segments is None):
        raise click.UsageError("use exactly one of --preset and --segments")
    try:
        if preset is not None:
            parsed = PRESETS[preset]
        else:
            parsed = tuple((float(d), float(r)) for d, r in json.loads(segments))
        model = LinkModel(LinkKind.PIECEWISE_CONSTANT, mtu=mtu, segments=parsed)
    except (ValueError, TypeError) as exc:
        raise click.BadParameter(str(exc), param_hint="--segments") from exc
    duration_ms = duration_s * 1000 if duration_s is not None else model.period_ms
    path = write_trace(Path(out), model, duration_ms)
    click.echo(str(path))


@cli.command("encoder-step")
@click.option("--schedule", default="5:2e6,5:5e5", help="seconds:bits/s steps, looped")
@click.option("--duration-s", type=float, default=20.0)
@click.option("--preset", default="steady")
@click.option("--seed", type=int, default=0)
@click.argument("out", type=click.Path(dir_okay=False))
def encoder_step_command(
    schedule: str, duration_s: float, preset: str, seed: int, out: str
) -> None:
    """Frame sizes of the encoder following a scripted target bitrate"""
    try:
        steps = [
            (float(duration), float(bitrate))
            for duration, bitrate in (step.split(":") for step in schedule.split(","))
        ]
        config = EncoderConfig.from_preset(preset)
        series = step_response(config, steps, duration_s, np.random.default_rng(seed))
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    fps = config.fps
    rows = [
        {
            "time_ms": time,
            "target_bps": target,
            "frame_bytes": size,
            "bitrate_bps": size * 8 * fps,
        }
        for time, target, size in series
    ]
    write_csv(Path(out), ("time_ms", "target_bps", "frame_bytes", "bitrate_bps"), rows)
    click.echo(out)


if __name__ == "__main__":
    cli()
