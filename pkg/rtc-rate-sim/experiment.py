#!/usr/bin/env python
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from traceback import format_exc
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

from app_config import (
    ConfigException,
    build_sim_config,
    config_from_settings,
    render_config,
    validate_config,
)
from context_helper import RunContext
from engine import run
from metrics import RunSummary, summarize
from results import AGGREGATE_NAME, read_csv, summary_row, write_csv, write_run

logger = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"
LABELS = ("trace", "point", "seed", "status")
SUMMARY_COLUMNS = tuple(RunSummary.__dataclass_fields__)
COMPARE_METRICS = (
    "video_bitrate_mean",
    "video_bitrate_p50",
    "frame_rate",
    "latency_p50",
    "latency_p95",
    "service_p90",
    "utilization",
    "padding_ratio",
    "alpha_mean",
    "convergence_s",
)

Axis = Tuple[str, List[Any]]


class ExperimentException(BaseException):
    pass


class CompareException(BaseException):
    pass


class RunTask(NamedTuple):
    out_dir: Path
    trace: Optional[Path]
    trace_name: str
    point_name: str
    settings: Dict[str, Any]
    level: int


class RunOutcome(NamedTuple):
    trace_name: str
    point_name: str
    row: Dict[str, Any]
    error: Optional[str]


def _point_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value).replace("/", "-").replace(" ", "")


def point_name(point: Sequence[Tuple[str, Any]]) -> str:
    "controller P_ms=20 and seed=1 give controller_p_ms-20_seed-1"
    if not point:
        return "base"
    return "_".join(f"{key.lower()}-{_point_value(value)}" for key, value in point)


@dataclass
class ExperimentPlan:
    settings: Dict[str, Any]
    out_dir: Path
    traces: List[Path] = field(default_factory=list)
    sweep: List[Axis] = field(default_factory=list)
    jobs: int = 1
    sweep_cap: int = 256
    level: int = logging.INFO

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        keys = [key for key, _ in self.sweep]
        duplicated = sorted({key for key in keys if keys.count(key) > 1})
        if duplicated:
            raise ExperimentException(f"sweep keys repeat: {', '.join(duplicated)}")
        if self.jobs < 1:
            raise ExperimentException("the number of jobs must be >= 1")
        if self.size > self.sweep_cap:
            raise ExperimentException(
                f"the sweep has {self.size} runs, more than the cap of {self.sweep_cap}"
            )

    @property
    def points(self) -> List[Tuple[Tuple[str, Any], ...]]:
        axes = [[(key, value) for value in values] for key, values in self.sweep]
        return [tuple(point) for point in product(*axes)]

    @property
    def trace_names(self) -> List[Tuple[Optional[Path], str]]:
        if not self.traces:
            # the link comes from the configuration itself
            name = self.settings.get("LINK_PRESET") or "link"
            return [(None, str(name))]
        names = [(trace, Path(trace).stem) for trace in self.traces]
        stems = [name for _, name in names]
        if len(set(stems)) != len(stems):
            raise ExperimentException("trace file names must have distinct stems")
        return names

    @property
    def size(self) -> int:
        return len(self.trace_names) * len(self.points)

    def tasks(self) -> List[RunTask]:
        "Every point is validated before any run starts"
        tasks = []
        for point in self.points:
            settings = dict(self.settings)
            settings.update(point)
            try:
                validate_config(config_from_settings(settings))
            except ConfigException as exc:
                raise ExperimentException(
                    f"invalid sweep point {point_name(point)}: {exc}"
                ) from exc
            for trace, trace_name in self.trace_names:
                tasks.append(
                    RunTask(
                        self.out_dir,
                        trace,
                        trace_name,
                        point_name(point),
                        settings,
                        self.level,
                    )
                )
        return tasks


def run_task(task: RunTask) -> RunOutcome:
    """One isolated run: it writes into its own directory only and reports a
    failure instead of raising it"""
    context = RunContext(task.out_dir, task.trace_name, task.point_name, task.level)
    logger = context.logger
    row = {
        "trace": task.trace_name,
        "point": task.point_name,
        "seed": task.settings.get("SEED", 0),
    }  # type: Dict[str, Any]
    try:
        config = config_from_settings(task.settings)
        row["seed"] = config["SEED"]
        sim_config = build_sim_config(config, task.trace)
        result = run(sim_config, logger)
        summary = summarize(
            result.frames,
            result.packets,
            sim_config.link,
            sim_config.duration_ms,
            result.alpha,
            result.samples,
        )
        row = summary_row(summary, {**row, "status": OK})
        write_run(context.run_dir, result, summary, render_config(config), row, logger)
        context.mark_finished()
        return RunOutcome(task.trace_name, task.point_name, row, None)
    except (BaseException, Exception) as e:
        logger.exception("Exception occured during the run %s: %s", context.name, e)
        context.mark_failed(format_exc())
        return RunOutcome(
            task.trace_name, task.point_name, {**row, "status": FAILED}, str(e)
        )
    finally:
        context.close()


@dataclass
class ExperimentReport:
    outcomes: List[RunOutcome]
    aggregate: Path

    @property
    def failed(self) -> List[RunOutcome]:
        return [outcome for outcome in self.outcomes if outcome.error is not None]


def run_experiment(plan: ExperimentPlan, logger: logging.Logger = logger) -> ExperimentReport:
    tasks = plan.tasks()
    plan.out_dir.mkdir(0o750, parents=True, exist_ok=True)
    logger.info(
        "Running %i simulations (%i traces x %i points) with %i jobs into %s",
        len(tasks),
        len(plan.trace_names),
        len(plan.points),
        plan.jobs,
        plan.out_dir,
    )
    if plan.jobs == 1:
        outcomes = []
        for number, task in enumerate(tasks, 1):
            logger.info("Run %i/%i: %s/%s", number, len(tasks), task.trace_name, task.point_name)
            outcomes.append(run_task(task))
    else:
        with ProcessPoolExecutor(max_workers=plan.jobs) as executor:
            outcomes = list(executor.map(run_task, tasks))

    for outcome in outcomes:
        if outcome.error is not None:
            logger.error(
                "The run %s/%s failed: %s",
                outcome.trace_name,
                outcome.point_name,
                outcome.error,
            )
    outcomes.sort(key=lambda outcome: (outcome.trace_name, outcome.point_name))
    aggregate = write_csv(
        plan.out_dir / AGGREGATE_NAME,
        LABELS + SUMMARY_COLUMNS,
        [outcome.row for outcome in outcomes],
    )
    report = ExperimentReport(outcomes, aggregate)
    logger.info(
        "%i of %i runs finished, the aggregate is %s",
        len(outcomes) - len(report.failed),
        len(outcomes),
        aggregate,
    )
    return report


def _number(value: Optional[str]) -> float:
    if value is None or value == "":
        return math.nan
    return float(value)


def _mean(values: List[float]) -> float:
    present = [value for value in values if not math.isnan(value)]
    if not present:
        return math.nan
    return sum(present) / len(present)


def _columns(run_dir: Path) -> Dict[str, Dict[str, Dict[str, str]]]:
    "{column label: {trace: row}} of the successful runs in an experiment"
    aggregate = Path(run_dir) / AGGREGATE_NAME
    if not aggregate.exists():
        raise CompareException(f"{aggregate} does not exist, the experiment is not done")
    columns = {}  # type: Dict[str, Dict[str, Dict[str, str]]]
    for row in read_csv(aggregate):
        if row.get("status") != OK:
            continue
        columns.setdefault(row["point"], {})[row["trace"]] = row
    if not columns:
        raise CompareException(f"{run_dir} has no finished runs")
    name = Path(run_dir).name
    if len(columns) == 1:
        return {name: next(iter(columns.values()))}
    return {f"{name}/{point}": traces for point, traces in columns.items()}


def compare(
    run_dirs: Sequence[Path],
    metrics: Sequence[str] = COMPARE_METRICS,
    out: Optional[Path] = None,
    logger: logging.Logger = logger,
) -> List[Dict[str, Any]]:
    """One row per metric: its mean over the traces for every experiment (or
    sweep point) side by side, and the delta of each against the first"""
    columns = {}  # type: Dict[str, Dict[str, Dict[str, str]]]
    for run_dir in run_dirs:
        for label, traces in _columns(run_dir).items():
            if label in columns:
                raise CompareException(f"the column {label} repeats")
            columns[label] = traces
    if len(columns) < 2:
        raise CompareException("at least two runs are required for comparison")

    labels = list(columns)
    reference = set(columns[labels[0]])
    for label in labels[1:]:
        if set(columns[label]) != reference:
            raise CompareException(
                f"the trace sets of {labels[0]} and {label} differ: "
                f"{sorted(reference ^ set(columns[label]))}"
            )

    rows = []
    for metric in metrics:
        values = {
            label: _mean([_number(row.get(metric)) for row in traces.values()])
            for label, traces in columns.items()
        }
        row = {"metric": metric}  # type: Dict[str, Any]
        row.update(values)
        first = values[labels[0]]
        for label in labels[1:]:
            delta = values[label] - first
            row[f"delta_{label}"] = None if math.isnan(delta) else delta
        rows.append(row)

    if out is not None:
        header = ["metric"] + labels + [f"delta_{label}" for label in labels[1:]]
        write_csv(out, header, rows)
        logger.info("The comparison of %s is written to %s", ", ".join(labels), out)
    return rows
