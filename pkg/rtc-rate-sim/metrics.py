#!/usr/bin/env python
"""Post-run analysis of the frame and packet records, plus the ideal frame
transmission time analysis of a link schedule"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from controller import AlphaPoint, percentile
from link import LinkKind, LinkModel
from records import FrameRecord, Packet, PacketKind
from transport import ServiceTimeSample

logger = logging.getLogger(__name__)

LATENCY_PERCENTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
DEFAULT_ALPHA_GRID = (0.5, 0.75, 0.9, 1.0)


class MetricsException(BaseException):
    pass


@dataclass
class RunSummary:
    duration_s: float
    capacity_bps: float
    utilization: float
    padding_ratio: float
    video_bitrate_mean: float
    video_bitrate_p5: float
    video_bitrate_p50: float
    video_bitrate_p95: float
    frame_rate: float
    frames: int
    skipped_frames: int
    latency_p5: float
    latency_p25: float
    latency_p50: float
    latency_p75: float
    latency_p95: float
    latency_mean: float
    service_p90: float
    alpha_mean: float
    lost_packets: int
    convergence_s: Optional[float] = None

    def as_row(self) -> Dict[str, Optional[float]]:
        return asdict(self)


@dataclass
class TraceAnalysis:
    alpha_grid: Tuple[float, ...]
    frame_interval_ms: float
    samples: Dict[float, np.ndarray] = field(default_factory=dict)
    p95: Dict[float, float] = field(default_factory=dict)
    frame_instants: int = 0
    zero_capacity_frames: int = 0


def _percentile_or_nan(values: Sequence[float], q: float) -> float:
    if len(values) == 0:
        return math.nan
    return percentile(values, q)


def _mean_or_nan(values: Sequence[float]) -> float:
    if len(values) == 0:
        return math.nan
    return float(np.mean(values))


def wire_bytes_series(
    packets: Iterable[Packet], bin_ms: float = 100.0, end_ms: Optional[float] = None
) -> np.ndarray:
    """Bytes leaving the bottleneck per bin; a packet the link serves over an
    interval spreads its bytes evenly across it"""
    spans = []
    for packet in packets:
        if packet.delivery_time is None:
            continue
        start = packet.service_start
        if start is None or start > packet.delivery_time:
            start = packet.delivery_time
        spans.append((start, packet.delivery_time, packet.size))
    if end_ms is None:
        end_ms = max((end for _, end, _ in spans), default=0.0) + bin_ms
    bins = int(math.ceil(end_ms / bin_ms))
    series = np.zeros(bins)
    for start, end, size in spans:
        first = int(start // bin_ms)
        last = int(end // bin_ms)
        if first == last or end <= start:
            if last < bins:
                series[last] += size
            continue
        for index in range(first, min(last, bins - 1) + 1):
            low = max(start, index * bin_ms)
            high = min(end, (index + 1) * bin_ms)
            series[index] += size * (high - low) / (end - start)
    return series


def video_bitrate_series(
    packets: Iterable[Packet],
    window_s: float = 1.0,
    step_ms: float = 100.0,
    end_ms: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Video bitrate at the receiver averaged over the trailing window,
    sampled every step_ms: (times ms, bits/s)"""
    arrivals = sorted(
        (packet.arrival_time, packet.size)
        for packet in packets
        if packet.kind == PacketKind.VIDEO and packet.arrival_time is not None
    )
    times = np.array([time for time, _ in arrivals], dtype=float)
    cumulative = np.cumsum([size for _, size in arrivals], dtype=float)
    if end_ms is None:
        end_ms = float(times[-1]) if times.size else 0.0
    window_ms = window_s * 1000
    grid = np.arange(window_ms, end_ms + step_ms / 2, step_ms)
    if not times.size:
        return grid, np.zeros_like(grid)
    totals = np.concatenate(([0.0], cumulative))
    upto = totals[np.searchsorted(times, grid, side="right")]
    before = totals[np.searchsorted(times, grid - window_ms, side="right")]
    return grid, (upto - before) * 8 / window_s


def convergence_time(
    times: np.ndarray,
    series: np.ndarray,
    capacity_bps: float,
    after_ms: float,
    fraction: float = 0.9,
) -> Optional[float]:
    "Seconds after a step until the series first reaches fraction of capacity"
    reached = np.nonzero((times >= after_ms) & (series >= fraction * capacity_bps))[0]
    if not reached.size:
        return None
    return float(times[reached[0]] - after_ms) / 1000


def last_step_up(link: LinkModel, end_ms: float) -> Optional[Tuple[float, float]]:
    "(time, new rate) of the last rate increase of a piecewise link before end_ms"
    if link.kind != LinkKind.PIECEWISE_CONSTANT:
        return None
    found = None
    previous = None  # type: Optional[float]
    start = 0.0
    while start < end_ms:
        for duration, rate in link.segments:
            if start >= end_ms:
                break
            if previous is not None and rate > previous:
                found = (start, rate)
            previous = rate
            start += duration
    return found


def summarize(
    frames: Sequence[FrameRecord],
    packets: Sequence[Packet],
    link: LinkModel,
    duration_ms: float,
    alpha: Sequence[AlphaPoint] = (),
    samples: Sequence[ServiceTimeSample] = (),
) -> RunSummary:
    if not frames and not packets:
        raise MetricsException("cannot summarize a run without frames or packets")
    duration_s = duration_ms / 1000

    delivered = {kind: 0 for kind in PacketKind}
    wire = lost = 0
    for packet in packets:
        if packet.declared_lost or (packet.dropped and packet.arrival_time is None):
            lost += 1
        if packet.arrival_time is None:
            continue
        delivered[packet.kind] += packet.size
        if packet.delivery_time is not None and packet.delivery_time < duration_ms:
            wire += packet.size
    total = sum(delivered.values())

    capacity_bytes = link.opportunity_bytes(0.0, duration_ms)
    utilization = wire / capacity_bytes if capacity_bytes > 0 else 0.0
    padding_ratio = delivered[PacketKind.DUMMY] / total if total > 0 else 0.0

    _, per_second = video_bitrate_series(packets, step_ms=1000.0, end_ms=duration_ms)
    latencies = [f.latency for f in frames if f.latency is not None]
    latency = [_percentile_or_nan(latencies, q) for q in LATENCY_PERCENTILES]
    displayed = sum(1 for f in frames if f.display_time is not None)

    convergence = None
    step = last_step_up(link, duration_ms)
    if step is not None:
        times, bitrates = video_bitrate_series(packets, end_ms=duration_ms)
        convergence = convergence_time(times, bitrates, step[1], step[0])

    return RunSummary(
        duration_s=duration_s,
        capacity_bps=capacity_bytes * 8 / duration_s,
        utilization=utilization,
        padding_ratio=padding_ratio,
        video_bitrate_mean=delivered[PacketKind.VIDEO] * 8 / duration_s,
        video_bitrate_p5=_percentile_or_nan(per_second, 0.05),
        video_bitrate_p50=_percentile_or_nan(per_second, 0.5),
        video_bitrate_p95=_percentile_or_nan(per_second, 0.95),
        frame_rate=displayed / duration_s,
        frames=len(frames),
        skipped_frames=sum(1 for f in frames if f.skipped),
        latency_p5=latency[0],
        latency_p25=latency[1],
        latency_p50=latency[2],
        latency_p75=latency[3],
        latency_p95=latency[4],
        latency_mean=_mean_or_nan(latencies),
        service_p90=_percentile_or_nan([s.d_i for s in samples], 0.9),
        alpha_mean=_mean_or_nan([point.alpha for point in alpha]),
        lost_packets=lost,
        convergence_s=convergence,
    )


def cumulative_capacity(link: LinkModel, end_ms: float) -> Tuple[np.ndarray, np.ndarray]:
    """Knots (times ms, cumulative bytes) of the fluid delivery curve of a
    piecewise link; the curve is linear between knots"""
    if link.kind != LinkKind.PIECEWISE_CONSTANT:
        raise MetricsException("only piecewise links have a fluid delivery curve")
    times = [0.0]
    volume = [0.0]
    while times[-1] < end_ms:
        for duration, rate in link.segments:
            times.append(times[-1] + duration)
            volume.append(volume[-1] + rate / 8000 * duration)
    return np.array(times), np.array(volume)


def _inverse(knots: np.ndarray, volume: np.ndarray, goal: np.ndarray) -> np.ndarray:
    "Earliest time at which the cumulative curve reaches every goal"
    index = np.searchsorted(volume, goal, side="left")
    index = np.clip(index, 1, len(volume) - 1)
    t0, t1 = knots[index - 1], knots[index]
    b0, b1 = volume[index - 1], volume[index]
    return t0 + (goal - b0) / (b1 - b0) * (t1 - t0)


def _fluid_times(
    link: LinkModel, instants: np.ndarray, delta_ms: float, alpha_grid: Sequence[float]
) -> Tuple[np.ndarray, Dict[float, np.ndarray]]:
    rates = np.array([link.rate_at(t) for t in instants])
    frame_bytes = rates / 8000 * delta_ms
    period_bytes = link.capacity_bps() / 8000 * link.period_ms
    loops = int(math.ceil(frame_bytes.max(initial=0.0) / period_bytes)) + 2
    knots, volume = cumulative_capacity(
        link, instants[-1] + delta_ms + loops * link.period_ms
    )
    start = np.interp(instants, knots, volume)
    usable = frame_bytes > 0
    times = {}
    for alpha in alpha_grid:
        goal = start[usable] + alpha * frame_bytes[usable]
        times[alpha] = _inverse(knots, volume, goal) - instants[usable]
    return usable, times


def _opportunity_times(
    link: LinkModel, instants: np.ndarray, delta_ms: float, alpha_grid: Sequence[float]
) -> Tuple[np.ndarray, Dict[float, np.ndarray]]:
    # A frame sized for alpha of the opportunities in [t, t + delta) is done at
    # the opportunity that carries its last byte
    opportunities = link.opportunity_times(instants[-1] + delta_ms)
    first = np.searchsorted(opportunities, instants, side="left")
    counts = np.searchsorted(opportunities, instants + delta_ms, side="left") - first
    usable = counts > 0
    times = {}
    for alpha in alpha_grid:
        needed = np.ceil(alpha * counts[usable] - 1e-9).astype(np.int64)
        last = first[usable] + np.maximum(needed, 1) - 1
        times[alpha] = opportunities[last] - instants[usable]
    return usable, times


def ideal_transmission_analysis(
    link: LinkModel,
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    delta_ms: float = 1000 / 30,
    duration_ms: Optional[float] = None,
    logger: logging.Logger = logger,
) -> TraceAnalysis:
    """For a frame produced at t and sized for alpha * C(t) * delta, T(alpha, t)
    is the time the link needs to carry it. Piecewise links use their exact
    rate at t. On traces C(t) * delta is the opportunity bytes in [t, t + delta)
    and T is the smallest time whose opportunities from t on hold the frame"""
    if not alpha_grid or any(not 0 < alpha <= 1 for alpha in alpha_grid):
        raise MetricsException("alpha values must be in (0, 1]")
    if delta_ms <= 0:
        raise MetricsException("the frame interval must be positive")
    if not link.deterministic:
        raise MetricsException("ideal transmission times need a deterministic link")
    if duration_ms is None:
        duration_ms = link.period_ms

    instants = np.arange(0.0, duration_ms, delta_ms)
    if link.kind == LinkKind.PIECEWISE_CONSTANT:
        usable, times = _fluid_times(link, instants, delta_ms, alpha_grid)
    else:
        usable, times = _opportunity_times(link, instants, delta_ms, alpha_grid)

    analysis = TraceAnalysis(
        alpha_grid=tuple(alpha_grid),
        frame_interval_ms=delta_ms,
        frame_instants=int(instants.size),
        zero_capacity_frames=int(np.count_nonzero(~usable)),
    )
    for alpha in alpha_grid:
        analysis.samples[alpha] = times[alpha]
        analysis.p95[alpha] = _percentile_or_nan(times[alpha], 0.95)
    logger.debug(
        "Ideal transmission times over %i frames, %i without capacity: %s",
        analysis.frame_instants,
        analysis.zero_capacity_frames,
        ", ".join(f"{a}: {p:.1f} ms" for a, p in analysis.p95.items()),
    )
    return analysis
