#!/usr/bin/env python
"""The bottleneck link: a FIFO queue drained at delivery opportunities taken
from a Mahimahi trace or a Poisson process, or served as a fluid at the rate
of a piecewise-constant pattern"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Deque, Dict, Iterator, Optional, Tuple

import numpy as np

from args_helper import check_field
from records import PacketKind

logger = logging.getLogger(__name__)

Segment = Tuple[float, float]  # (duration ms, rate bits/s)

# alternating: 2 Mbps and 500 kbps every 40 s; convergence: steps between
# 5 and 2 Mbps; fixed_1500k: a constant link; noisy_1500k: 1.5 Mbps with a
# 10 s stretch from 10 s on that flips between 0.5 and 2.5 Mbps every 100 ms
PRESETS = {
    "alternating": ((40_000.0, 2e6), (40_000.0, 5e5)),
    "convergence": ((40_000.0, 5e6), (40_000.0, 2e6), (40_000.0, 5e6)),
    "fixed_1500k": ((1_000.0, 1.5e6),),
    "noisy_1500k": ((10_000.0, 1.5e6),)
    + ((100.0, 5e5), (100.0, 2.5e6)) * 50
    + ((20_000.0, 1.5e6),),
}  # type: Dict[str, Tuple[Segment, ...]]


class TraceException(BaseException):
    pass


class LinkKind(str, Enum):
    TRACE_DRIVEN = "trace"
    PIECEWISE_CONSTANT = "piecewise"
    POISSON_RATE = "poisson"


@dataclass(frozen=True)
class LinkModel:
    kind: LinkKind
    owd_ms: float = 25.0
    buffer_bytes: Optional[int] = None
    mtu: int = 1500
    trace: Tuple[float, ...] = ()
    segments: Tuple[Segment, ...] = ()
    mean_rate_bps: float = 0.0
    loss_prob: float = 0.0
    share_opportunities: bool = False

    def __post_init__(self):
        check_field(self.owd_ms >= 0, "owd_ms", "must be >= 0")
        check_field(self.mtu > 0, "mtu", "must be > 0")
        check_field(0 <= self.loss_prob <= 1, "loss_prob", "must be in [0, 1]")
        check_field(
            self.buffer_bytes is None or self.buffer_bytes > 0,
            "buffer_bytes",
            "must be positive or unset for an unbounded buffer",
        )
        if self.kind == LinkKind.TRACE_DRIVEN:
            check_field(bool(self.trace), "trace", "must not be empty")
            check_field(
                all(a <= b for a, b in zip(self.trace, self.trace[1:])),
                "trace",
                "timestamps must be non-decreasing",
            )
            check_field(self.trace[-1] > 0, "trace", "must last longer than 0 ms")
        elif self.kind == LinkKind.PIECEWISE_CONSTANT:
            check_field(bool(self.segments), "segments", "must not be empty")
            check_field(
                all(d > 0 and r >= 0 for d, r in self.segments),
                "segments",
                "need positive durations and non-negative rates",
            )
            check_field(
                any(r > 0 for _, r in self.segments),
                "segments",
                "need at least one positive rate",
            )
        else:
            check_field(self.mean_rate_bps > 0, "mean_rate_bps", "must be > 0")

    @property
    def deterministic(self) -> bool:
        return self.kind != LinkKind.POISSON_RATE

    @property
    def period_ms(self) -> float:
        "The schedule repeats with this period; Poisson links have none"
        if self.kind == LinkKind.TRACE_DRIVEN:
            return self.trace[-1]
        if self.kind == LinkKind.PIECEWISE_CONSTANT:
            return sum(duration for duration, _ in self.segments)
        return float("inf")

    def capacity_bps(self) -> float:
        if self.kind == LinkKind.TRACE_DRIVEN:
            return len(self.trace) * self.mtu * 8 / self.period_ms * 1000
        if self.kind == LinkKind.PIECEWISE_CONSTANT:
            bits = sum(duration * rate for duration, rate in self.segments)
            return bits / self.period_ms
        return self.mean_rate_bps

    def rate_at(self, time_ms: float) -> float:
        "Nominal rate of a piecewise-constant link at the given time"
        if self.kind != LinkKind.PIECEWISE_CONSTANT:
            return self.capacity_bps()
        return self._segment_at(time_ms)[0]

    def _segment_at(self, time_ms: float) -> Tuple[float, float]:
        "(rate, end time) of the piecewise segment holding time_ms"
        period = self.period_ms
        end = math.floor(time_ms / period) * period
        for duration, rate in self.segments:
            end += duration
            if time_ms < end:
                return rate, end
        # Rounding put time_ms on the next period
        duration, rate = self.segments[0]
        return rate, end + duration

    def service_end(self, start_ms: float, size: int) -> float:
        """A piecewise link is a fluid server: the time it finishes size bytes
        it started on at start_ms"""
        bits = size * 8.0
        time = start_ms
        while True:
            rate, end = self._segment_at(time)
            capacity = rate * (end - time) / 1000
            if rate > 0 and capacity >= bits:
                return time + bits / rate * 1000
            bits -= capacity
            time = end

    def fluid_bytes(self, start_ms: float, end_ms: float) -> float:
        bits = 0.0
        time = start_ms
        while time < end_ms:
            rate, segment_end = self._segment_at(time)
            stop = min(segment_end, end_ms)
            bits += rate * (stop - time) / 1000
            time = stop
        return bits / 8

    def schedule(self, rng: Optional[np.random.Generator] = None) -> Iterator[float]:
        "An endless, non-decreasing iterator of delivery opportunity times"
        if self.kind == LinkKind.TRACE_DRIVEN:
            return _trace_schedule(self.trace)
        if self.kind == LinkKind.PIECEWISE_CONSTANT:
            return _piecewise_schedule(self.segments, self.mtu)
        if rng is None:
            raise ValueError("a Poisson link needs a random generator")
        return _poisson_schedule(self.mean_rate_bps, self.mtu, rng)

    def opportunity_times(self, end_ms: float) -> np.ndarray:
        "All opportunity times in [0, end_ms) of a deterministic schedule"
        if not self.deterministic:
            raise ValueError("opportunity times are random for Poisson links")
        if self.kind == LinkKind.TRACE_DRIVEN:
            base = np.asarray(self.trace, dtype=float)
            loops = int(np.ceil(end_ms / self.period_ms)) + 1
            times = np.concatenate([base + k * self.period_ms for k in range(loops)])
            return times[times < end_ms]
        times = []
        for time in self.schedule():
            if time >= end_ms:
                break
            times.append(time)
        return np.asarray(times, dtype=float)

    def opportunity_bytes(self, start_ms: float, end_ms: float) -> float:
        "Bytes the link can carry in [start_ms, end_ms)"
        if not self.deterministic:
            return self.mean_rate_bps * (end_ms - start_ms) / 8000
        if self.kind == LinkKind.PIECEWISE_CONSTANT:
            return self.fluid_bytes(start_ms, end_ms)
        times = self.opportunity_times(end_ms)
        return float(np.count_nonzero(times >= start_ms) * self.mtu)


def _trace_schedule(trace: Tuple[float, ...]) -> Iterator[float]:
    # Mahimahi wraps the trace around its last timestamp
    period = trace[-1]
    base = 0.0
    while True:
        for time in trace:
            yield base + time
        base += period


def _piecewise_schedule(segments: Tuple[Segment, ...], mtu: int) -> Iterator[float]:
    # An opportunity fires every time the fluid byte count crosses a multiple of mtu
    start = 0.0
    served = 0.0
    count = 0
    while True:
        for duration, rate in segments:
            end = start + duration
            if rate > 0:
                bytes_per_ms = rate / 8000
                while True:
                    time = start + ((count + 1) * mtu - served) / bytes_per_ms
                    if time > end:
                        break
                    count += 1
                    yield time
                served += duration * bytes_per_ms
            start = end


def _poisson_schedule(
    mean_rate_bps: float, mtu: int, rng: np.random.Generator
) -> Iterator[float]:
    mean_gap = mtu * 8 / mean_rate_bps * 1000
    time = 0.0
    while True:
        time += float(rng.exponential(mean_gap))
        yield time


def load_trace(
    path: Path,
    mtu: int = 1500,
    owd_ms: float = 25.0,
    buffer_bytes: Optional[int] = None,
    logger: logging.Logger = logger,
) -> LinkModel:
    """Read a Mahimahi trace: one integer millisecond timestamp per line, each
    granting one mtu-sized delivery opportunity"""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise TraceException(f"cannot read trace {path}: {exc}") from exc

    timestamps = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            value = int(line)
        except ValueError as exc:
            raise TraceException(
                f"{path}:{number}: '{line}' is not an integer timestamp"
            ) from exc
        if value < 0:
            raise TraceException(f"{path}:{number}: negative timestamp {value}")
        if timestamps and value < timestamps[-1]:
            raise TraceException(
                f"{path}:{number}: timestamp {value} goes back from {timestamps[-1]}"
            )
        timestamps.append(float(value))

    if not timestamps:
        raise TraceException(f"{path}: the trace is empty")
    if timestamps[-1] <= 0:
        raise TraceException(f"{path}: the trace must last longer than 0 ms")

    model = LinkModel(
        kind=LinkKind.TRACE_DRIVEN,
        owd_ms=owd_ms,
        buffer_bytes=buffer_bytes,
        mtu=mtu,
        trace=tuple(timestamps),
    )
    logger.info(
        "Loaded trace %s: %i opportunities over %.0f ms, %.3f Mbps mean",
        path,
        len(timestamps),
        model.period_ms,
        model.capacity_bps() / 1e6,
    )
    return model


def write_trace(path: Path, model: LinkModel, duration_ms: float) -> Path:
    """Render a deterministic schedule into a Mahimahi trace; opportunities are
    rounded up to the next millisecond, the granularity of the format"""
    times = np.ceil(model.opportunity_times(duration_ms)).astype(np.int64)
    # A zero timestamp would end the wrap period early
    times = np.maximum(times, 1)
    path = Path(path)
    path.write_text("".join(f"{t}\n" for t in times))
    return path


@dataclass(slots=True)
class QueuedPacket:
    packet_id: int
    size: int
    enqueue_time: float
    kind: PacketKind = PacketKind.VIDEO
    # When the bottleneck started on the packet
    service_start: Optional[float] = None


@dataclass
class LinkStats:
    enqueued: int = 0
    delivered: int = 0
    tail_dropped: int = 0
    random_lost: int = 0
    delivered_bytes: int = 0

    @property
    def dropped(self) -> int:
        return self.tail_dropped + self.random_lost


class Link:
    """Mutable queue state of one simulation over an immutable LinkModel"""

    def __init__(
        self,
        model: LinkModel,
        rng: Optional[np.random.Generator] = None,
        logger: logging.Logger = logger,
    ):
        self.model = model
        self.logger = logger
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._schedule = model.schedule(self._rng)
        self._queue = deque()  # type: Deque[QueuedPacket]
        self._queued_bytes = 0
        self._opportunity_time = None  # type: Optional[float]
        self._opportunity_left = 0
        self._pending = None  # type: Optional[Tuple[float, int]]
        self._free_at = 0.0
        self.stats = LinkStats()

    @property
    def owd(self) -> float:
        return self.model.owd_ms

    @property
    def queued_bytes(self) -> int:
        return self._queued_bytes

    def __len__(self) -> int:
        return len(self._queue)

    def enqueue(self, packet: QueuedPacket, now: float) -> bool:
        buffer_bytes = self.model.buffer_bytes
        if buffer_bytes is not None and self._queued_bytes + packet.size > buffer_bytes:
            self.stats.tail_dropped += 1
            self.logger.debug(
                "Tail drop of packet %i at %.3f, %i bytes queued",
                packet.packet_id,
                now,
                self._queued_bytes,
            )
            return False
        self._queue.append(packet)
        self._queued_bytes += packet.size
        self.stats.enqueued += 1
        return True

    def next_delivery(self, now: float) -> Optional[Tuple[float, int]]:
        """The time the head packet leaves the bottleneck; it reaches the
        receiver owd later. Opportunities with an empty queue are forfeited, so
        are those at the instant the head packet arrived"""
        _ = now
        if not self._queue:
            return None
        if self._pending is not None:
            return self._pending

        head = self._queue[0]
        if self.model.kind == LinkKind.PIECEWISE_CONSTANT:
            head.service_start = max(head.enqueue_time, self._free_at)
            finish = self.model.service_end(head.service_start, head.size)
            self._pending = (finish, head.packet_id)
            return self._pending

        need = head.size
        while True:
            if (
                self._opportunity_left <= 0
                or self._opportunity_time is None
                or self._opportunity_time <= head.enqueue_time
            ):
                self._opportunity_time = next(self._schedule)
                self._opportunity_left = self.model.mtu
                continue
            if head.service_start is None:
                head.service_start = self._opportunity_time
            taken = min(need, self._opportunity_left)
            need -= taken
            self._opportunity_left -= taken
            if need <= 0:
                break

        if not self.model.share_opportunities:
            self._opportunity_left = 0
        self._pending = (self._opportunity_time, head.packet_id)
        return self._pending

    def deliver(self, now: float) -> Tuple[QueuedPacket, bool]:
        "Pop the head packet at its delivery time; True marks a random loss"
        if self._pending is None:
            self.next_delivery(now)
        assert self._pending is not None, "deliver() called on an empty link"
        packet = self._queue.popleft()
        self._queued_bytes -= packet.size
        self._free_at = self._pending[0]
        self._pending = None
        lost = bool(self.model.loss_prob > 0 and self._rng.random() < self.model.loss_prob)
        if lost:
            self.stats.random_lost += 1
        else:
            self.stats.delivered += 1
            self.stats.delivered_bytes += packet.size
        return packet, lost
