#!/usr/bin/env python
"""Window-based delay-controlling congestion control: Copa and RoCC"""
import logging
import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from args_helper import check_field

logger = logging.getLogger(__name__)

MAX_VELOCITY = 32
# Consecutive RTTs moving the window the same way before the velocity doubles
VELOCITY_RTTS = 3


class Algorithm(str, Enum):
    COPA = "copa"
    ROCC = "rocc"


@dataclass(frozen=True)
class CcaConfig:
    algorithm: Algorithm = Algorithm.COPA
    mtu: int = 1500
    copa_delta: float = 0.5
    rocc_gamma: float = 0.5
    rocc_headroom_mtu: float = 4
    initial_rate_bps: float = 300e3
    initial_cwnd_mtu: float = 10
    rtt_min_window_s: float = 10
    srtt_gain: float = 1 / 8
    # Window growth room above the delivered bytes of one RTT while app-limited
    app_limited_headroom_mtu: float = 3

    def __post_init__(self):
        check_field(self.mtu > 0, "mtu", "must be > 0")
        check_field(self.copa_delta > 0, "copa_delta", "must be > 0")
        check_field(self.rocc_gamma > 0, "rocc_gamma", "must be > 0")
        check_field(self.rocc_headroom_mtu >= 1, "rocc_headroom_mtu", "must be >= 1")
        check_field(self.initial_rate_bps > 0, "initial_rate_bps", "must be > 0")
        check_field(self.initial_cwnd_mtu >= 1, "initial_cwnd_mtu", "must be >= 1")
        check_field(self.rtt_min_window_s > 0, "rtt_min_window_s", "must be > 0")
        check_field(0 < self.srtt_gain <= 1, "srtt_gain", "must be in (0, 1]")
        check_field(
            self.app_limited_headroom_mtu >= 1,
            "app_limited_headroom_mtu",
            "must be >= 1",
        )


@dataclass(frozen=True)
class AckEvent:
    packet_id: int
    bytes_acked: int
    send_time: float
    recv_ack_time: float

    def __post_init__(self):
        check_field(
            self.recv_ack_time > self.send_time,
            "recv_ack_time",
            "must be later than send_time",
        )

    @property
    def rtt(self) -> float:
        return self.recv_ack_time - self.send_time


class WindowedMin:
    """Sliding-window minimum over time-stamped samples (monotone deque)"""

    def __init__(self):
        self._samples = deque()  # type: Deque[Tuple[float, float]]

    def update(self, now: float, value: float, window: float) -> float:
        while self._samples and self._samples[-1][1] >= value:
            self._samples.pop()
        self._samples.append((now, value))
        while self._samples[0][0] < now - window:
            self._samples.popleft()
        return self._samples[0][1]


class RateMeter:
    """Exponentially weighted byte rate in bits/s. Every sample decays by
    exp(-elapsed / time_constant_ms)"""

    def __init__(self, time_constant_ms: float = 1000.0):
        check_field(time_constant_ms > 0, "time_constant_ms", "must be > 0")
        self.time_constant_ms = time_constant_ms
        self._rate = 0.0
        self._updated = None  # type: Optional[float]

    def rate(self, now: float) -> float:
        if self._updated is None:
            return 0.0
        elapsed = max(now - self._updated, 0.0)
        return self._rate * math.exp(-elapsed / self.time_constant_ms)

    def add(self, now: float, size: int) -> None:
        self._rate = self.rate(now) + size * 8 / self.time_constant_ms * 1000
        self._updated = now


class CongestionControl:
    """The state shared by both algorithms: the in-flight table, the RTT
    estimators and the window. Subclasses only decide how cwnd moves"""

    algorithm = None  # type: Algorithm

    def __init__(self, config: CcaConfig, logger: logging.Logger = logger):
        self.config = config
        self.logger = logger
        self.mtu = config.mtu
        self.cwnd = config.initial_cwnd_mtu * config.mtu  # type: float
        self.srtt = None  # type: Optional[float]
        self.rtt_min = None  # type: Optional[float]
        self.latest_rtt = None  # type: Optional[float]
        self.inflight = 0
        self.acked_bytes = 0
        self.duplicate_acks = 0
        self.losses = 0
        self._sent = {}  # type: Dict[int, int]
        self._rtt_min_filter = WindowedMin()
        self.delivery_rate = RateMeter()
        self._app_limited_at = None  # type: Optional[float]

    def on_send(self, packet_id: int, size: int, now: float) -> None:
        _ = now
        self._sent[packet_id] = size
        self.inflight += size

    def on_app_limited(self, now: float) -> None:
        "The sender had nothing to send and was not waiting for a frame"
        self._app_limited_at = now

    def app_limited(self, now: float) -> bool:
        if self.srtt is None or self._app_limited_at is None:
            return False
        return now - self._app_limited_at <= self.srtt

    def growth_ceiling(self, now: float) -> float:
        """The window may not grow past the bytes delivered in one RTT plus a
        small headroom while the application left it idle within the last RTT"""
        if not self.app_limited(now):
            return math.inf
        assert self.srtt is not None
        delivered = self.delivery_rate.rate(now) * self.srtt / 8000
        return delivered + self.config.app_limited_headroom_mtu * self.mtu

    def can_send(self, packet_size: int) -> bool:
        return self.inflight + packet_size <= self.cwnd

    def cc_rate(self) -> float:
        if self.srtt is None:
            return self.config.initial_rate_bps
        return self.cwnd * 8 / self.srtt * 1000

    def on_ack(self, ack: AckEvent) -> None:
        size = self._sent.pop(ack.packet_id, None)
        if size is None:
            self.duplicate_acks += 1
            self.logger.debug("Duplicate ACK for packet %i", ack.packet_id)
            return
        self.inflight -= size
        self.acked_bytes += size
        self.delivery_rate.add(ack.recv_ack_time, size)
        self._update_rtt(ack)
        self._on_ack(ack, size)
        self.cwnd = max(self.cwnd, self.mtu)

    def on_loss(self, packet_id: int, now: float) -> None:
        _ = now
        size = self._sent.pop(packet_id, None)
        if size is None:
            return
        self.inflight -= size
        self.losses += 1

    def _update_rtt(self, ack: AckEvent) -> None:
        rtt = ack.rtt
        self.latest_rtt = rtt
        if self.srtt is None:
            self.srtt = rtt
        else:
            gain = self.config.srtt_gain
            self.srtt = (1 - gain) * self.srtt + gain * rtt
        self.rtt_min = self._rtt_min_filter.update(
            ack.recv_ack_time, rtt, self.config.rtt_min_window_s * 1000
        )

    def _on_ack(self, ack: AckEvent, size: int) -> None:
        raise NotImplementedError

    def snapshot(self) -> Dict[str, Optional[float]]:
        return {
            "cwnd": self.cwnd,
            "srtt": self.srtt,
            "rtt_min": self.rtt_min,
            "inflight": self.inflight,
            "cc_rate": self.cc_rate(),
        }

    @property
    def outstanding(self) -> int:
        return len(self._sent)


class Copa(CongestionControl):
    """Copa default mode: steer cwnd toward the rate 1/(delta * queueing delay)
    with a velocity that doubles while the window keeps moving one way"""

    algorithm = Algorithm.COPA

    def __init__(self, config: CcaConfig, logger: logging.Logger = logger):
        super().__init__(config, logger)
        self.slow_start = True
        self.velocity = 1
        self._standing_filter = WindowedMin()
        self.rtt_standing = None  # type: Optional[float]
        self._direction = 0
        self._same_direction = 0
        self._velocity_cwnd = self.cwnd
        self._velocity_time = None  # type: Optional[float]

    def queueing_delay(self) -> float:
        if self.rtt_standing is None or self.rtt_min is None:
            return 0.0
        return max(self.rtt_standing - self.rtt_min, 0.0)

    def target_rate(self) -> float:
        "Packets per second Copa aims for"
        delay = self.queueing_delay()
        if delay <= 0:
            return math.inf
        return 1000 / (self.config.copa_delta * delay)

    def current_rate(self) -> float:
        assert self.rtt_standing is not None
        return self.cwnd / self.mtu / self.rtt_standing * 1000

    def _on_ack(self, ack: AckEvent, size: int) -> None:
        assert self.srtt is not None
        now = ack.recv_ack_time
        self.rtt_standing = self._standing_filter.update(now, ack.rtt, self.srtt / 2)
        below_target = self.current_rate() <= self.target_rate()
        ceiling = self.growth_ceiling(now)

        if self.slow_start:
            if below_target:
                self._grow(size, ceiling)
            else:
                self.slow_start = False
                self.logger.debug("Slow start ends at %.3f, cwnd %.0f", now, self.cwnd)

        if not self.slow_start:
            step = self.velocity * size * self.mtu / (self.config.copa_delta * self.cwnd)
            if below_target:
                self._grow(step, ceiling)
            else:
                self.cwnd -= step

        self._update_velocity(now)

    def _grow(self, step: float, ceiling: float) -> None:
        "Increase cwnd by step without crossing ceiling; never shrink it here"
        self.cwnd = max(self.cwnd, min(self.cwnd + step, ceiling))

    def _update_velocity(self, now: float) -> None:
        assert self.srtt is not None
        if self._velocity_time is None:
            self._velocity_time = now
            self._velocity_cwnd = self.cwnd
            return
        if now - self._velocity_time < self.srtt:
            return

        if self.cwnd > self._velocity_cwnd:
            direction = 1
        elif self.cwnd < self._velocity_cwnd:
            direction = -1
        else:
            direction = 0

        if direction != 0 and direction == self._direction:
            self._same_direction += 1
            if self._same_direction >= VELOCITY_RTTS:
                self.velocity = min(self.velocity * 2, MAX_VELOCITY)
        else:
            self.velocity = 1
            self._same_direction = 0
        self._direction = direction
        self._velocity_time = now
        self._velocity_cwnd = self.cwnd


class Rocc(CongestionControl):
    """RoCC: cwnd is the number of bytes received over the last
    (1 + gamma) * rtt_min plus a small constant headroom"""

    algorithm = Algorithm.ROCC
    _TRIM_EVERY = 4096

    def __init__(self, config: CcaConfig, logger: logging.Logger = logger):
        super().__init__(config, logger)
        self.headroom = config.rocc_headroom_mtu * config.mtu
        # Cumulative byte counts keyed by ACK time, searched with bisect
        self._times = []  # type: List[float]
        self._cumulative = []  # type: List[int]
        self._start = 0

    def received_in_window(self, now: float) -> int:
        if self.rtt_min is None or not self._cumulative:
            return 0
        window = (1 + self.config.rocc_gamma) * self.rtt_min
        total = self._cumulative[-1]
        index = bisect_right(self._times, now - window, lo=self._start)
        before = self._cumulative[index - 1] if index > 0 else 0
        return total - before

    def _on_ack(self, ack: AckEvent, size: int) -> None:
        now = ack.recv_ack_time
        total = self._cumulative[-1] if self._cumulative else 0
        self._times.append(now)
        self._cumulative.append(total + size)
        self.cwnd = self.received_in_window(now) + self.headroom
        self._trim(now)

    def _trim(self, now: float) -> None:
        assert self.rtt_min is not None
        horizon = now - self.config.rtt_min_window_s * 1000 * (1 + self.config.rocc_gamma)
        self._start = bisect_right(self._times, horizon, lo=self._start)
        if self._start >= self._TRIM_EVERY:
            # Keep one entry before the window as the subtraction base
            keep = self._start - 1
            del self._times[:keep]
            del self._cumulative[:keep]
            self._start -= keep


def make_cca(config: CcaConfig, logger: logging.Logger = logger) -> CongestionControl:
    if config.algorithm == Algorithm.ROCC:
        return Rocc(config, logger)
    return Copa(config, logger)
