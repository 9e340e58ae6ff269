#!/usr/bin/env python
"""The sender-side pacer: a FIFO media queue released at the congestion
controller's rate under its window, padded with dummy packets"""
import logging
from collections import deque, namedtuple
from dataclasses import dataclass
from itertools import count
from typing import Deque, Dict, List, Optional, Tuple

from args_helper import check_field
from cca import CongestionControl, RateMeter
from records import Frame, Packet, PacketKind

logger = logging.getLogger(__name__)

# earliest_time is None when only an ACK or a new frame can unblock the pacer
Transmission = namedtuple("Transmission", ("packet", "earliest_time"))


@dataclass(frozen=True)
class DummyPolicy:
    enabled: bool = True
    max_size_bytes: int = 200
    frame_eta_fraction: float = 0.25
    max_video_bitrate_bps: float = 12e6
    mtu: int = 1500

    def __post_init__(self):
        check_field(self.max_size_bytes > 0, "max_size_bytes", "must be > 0")
        check_field(
            self.max_size_bytes <= self.mtu, "max_size_bytes", "must not exceed mtu"
        )
        # 0 keeps dummies always eligible
        check_field(
            0 <= self.frame_eta_fraction < 1,
            "frame_eta_fraction",
            "must be in [0, 1)",
        )
        check_field(self.max_video_bitrate_bps > 0, "max_video_bitrate_bps", "must be > 0")


@dataclass(frozen=True, slots=True)
class ServiceTimeSample:
    frame_id: int
    d_i: float
    tr_i: float
    completion_time: float


class VideoRateMeter(RateMeter):
    """Acknowledged video bytes, exponentially averaged with a 1 s time constant"""


class Pacer:
    """Video packets wait in FIFO order; each released packet occupies the
    sender for size * 8 / CC-Rate and leaves when its pacing slot ends, so the
    head packet stays queued while it is being paced out"""

    def __init__(
        self,
        mtu: int = 1500,
        frame_interval_ms: float = 1000 / 30,
        backlogged: bool = False,
        logger: logging.Logger = logger,
    ):
        check_field(mtu > 0, "mtu", "must be > 0")
        self.mtu = mtu
        self.frame_interval_ms = frame_interval_ms
        self.backlogged = backlogged
        self.logger = logger
        self.draining = False
        self.samples = []  # type: List[ServiceTimeSample]
        self.dummies_sent = 0
        self._ids = count()
        self._queue = deque()  # type: Deque[Packet]
        self._queued_bytes = 0
        self._in_service = None  # type: Optional[Packet]
        self._busy_until = None  # type: Optional[float]
        self._head_since = None  # type: Optional[float]
        self._frame_started = {}  # type: Dict[int, float]
        self._frame_target = {}  # type: Dict[int, float]

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def empty(self) -> bool:
        return not self._queue

    @property
    def queued_bytes(self) -> int:
        return self._queued_bytes

    @property
    def busy(self) -> bool:
        return self._in_service is not None

    def next_packet_id(self) -> int:
        return next(self._ids)

    def enqueue_frame(self, frame: Frame, now: float) -> int:
        if frame.size_bytes <= 0:
            raise ValueError(f"frame {frame.frame_id} has no bytes to send")
        if self.empty:
            self._head_since = now
        full, rest = divmod(frame.size_bytes, self.mtu)
        sizes = [self.mtu] * full + ([rest] if rest else [])
        for index, size in enumerate(sizes):
            packet = Packet(
                packet_id=self.next_packet_id(),
                kind=PacketKind.VIDEO,
                size=size,
                frame_id=frame.frame_id,
                first_of_frame=index == 0,
                last_of_frame=index == len(sizes) - 1,
                pacer_enqueue_time=now,
            )
            self._queue.append(packet)
            self._queued_bytes += size
        self._frame_target[frame.frame_id] = frame.target_bitrate
        self.logger.debug(
            "Frame %i of %i bytes enqueued as %i packets at %.3f",
            frame.frame_id,
            frame.size_bytes,
            len(sizes),
            now,
        )
        return len(sizes)

    def oldest_packet_age(self, now: float) -> float:
        if not self._queue:
            return 0.0
        enqueued = self._queue[0].pacer_enqueue_time
        assert enqueued is not None
        return now - enqueued

    def dummy_allowed(
        self, policy: DummyPolicy, next_frame_eta: float, current_video_bitrate: float
    ) -> bool:
        if not policy.enabled or self.draining or self._queue:
            return False
        if next_frame_eta < policy.frame_eta_fraction * self.frame_interval_ms:
            return False
        return current_video_bitrate < policy.max_video_bitrate_bps

    def waiting_for_frame(
        self, policy: DummyPolicy, next_frame_eta: float, current_video_bitrate: float
    ) -> bool:
        "Idle only because dummies hold back ahead of the next frame"
        if not policy.enabled or self.draining:
            return False
        if current_video_bitrate >= policy.max_video_bitrate_bps:
            return False
        return next_frame_eta < policy.frame_eta_fraction * self.frame_interval_ms

    def _candidate(
        self, policy: DummyPolicy, next_frame_eta: float, current_video_bitrate: float
    ) -> Optional[Tuple[PacketKind, int]]:
        if self._queue:
            return PacketKind.VIDEO, self._queue[0].size
        if self.backlogged and not self.draining:
            return PacketKind.BULK, self.mtu
        if self.dummy_allowed(policy, next_frame_eta, current_video_bitrate):
            return PacketKind.DUMMY, policy.max_size_bytes
        return None

    def next_transmission(
        self,
        cca: CongestionControl,
        policy: DummyPolicy,
        now: float,
        next_frame_eta: float,
        current_video_bitrate: float,
    ) -> Transmission:
        """Start pacing the next packet if one is ready and the window allows.
        The returned earliest_time is when that packet leaves the pacer"""
        if self._in_service is not None:
            return Transmission(None, self._busy_until)

        candidate = self._candidate(policy, next_frame_eta, current_video_bitrate)
        if candidate is None:
            if not self.waiting_for_frame(policy, next_frame_eta, current_video_bitrate):
                cca.on_app_limited(now)
            return Transmission(None, None)
        kind, size = candidate
        if not cca.can_send(size):
            return Transmission(None, None)

        if kind == PacketKind.VIDEO:
            packet = self._queue[0]
        else:
            packet = Packet(self.next_packet_id(), kind, size)
            if kind == PacketKind.DUMMY:
                self.dummies_sent += 1
        cca.on_send(packet.packet_id, packet.size, now)
        self._in_service = packet
        self._busy_until = now + packet.size * 8 / cca.cc_rate() * 1000
        return Transmission(packet, self._busy_until)

    def complete(self, now: float) -> Packet:
        "The pacing slot of the packet in service ended; it goes on the wire"
        packet = self._in_service
        assert packet is not None, "no packet is being paced"
        self._in_service = None
        self._busy_until = None
        packet.send_time = now
        if packet.kind != PacketKind.VIDEO:
            return packet

        head = self._queue.popleft()
        assert head is packet
        self._queued_bytes -= packet.size
        assert packet.frame_id is not None
        if packet.first_of_frame:
            assert self._head_since is not None
            self._frame_started[packet.frame_id] = self._head_since
        if packet.last_of_frame:
            started = self._frame_started.pop(packet.frame_id)
            target = self._frame_target.pop(packet.frame_id)
            self.samples.append(
                ServiceTimeSample(packet.frame_id, now - started, target, now)
            )
        self._head_since = now if self._queue else None
        return packet

    def drain_samples(self) -> List[ServiceTimeSample]:
        samples, self.samples = self.samples, []
        return samples
