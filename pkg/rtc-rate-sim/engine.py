#!/usr/bin/env python
"""Deterministic discrete-event loop: camera, encoder, controller, pacer,
bottleneck link, receiver and the ACK path"""
import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from args_helper import check_field
from cca import AckEvent, CcaConfig, make_cca
from controller import AlphaPoint, ControllerConfig, RateController, SafeguardAction
from encoder import Encoder, EncoderConfig, Skipped
from link import Link, LinkModel, LinkStats, QueuedPacket
from records import FrameRecord, Packet, PacketKind, fill_latencies
from transport import DummyPolicy, Pacer, ServiceTimeSample, VideoRateMeter

logger = logging.getLogger(__name__)

LOSS_CHECK_INTERVAL_MS = 5.0
# Loss timeout before the first RTT sample
INITIAL_LOSS_TIMEOUT_MS = 1000.0


class Source(str, Enum):
    VIDEO = "video"
    BACKLOGGED = "backlogged"


class EventKind(str, Enum):
    CAMERA_TICK = "camera_tick"
    PACER_WAKE = "pacer_wake"
    SLOT_END = "slot_end"
    LINK_DELIVERY = "link_delivery"
    RECEIVER_ARRIVAL = "receiver_arrival"
    ACK_ARRIVAL = "ack_arrival"
    CONTROLLER_UPDATE = "controller_update"
    LOSS_CHECK = "loss_check"
    DRAIN = "drain"


@dataclass(frozen=True)
class SimConfig:
    link: LinkModel
    duration_s: float = 120.0
    seed: int = 0
    source: Source = Source.VIDEO
    cca: CcaConfig = field(default_factory=CcaConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    dummy: DummyPolicy = field(default_factory=DummyPolicy)
    pacer_mtu: int = 1500
    loss_timeout_srtt: float = 4.0
    event_log: bool = False

    def __post_init__(self):
        check_field(self.duration_s > 0, "duration_s", "must be > 0")
        check_field(self.seed >= 0, "seed", "must be >= 0")
        check_field(self.pacer_mtu > 0, "pacer_mtu", "must be > 0")
        check_field(self.loss_timeout_srtt > 0, "loss_timeout_srtt", "must be > 0")

    @property
    def duration_ms(self) -> float:
        return self.duration_s * 1000

    @property
    def loss_detection(self) -> bool:
        return self.link.buffer_bytes is not None or self.link.loss_prob > 0


@dataclass
class LossEvent:
    time: float
    packet_id: int
    kind: PacketKind
    frame_id: Optional[int]


@dataclass
class SimResult:
    config: SimConfig
    frames: List[FrameRecord]
    packets: List[Packet]
    alpha: List[AlphaPoint]
    samples: List[ServiceTimeSample]
    events: List[Dict[str, Any]]
    link_stats: LinkStats
    cca_stats: Dict[str, Any]
    losses: List[LossEvent]
    safeguard_violations: int
    end_time: float


def quantize(time: float) -> float:
    "Event times have a resolution of 1 us"
    return round(time, 3)


class Simulation:
    def __init__(self, config: SimConfig, logger: logging.Logger = logger):
        self.config = config
        self.logger = logger
        link_seed, encoder_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.link = Link(config.link, np.random.default_rng(link_seed), logger)
        self.cca = make_cca(config.cca, logger)
        self.encoder = Encoder(config.encoder, np.random.default_rng(encoder_seed), logger)
        self.controller = RateController(config.controller, logger)
        self.pacer = Pacer(
            mtu=config.pacer_mtu,
            frame_interval_ms=config.encoder.delta_ms,
            backlogged=config.source == Source.BACKLOGGED,
            logger=logger,
        )
        self.video_rate = VideoRateMeter()
        self.now = 0.0
        self.packets = {}  # type: Dict[int, Packet]
        self.frames = {}  # type: Dict[int, FrameRecord]
        self.samples = []  # type: List[ServiceTimeSample]
        self.events = []  # type: List[Dict[str, Any]]
        self.losses = []  # type: List[LossEvent]
        self.safeguard_violations = 0
        self._heap = []  # type: List[Tuple[float, int, EventKind, Any]]
        self._seq = count()
        self._loss_deadlines = []  # type: List[Tuple[float, int]]
        self._lost_frames = set()
        self._link_scheduled = False
        self._tick = 0

    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> None:
        heapq.heappush(self._heap, (quantize(time), next(self._seq), kind, payload))

    def log_event(self, event: EventKind, **fields) -> None:
        if self.config.event_log:
            self.events.append({"t": self.now, "event": event.value, **fields})

    def next_frame_eta(self, now: float) -> float:
        if now >= self.config.duration_ms:
            return math.inf
        delta = self.config.encoder.delta_ms
        return (math.floor(now / delta) + 1) * delta - now

    def run(self) -> SimResult:
        config = self.config
        self.logger.info(
            "Simulating %.1f s, %s source, %s link, %s, seed %i",
            config.duration_s,
            config.source.value,
            config.link.kind.value,
            config.cca.algorithm.value,
            config.seed,
        )
        if config.source == Source.VIDEO:
            self.schedule(0.0, EventKind.CAMERA_TICK)
        else:
            self.schedule(0.0, EventKind.PACER_WAKE)
        if config.controller.t_s * 1000 < config.duration_ms:
            self.schedule(config.controller.t_s * 1000, EventKind.CONTROLLER_UPDATE)
        if config.loss_detection:
            self.schedule(LOSS_CHECK_INTERVAL_MS, EventKind.LOSS_CHECK)
        self.schedule(config.duration_ms, EventKind.DRAIN)

        handlers = {
            EventKind.CAMERA_TICK: self._on_camera_tick,
            EventKind.PACER_WAKE: self._on_pacer_wake,
            EventKind.SLOT_END: self._on_slot_end,
            EventKind.LINK_DELIVERY: self._on_link_delivery,
            EventKind.RECEIVER_ARRIVAL: self._on_receiver_arrival,
            EventKind.ACK_ARRIVAL: self._on_ack_arrival,
            EventKind.CONTROLLER_UPDATE: self._on_controller_update,
            EventKind.LOSS_CHECK: self._on_loss_check,
            EventKind.DRAIN: self._on_drain,
        }
        while self._heap:
            time, _, kind, payload = heapq.heappop(self._heap)
            assert time >= self.now, f"event {kind} at {time} before {self.now}"
            self.now = time
            handlers[kind](time, payload)

        self.samples.extend(self.pacer.drain_samples())
        for sample in self.samples:
            self.frames[sample.frame_id].service_time = sample.d_i
        frames = [self.frames[frame_id] for frame_id in sorted(self.frames)]
        fill_latencies(frames)
        if self.cca.inflight != 0:
            self.logger.warning("%i bytes still in flight after drain", self.cca.inflight)
        self.logger.info(
            "Finished at %.3f ms: %i frames, %i packets, %i losses",
            self.now,
            len(frames),
            len(self.packets),
            len(self.losses),
        )
        return SimResult(
            config=config,
            frames=frames,
            packets=[self.packets[packet_id] for packet_id in sorted(self.packets)],
            alpha=list(self.controller.series),
            samples=self.samples,
            events=self.events,
            link_stats=self.link.stats,
            cca_stats={
                "algorithm": self.cca.algorithm.value,
                "duplicate_acks": self.cca.duplicate_acks,
                "losses": self.cca.losses,
                "inflight": self.cca.inflight,
                "dummies_sent": self.pacer.dummies_sent,
                "encoded": self.encoder.encoded,
                "skipped": self.encoder.skipped,
            },
            losses=self.losses,
            safeguard_violations=self.safeguard_violations,
            end_time=self.now,
        )

    def _on_camera_tick(self, now: float, _: Any) -> None:
        age = self.pacer.oldest_packet_age(now)
        action = self.controller.safeguard(age, self.encoder.paused, self.pacer.empty)
        if action == SafeguardAction.PAUSE:
            self.encoder.pause()
        elif action == SafeguardAction.RESUME:
            self.encoder.resume()

        cc_rate = self.cca.cc_rate()
        target = 0.0 if self.encoder.paused else self.controller.target_bitrate(cc_rate)
        result = self.encoder.encode(target, now)
        record = FrameRecord(frame_id=result.frame_id, read_time=now)
        self.frames[record.frame_id] = record

        if isinstance(result, Skipped):
            record.skipped = True
            record.target_bitrate = result.target_bitrate
        else:
            record.size_bytes = result.size_bytes
            record.target_bitrate = result.target_bitrate
            record.packets = self.pacer.enqueue_frame(result, now)
            if age > self.config.controller.tau_ms:
                self.safeguard_violations += 1
        self.log_event(
            EventKind.CAMERA_TICK,
            frame_id=record.frame_id,
            pacer_age=age,
            encoded=not record.skipped,
            size=record.size_bytes,
            target=target,
            action=action.value if action is not None else None,
        )

        self._tick += 1
        next_tick = self._tick * self.config.encoder.delta_ms
        if next_tick < self.config.duration_ms:
            self.schedule(next_tick, EventKind.CAMERA_TICK)
        self._wake_pacer(now)

    def _on_pacer_wake(self, now: float, _: Any) -> None:
        self._wake_pacer(now)

    def _wake_pacer(self, now: float) -> None:
        transmission = self.pacer.next_transmission(
            self.cca,
            self.config.dummy,
            now,
            self.next_frame_eta(now),
            self.video_rate.rate(now),
        )
        if transmission.packet is not None:
            self.schedule(transmission.earliest_time, EventKind.SLOT_END)

    def _on_slot_end(self, now: float, _: Any) -> None:
        packet = self.pacer.complete(now)
        self.packets[packet.packet_id] = packet
        if self.config.loss_detection:
            srtt = self.cca.srtt
            timeout = (
                INITIAL_LOSS_TIMEOUT_MS
                if srtt is None
                else self.config.loss_timeout_srtt * srtt
            )
            heapq.heappush(self._loss_deadlines, (now + timeout, packet.packet_id))
        queued = QueuedPacket(packet.packet_id, packet.size, now, packet.kind)
        if not self.link.enqueue(queued, now):
            packet.dropped = True
        self.log_event(
            EventKind.SLOT_END,
            packet_id=packet.packet_id,
            kind=packet.kind.value,
            size=packet.size,
            dropped=packet.dropped,
            **self.cca.snapshot(),
        )
        self._schedule_link(now)
        self._wake_pacer(now)

    def _schedule_link(self, now: float) -> None:
        if self._link_scheduled:
            return
        delivery = self.link.next_delivery(now)
        if delivery is not None:
            self._link_scheduled = True
            self.schedule(delivery[0], EventKind.LINK_DELIVERY)

    def _on_link_delivery(self, now: float, _: Any) -> None:
        self._link_scheduled = False
        queued, lost = self.link.deliver(now)
        packet = self.packets[queued.packet_id]
        packet.service_start = queued.service_start
        packet.delivery_time = now
        if lost:
            packet.dropped = True
        else:
            self.schedule(now + self.link.owd, EventKind.RECEIVER_ARRIVAL, packet.packet_id)
        self._schedule_link(now)

    def _on_receiver_arrival(self, now: float, packet_id: int) -> None:
        packet = self.packets[packet_id]
        packet.arrival_time = now
        if packet.is_video:
            assert packet.frame_id is not None
            record = self.frames[packet.frame_id]
            record.received_packets += 1
            if (
                record.received_packets == record.packets
                and packet.frame_id not in self._lost_frames
            ):
                record.display_time = now
        self.schedule(now + self.link.owd, EventKind.ACK_ARRIVAL, packet_id)

    def _on_ack_arrival(self, now: float, packet_id: int) -> None:
        packet = self.packets[packet_id]
        packet.ack_time = now
        assert packet.send_time is not None
        self.cca.on_ack(AckEvent(packet_id, packet.size, packet.send_time, now))
        if packet.is_video and not packet.declared_lost:
            self.video_rate.add(now, packet.size)
        self.log_event(EventKind.ACK_ARRIVAL, packet_id=packet_id, rtt=now - packet.send_time)
        self._wake_pacer(now)

    def _on_controller_update(self, now: float, _: Any) -> None:
        samples = self.pacer.drain_samples()
        self.samples.extend(samples)
        self.controller.add_samples(samples)
        target = self.controller.on_update_tick(self.cca.cc_rate(), now)
        self.log_event(
            EventKind.CONTROLLER_UPDATE, alpha=self.controller.alpha, target=target
        )
        following = now + self.config.controller.t_s * 1000
        if following < self.config.duration_ms:
            self.schedule(following, EventKind.CONTROLLER_UPDATE)

    def _on_loss_check(self, now: float, _: Any) -> None:
        self.declare_lost(now)
        if now < self.config.duration_ms or self.cca.outstanding > 0:
            self.schedule(now + LOSS_CHECK_INTERVAL_MS, EventKind.LOSS_CHECK)

    def declare_lost(self, now: float) -> List[LossEvent]:
        "Packets unacknowledged past their timeout are lost; no retransmission"
        declared = []
        while self._loss_deadlines and self._loss_deadlines[0][0] <= now:
            _, packet_id = heapq.heappop(self._loss_deadlines)
            packet = self.packets[packet_id]
            if packet.ack_time is not None or packet.declared_lost:
                continue
            packet.declared_lost = True
            self.cca.on_loss(packet_id, now)
            if packet.frame_id is not None:
                self._lost_frames.add(packet.frame_id)
                self.frames[packet.frame_id].display_time = None
            event = LossEvent(now, packet_id, packet.kind, packet.frame_id)
            declared.append(event)
            self.log_event(EventKind.LOSS_CHECK, packet_id=packet_id, kind=packet.kind.value)
        self.losses.extend(declared)
        if declared:
            self._wake_pacer(now)
        return declared

    def _on_drain(self, now: float, _: Any) -> None:
        self.pacer.draining = True
        self.log_event(EventKind.DRAIN, queued=len(self.pacer))
        self.logger.debug("Draining from %.3f ms, %i packets queued", now, len(self.pacer))


def run(config: SimConfig, logger: logging.Logger = logger) -> SimResult:
    return Simulation(config, logger).run()
