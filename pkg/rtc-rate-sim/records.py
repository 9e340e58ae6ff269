#!/usr/bin/env python
"""Packets, frames and the per-frame/per-packet records a run produces"""
from dataclasses import dataclass, fields
from enum import Enum
from typing import Iterable, List, Optional, Tuple


class PacketKind(str, Enum):
    VIDEO = "video"
    DUMMY = "dummy"
    # Full-size packets of a backlogged source
    BULK = "bulk"


@dataclass(slots=True)
class Packet:
    packet_id: int
    kind: PacketKind
    size: int
    frame_id: Optional[int] = None
    first_of_frame: bool = False
    last_of_frame: bool = False
    pacer_enqueue_time: Optional[float] = None
    send_time: Optional[float] = None
    # The bottleneck serves the packet over [service_start, delivery_time]
    service_start: Optional[float] = None
    delivery_time: Optional[float] = None
    arrival_time: Optional[float] = None
    ack_time: Optional[float] = None
    dropped: bool = False
    declared_lost: bool = False

    @property
    def is_video(self) -> bool:
        return self.kind == PacketKind.VIDEO


@dataclass(frozen=True, slots=True)
class Frame:
    frame_id: int
    read_time: float
    size_bytes: int
    target_bitrate: float


@dataclass(slots=True)
class FrameRecord:
    frame_id: int
    read_time: float
    size_bytes: int = 0
    target_bitrate: float = 0.0
    skipped: bool = False
    packets: int = 0
    received_packets: int = 0
    display_time: Optional[float] = None
    latency: Optional[float] = None
    service_time: Optional[float] = None

    @property
    def delivered(self) -> bool:
        return self.display_time is not None


def record_columns(record_type: type) -> Tuple[str, ...]:
    return tuple(f.name for f in fields(record_type))


def fill_latencies(frames: List[FrameRecord]) -> None:
    """Set latency = display_time - read_time for displayed frames. Skipped and
    undelivered frames take the display time of the next displayed frame; the
    tail after the last displayed frame keeps latency None"""
    next_display = None  # type: Optional[float]
    for frame in reversed(frames):
        if frame.display_time is not None:
            next_display = frame.display_time
            frame.latency = frame.display_time - frame.read_time
        elif next_display is not None:
            frame.latency = next_display - frame.read_time
        else:
            frame.latency = None


def delivered_bytes(packets: Iterable[Packet]) -> Tuple[int, int]:
    "(payload bytes, dummy bytes) that reached the receiver; bulk counts as payload"
    payload = dummy = 0
    for packet in packets:
        if packet.arrival_time is None:
            continue
        if packet.kind == PacketKind.DUMMY:
            dummy += packet.size
        else:
            payload += packet.size
    return payload, dummy
