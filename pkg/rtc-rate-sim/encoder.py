#!/usr/bin/env python
"""Parametric video encoder: frame sizes follow the commanded target bitrate
with a first-order lag and lognormal noise"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from args_helper import check_field
from records import Frame

logger = logging.getLogger(__name__)

# EncoderConfig fields each motion preset sets.
# A static scene repeats the same frame and cannot spend its whole target.
PRESETS = {
    "steady": {"noise_cv": 0.0, "fill_ratio": 0.7},
    "low_motion": {"noise_cv": 0.3, "fill_ratio": 1.0},
    "high_motion": {"noise_cv": 0.7, "fill_ratio": 1.0},
}  # type: Dict[str, Dict[str, float]]


@dataclass(frozen=True)
class EncoderConfig:
    fps: float = 30.0
    lag_up_s: float = 0.9
    lag_down_s: float = 0.45
    noise_cv: float = 0.3
    # Share of the target bitrate the content fills
    fill_ratio: float = 1.0
    min_frame_bytes: int = 100
    max_video_bitrate_bps: float = math.inf

    def __post_init__(self):
        check_field(self.fps > 0, "fps", "must be > 0")
        check_field(self.lag_down_s >= 0, "lag_down_s", "must be >= 0")
        check_field(
            self.lag_up_s >= self.lag_down_s, "lag_up_s", "must be >= lag_down_s"
        )
        check_field(self.noise_cv >= 0, "noise_cv", "must be >= 0")
        check_field(
            0 < self.fill_ratio <= 1, "fill_ratio", "must be in (0, 1]"
        )
        check_field(self.min_frame_bytes >= 1, "min_frame_bytes", "must be >= 1")
        check_field(
            self.max_video_bitrate_bps > 0, "max_video_bitrate_bps", "must be > 0"
        )

    @property
    def delta_ms(self) -> float:
        return 1000 / self.fps

    @classmethod
    def from_preset(cls, preset: str, **kwargs) -> "EncoderConfig":
        if preset not in PRESETS:
            raise ValueError(
                f"unknown encoder preset {preset}, use one of {', '.join(PRESETS)}"
            )
        for field, value in PRESETS[preset].items():
            kwargs.setdefault(field, value)
        return cls(**kwargs)


@dataclass(frozen=True)
class Skipped:
    frame_id: int
    read_time: float
    target_bitrate: float


class Encoder:
    def __init__(
        self,
        config: EncoderConfig,
        rng: Optional[np.random.Generator] = None,
        logger: logging.Logger = logger,
    ):
        self.config = config
        self.logger = logger
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self.effective_bitrate = None  # type: Optional[float]
        self.paused = False
        self.encoded = 0
        self.skipped = 0
        self._next_id = 0
        self._last_encode = None  # type: Optional[float]
        sigma2 = math.log1p(config.noise_cv**2)
        self._sigma = math.sqrt(sigma2)
        # mean of the lognormal noise is exactly 1
        self._mu = -sigma2 / 2

    @property
    def counters(self) -> Tuple[int, int]:
        return self.encoded, self.skipped

    def pause(self) -> None:
        if not self.paused:
            self.logger.debug("Encoder paused")
        self.paused = True

    def resume(self) -> None:
        if self.paused:
            self.logger.debug("Encoder resumed")
        self.paused = False

    def _track(self, target: float, now: float) -> float:
        if self.effective_bitrate is None or self._last_encode is None:
            return target
        current = self.effective_bitrate
        lag = self.config.lag_up_s if target > current else self.config.lag_down_s
        if lag <= 0:
            return target
        elapsed = (now - self._last_encode) / 1000
        return target + (current - target) * math.exp(-elapsed / lag)

    def noise(self) -> float:
        if self.config.noise_cv == 0:
            return 1.0
        return float(self._rng.lognormal(self._mu, self._sigma))

    def encode(self, target_bitrate: float, now: float) -> Union[Frame, Skipped]:
        """Called on every camera tick. A zero target is the pause signal"""
        if target_bitrate < 0:
            raise ValueError(f"target bitrate {target_bitrate} must not be negative")
        frame_id = self._next_id
        self._next_id += 1
        target = min(target_bitrate, self.config.max_video_bitrate_bps)
        if self.paused or target == 0:
            self.skipped += 1
            return Skipped(frame_id, now, target)

        self.effective_bitrate = self._track(target, now)
        self._last_encode = now
        size = round(
            self.effective_bitrate
            * self.config.delta_ms
            / 1000
            * self.config.fill_ratio
            * self.noise()
            / 8
        )
        self.encoded += 1
        return Frame(
            frame_id=frame_id,
            read_time=now,
            size_bytes=max(self.config.min_frame_bytes, size),
            target_bitrate=target,
        )


def step_response(
    config: EncoderConfig,
    schedule: Sequence[Tuple[float, float]],
    duration_s: float,
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[float, float, int]]:
    """Drive the encoder with a looping schedule of (duration_s, target bits/s)
    steps and return (time ms, target, frame bytes) per camera tick"""
    if not schedule or any(duration <= 0 for duration, _ in schedule):
        raise ValueError("the schedule needs steps with positive durations")
    period = sum(duration for duration, _ in schedule)
    encoder = Encoder(config, rng)
    series = []
    ticks = int(round(duration_s * config.fps))
    for tick in range(ticks):
        now = tick * config.delta_ms
        offset = (now / 1000) % period
        for duration, target in schedule:
            if offset < duration:
                break
            offset -= duration
        result = encoder.encode(target, now)
        size = result.size_bytes if isinstance(result, Frame) else 0
        series.append((now, target, size))
    return series
