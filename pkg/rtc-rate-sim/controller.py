#!/usr/bin/env python
"""Encoder rate controller: picks the fraction alpha of the CC-Rate whose
counterfactual frame service times meet the latency target, and pauses the
encoder when the pacer queue gets stale"""
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from args_helper import check_field
from transport import ServiceTimeSample

logger = logging.getLogger(__name__)


class SafeguardAction(str, Enum):
    PAUSE = "pause"
    RESUME = "resume"
    NO_CHANGE = "no_change"


@dataclass(frozen=True)
class ControllerConfig:
    lam: float = 0.9
    p_ms: float = 33.0
    t_s: float = 1.0
    tau_ms: float = 33.0
    ewma_weight: float = 0.5
    alpha_floor: float = 0.1
    bitrate_selection_enabled: bool = True
    safeguard_enabled: bool = True

    def __post_init__(self):
        check_field(0 < self.lam < 1, "lambda", "must be in (0, 1)")
        check_field(self.p_ms > 0, "p_ms", "must be > 0")
        check_field(self.t_s > 0, "t_s", "must be > 0")
        check_field(self.tau_ms > 0, "tau_ms", "must be > 0")
        check_field(0 < self.ewma_weight <= 1, "ewma_weight", "must be in (0, 1]")
        check_field(0 < self.alpha_floor <= 1, "alpha_floor", "must be in (0, 1]")


class AlphaPoint(NamedTuple):
    time: float
    alpha_raw: float
    alpha: float
    cc_rate: float
    samples: int


def percentile(values: Iterable[float], q: float) -> float:
    """Linear interpolation between the closest ranks; q is a fraction"""
    array = np.asarray(list(values), dtype=float)
    if array.size == 0:
        raise ValueError("percentile of an empty set")
    return float(np.percentile(array, q * 100, method="linear"))


def normalized_service_times(
    samples: Sequence[ServiceTimeSample], cc_rate: float
) -> np.ndarray:
    "d_i rescaled to what it would be had frame i been encoded at the CC-Rate"
    if cc_rate <= 0:
        raise ValueError(f"cc_rate {cc_rate} must be positive")
    d = np.fromiter((s.d_i for s in samples), dtype=float, count=len(samples))
    tr = np.fromiter((s.tr_i for s in samples), dtype=float, count=len(samples))
    if np.any(tr <= 0):
        raise ValueError("a service time sample has a non-positive target bitrate")
    return d * cc_rate / tr


def compute_alpha(
    samples: Sequence[ServiceTimeSample],
    cc_rate: float,
    config: ControllerConfig,
    current: float = 1.0,
) -> float:
    if not samples:
        return current
    normalized = normalized_service_times(samples, cc_rate)
    return min(config.p_ms / percentile(normalized, config.lam), 1.0)


def safeguard_check(
    pacer_oldest_age: float, paused: bool, pacer_empty: bool, config: ControllerConfig
) -> SafeguardAction:
    if not paused and pacer_oldest_age > config.tau_ms:
        return SafeguardAction.PAUSE
    if paused and pacer_empty:
        return SafeguardAction.RESUME
    return SafeguardAction.NO_CHANGE


class RateController:
    def __init__(self, config: ControllerConfig, logger: logging.Logger = logger):
        self.config = config
        self.logger = logger
        self.alpha = 1.0
        self.last_update = 0.0
        self.samples = deque()  # type: Deque[ServiceTimeSample]
        self.series = []  # type: List[AlphaPoint]

    def add_samples(self, samples: Iterable[ServiceTimeSample]) -> None:
        self.samples.extend(samples)

    def _evict(self, now: float) -> None:
        horizon = now - self.config.t_s * 1000
        while self.samples and self.samples[0].completion_time <= horizon:
            self.samples.popleft()

    def on_update_tick(self, cc_rate: float, now: float) -> float:
        self._evict(now)
        alpha_raw = compute_alpha(list(self.samples), cc_rate, self.config, self.alpha)
        weight = self.config.ewma_weight
        alpha = (1 - weight) * self.alpha + weight * alpha_raw
        self.alpha = min(max(alpha, self.config.alpha_floor), 1.0)
        self.last_update = now
        self.series.append(
            AlphaPoint(now, alpha_raw, self.alpha, cc_rate, len(self.samples))
        )
        self.logger.debug(
            "alpha %.3f (raw %.3f) from %i samples at %.0f ms, cc_rate %.0f",
            self.alpha,
            alpha_raw,
            len(self.samples),
            now,
            cc_rate,
        )
        return self.alpha * cc_rate

    def target_bitrate(self, cc_rate: float) -> float:
        if not self.config.bitrate_selection_enabled:
            return cc_rate
        return self.alpha * cc_rate

    def safeguard(
        self, pacer_oldest_age: float, paused: bool, pacer_empty: bool
    ) -> Optional[SafeguardAction]:
        if not self.config.safeguard_enabled:
            return None
        return safeguard_check(pacer_oldest_age, paused, pacer_empty, self.config)
