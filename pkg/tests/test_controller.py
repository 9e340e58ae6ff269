import math

import numpy as np
import pytest

from args_helper import FieldError
from controller import (
    ControllerConfig,
    RateController,
    SafeguardAction,
    compute_alpha,
    normalized_service_times,
    percentile,
    safeguard_check,
)
from transport import ServiceTimeSample


def sample(d_i: float, tr_i: float = 1e6, completion: float = 0.0) -> ServiceTimeSample:
    return ServiceTimeSample(0, d_i, tr_i, completion)


def closest_ranks(values, q: float) -> float:
    ordered = sorted(values)
    rank = q * (len(ordered) - 1)
    low = math.floor(rank)
    high = min(low + 1, len(ordered) - 1)
    return ordered[low] + (rank - low) * (ordered[high] - ordered[low])


class TestPercentile:
    def test_single_value(self):
        assert percentile([30.0], 0.9) == 30.0

    def test_interpolates_between_ranks(self):
        values = [10, 12, 14, 16, 18, 20, 22, 24, 26, 66]
        assert percentile(values, 0.9) == pytest.approx(30.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            values = rng.exponential(30.0, size=rng.integers(1, 50)).tolist()
            q = float(rng.uniform(0.5, 0.99))
            assert percentile(values, q) == pytest.approx(closest_ranks(values, q))

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            percentile([], 0.9)


class TestComputeAlpha:
    def test_below_target_caps_at_one(self):
        config = ControllerConfig(p_ms=33.0, lam=0.9)
        assert compute_alpha([sample(30.0)], 1e6, config) == 1.0

    def test_tail_sets_alpha(self):
        config = ControllerConfig(p_ms=24.0, lam=0.9)
        samples = [sample(d) for d in (10, 12, 14, 16, 18, 20, 22, 24, 26, 66)]
        assert compute_alpha(samples, 1e6, config) == pytest.approx(0.8)

    def test_normalization(self):
        """A frame encoded at half the CC-Rate would have taken twice as long"""
        normalized = normalized_service_times([sample(10.0, tr_i=5e5)], 1e6)
        assert normalized.tolist() == [20.0]

    def test_formula(self):
        rng = np.random.default_rng(17)
        config = ControllerConfig()
        for _ in range(1000):
            size = int(rng.integers(1, 40))
            d = rng.uniform(1.0, 200.0, size)
            tr = rng.uniform(1e5, 5e6, size)
            cc_rate = float(rng.uniform(1e5, 5e6))
            samples = [sample(float(a), float(b)) for a, b in zip(d, tr)]
            expected = min(
                config.p_ms / closest_ranks((d * cc_rate / tr).tolist(), config.lam), 1.0
            )
            assert compute_alpha(samples, cc_rate, config) == pytest.approx(
                expected, rel=1e-9
            )

    def test_monotone(self):
        rng = np.random.default_rng(23)
        samples = [sample(float(d)) for d in rng.exponential(40.0, 30)]
        by_p = [
            compute_alpha(samples, 1e6, ControllerConfig(p_ms=p)) for p in (10, 20, 33, 66)
        ]
        by_lam = [
            compute_alpha(samples, 1e6, ControllerConfig(lam=lam))
            for lam in (0.5, 0.7, 0.9, 0.99)
        ]
        assert by_p == sorted(by_p)
        assert by_lam == sorted(by_lam, reverse=True)

    def test_no_samples_keeps_current(self):
        assert compute_alpha([], 1e6, ControllerConfig(), current=0.4) == 0.4

    def test_invalid_target(self):
        with pytest.raises(ValueError, match="non-positive"):
            compute_alpha([sample(10.0, tr_i=0.0)], 1e6, ControllerConfig())
        with pytest.raises(ValueError, match="cc_rate"):
            normalized_service_times([sample(10.0)], 0.0)


class TestRateController:
    def test_ewma_step(self):
        controller = RateController(ControllerConfig(p_ms=33.0, ewma_weight=0.5))
        controller.add_samples([sample(66.0, completion=0.0)])
        target = controller.on_update_tick(1e6, 500.0)
        assert controller.alpha == pytest.approx(0.75)
        assert target == pytest.approx(0.75e6)
        point = controller.series[-1]
        assert point.alpha_raw == pytest.approx(0.5)
        assert point.samples == 1

    def test_eviction(self):
        """Samples older than T leave the window"""
        controller = RateController(ControllerConfig(t_s=1.0))
        controller.add_samples([sample(660.0, completion=0.0)])
        controller.on_update_tick(1e6, 1000.0)
        assert controller.alpha == 1.0
        assert not controller.samples

    def test_floor(self):
        controller = RateController(ControllerConfig(ewma_weight=1.0, alpha_floor=0.1))
        controller.add_samples([sample(10_000.0, completion=100.0)])
        controller.on_update_tick(1e6, 200.0)
        assert controller.alpha == 0.1

    def test_selection_disabled(self):
        controller = RateController(ControllerConfig(bitrate_selection_enabled=False))
        controller.alpha = 0.5
        assert controller.target_bitrate(2e6) == 2e6
        assert RateController(ControllerConfig()).target_bitrate(2e6) == 2e6

    def test_safeguard_disabled(self):
        controller = RateController(ControllerConfig(safeguard_enabled=False))
        assert controller.safeguard(100.0, False, False) is None
        enabled = RateController(ControllerConfig())
        assert enabled.safeguard(100.0, False, False) == SafeguardAction.PAUSE


class TestSafeguard:
    @pytest.mark.parametrize(
        "age, paused, empty, action",
        [
            (40.0, False, False, SafeguardAction.PAUSE),
            (0.0, True, True, SafeguardAction.RESUME),
            (33.0, False, False, SafeguardAction.NO_CHANGE),
            (50.0, True, False, SafeguardAction.NO_CHANGE),
            (10.0, False, False, SafeguardAction.NO_CHANGE),
        ],
    )
    def test_actions(self, age, paused, empty, action):
        assert safeguard_check(age, paused, empty, ControllerConfig(tau_ms=33.0)) == action


class TestConfig:
    def test_lambda_range(self):
        with pytest.raises(FieldError, match="lambda"):
            ControllerConfig(lam=1.0)

    @pytest.mark.parametrize(
        "field, value",
        [("p_ms", 0), ("t_s", -1), ("tau_ms", 0), ("ewma_weight", 0), ("alpha_floor", 2)],
    )
    def test_ranges(self, field, value):
        with pytest.raises(FieldError, match=field):
            ControllerConfig(**{field: value})
