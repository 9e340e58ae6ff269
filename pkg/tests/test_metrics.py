import math

import numpy as np
import pytest

from controller import AlphaPoint
from link import PRESETS, LinkKind, LinkModel, load_trace
from metrics import (
    MetricsException,
    convergence_time,
    ideal_transmission_analysis,
    last_step_up,
    summarize,
    video_bitrate_series,
    wire_bytes_series,
)
from records import FrameRecord, Packet, PacketKind
from transport import ServiceTimeSample

DELTA = 1000 / 30


def piecewise(*segments) -> LinkModel:
    return LinkModel(LinkKind.PIECEWISE_CONSTANT, segments=tuple(segments))


def arrived(packet_id: int, kind: PacketKind, size: int, time: float) -> Packet:
    return Packet(packet_id, kind, size, delivery_time=time - 25.0, arrival_time=time)


class TestIdealTransmission:
    @pytest.mark.parametrize("alpha", [0.5, 0.75, 1.0])
    def test_constant_rate(self, fixed_link, alpha):
        """On a constant link a frame sized for alpha of a frame interval takes alpha * delta"""
        analysis = ideal_transmission_analysis(fixed_link(1.2e6), [alpha], DELTA)
        assert analysis.samples[alpha] == pytest.approx(alpha * DELTA)
        assert analysis.p95[alpha] == pytest.approx(alpha * DELTA)
        assert analysis.zero_capacity_frames == 0

    def test_rate_halves_after_production(self):
        """A frame sized at 2 Mbps that leaves on a 1 Mbps link takes twice as long"""
        link = piecewise((100 + 1e-6, 2e6), (1000.0, 1e6))
        analysis = ideal_transmission_analysis(link, [1.0], 100.0, duration_ms=300.0)
        assert analysis.samples[1.0].tolist() == pytest.approx([100.0, 200.0, 100.0], abs=1e-3)

    def test_trace(self, trace_file):
        """A frame at t is done at the opportunity carrying its last byte: 33
        opportunities fall into every frame interval of a 1 ms trace"""
        link = load_trace(trace_file(range(1, 1001)))
        analysis = ideal_transmission_analysis(link, [0.5, 1.0], DELTA)
        assert analysis.frame_instants == 30
        assert analysis.samples[1.0][:3].tolist() == pytest.approx([33.0, 32.667, 32.333], abs=1e-3)
        assert analysis.samples[0.5][:3].tolist() == pytest.approx([17.0, 16.667, 16.333], abs=1e-3)

    @pytest.mark.parametrize("alpha, expected", [(1.0, 25.0), (0.5, 20.0), (0.2, 5.0)])
    def test_trace_bursts(self, trace_file, alpha, expected):
        """Opportunities at 5, 5, 20, 25, 25 fall into the first frame interval;
        the frame needs ceil(alpha * 5) of them"""
        link = load_trace(trace_file([5, 5, 20]))
        analysis = ideal_transmission_analysis(link, [alpha], DELTA, duration_ms=1.0)
        assert analysis.samples[alpha].tolist() == [expected]

    def test_trace_set_monotone_in_alpha(self, trace_set):
        """On every trace a larger frame share never lowers the P95 of T"""
        for link in trace_set:
            analysis = ideal_transmission_analysis(link, [0.5, 0.75, 0.9, 1.0], DELTA)
            p95 = [analysis.p95[alpha] for alpha in analysis.alpha_grid]
            assert p95 == sorted(p95)

    def test_monotone_in_alpha(self):
        link = piecewise(*PRESETS["alternating"])
        analysis = ideal_transmission_analysis(link, [0.25, 0.5, 0.75, 1.0], DELTA)
        p95 = [analysis.p95[alpha] for alpha in analysis.alpha_grid]
        assert p95 == sorted(p95)

    def test_outage_frames_are_counted(self):
        link = piecewise((500.0, 2e6), (500.0, 0.0))
        analysis = ideal_transmission_analysis(link, [1.0], 100.0)
        assert analysis.frame_instants == 10
        assert analysis.zero_capacity_frames == 5
        assert len(analysis.samples[1.0]) == 5

    def test_invalid_alpha(self, fixed_link):
        with pytest.raises(MetricsException, match="alpha"):
            ideal_transmission_analysis(fixed_link(1e6), [0.0, 1.0])
        with pytest.raises(MetricsException, match="alpha"):
            ideal_transmission_analysis(fixed_link(1e6), [1.5])

    def test_poisson_link(self):
        link = LinkModel(LinkKind.POISSON_RATE, mean_rate_bps=1e6)
        with pytest.raises(MetricsException, match="deterministic"):
            ideal_transmission_analysis(link)


class TestSummarize:
    def test_empty_run(self, fixed_link):
        with pytest.raises(MetricsException):
            summarize([], [], fixed_link(1e6), 1000.0)

    def test_padding_ratio(self, fixed_link):
        dummies = [arrived(i, PacketKind.DUMMY, 200, 100.0 + i) for i in range(10)]
        summary = summarize([], dummies, fixed_link(1e6), 2000.0)
        assert summary.padding_ratio == 1.0
        assert summary.video_bitrate_mean == 0
        assert math.isnan(summary.latency_p50)

        video = [arrived(i, PacketKind.VIDEO, 1000, 100.0 + i) for i in range(10)]
        summary = summarize([], video, fixed_link(1e6), 2000.0)
        assert summary.padding_ratio == 0.0
        assert summary.video_bitrate_mean == pytest.approx(10 * 1000 * 8 / 2.0)

    def test_frames(self, fixed_link):
        frames = []
        for frame_id in range(100):
            frame = FrameRecord(frame_id, frame_id * DELTA, skipped=frame_id % 10 == 9)
            if not frame.skipped:
                frame.display_time = frame.read_time + 50.0 + frame_id
            frame.latency = 50.0 + frame_id
            frames.append(frame)
        packets = [arrived(0, PacketKind.VIDEO, 1000, 100.0)]
        samples = [ServiceTimeSample(i, float(i), 1e6, 0.0) for i in range(1, 11)]
        alpha = [AlphaPoint(0.0, 1.0, 1.0, 1e6, 1), AlphaPoint(33.0, 0.5, 0.5, 1e6, 1)]
        summary = summarize(frames, packets, fixed_link(1e6), 4000.0, alpha, samples)
        assert summary.frames == 100
        assert summary.skipped_frames == 10
        assert summary.frame_rate == pytest.approx(90 / 4.0)
        assert summary.latency_p50 == pytest.approx(99.5)
        assert summary.latency_mean == pytest.approx(99.5)
        assert summary.service_p90 == pytest.approx(9.1)
        assert summary.alpha_mean == pytest.approx(0.75)
        assert summary.convergence_s is None

    def test_losses(self, fixed_link):
        packets = [
            arrived(0, PacketKind.VIDEO, 1000, 100.0),
            Packet(1, PacketKind.VIDEO, 1000, dropped=True),
            Packet(2, PacketKind.VIDEO, 1000, declared_lost=True),
        ]
        assert summarize([], packets, fixed_link(1e6), 1000.0).lost_packets == 2

    def test_as_row(self, fixed_link):
        row = summarize(
            [], [arrived(0, PacketKind.VIDEO, 1000, 100.0)], fixed_link(1e6), 1000.0
        ).as_row()
        assert row["frames"] == 0
        assert "latency_p95" in row and "convergence_s" in row


class TestSeries:
    def test_wire_bytes(self):
        packets = [
            Packet(0, PacketKind.VIDEO, 1500, delivery_time=50.0),
            Packet(1, PacketKind.DUMMY, 200, delivery_time=150.0),
            Packet(2, PacketKind.VIDEO, 1500, delivery_time=160.0),
            Packet(3, PacketKind.VIDEO, 1500),
        ]
        assert wire_bytes_series(packets, 100.0).tolist() == [1500, 1700, 0]
        assert wire_bytes_series(packets, 100.0, end_ms=100.0).tolist() == [1500]

    def test_wire_bytes_follow_service(self):
        """A packet served over [50, 250] spreads its bytes across three bins"""
        packets = [
            Packet(0, PacketKind.VIDEO, 2000, service_start=50.0, delivery_time=250.0)
        ]
        assert wire_bytes_series(packets, 100.0).tolist() == pytest.approx(
            [500, 1000, 500, 0]
        )

    def test_video_bitrate(self):
        packets = [arrived(i, PacketKind.VIDEO, 1250, i * 100.0) for i in range(10)]
        packets.append(arrived(10, PacketKind.DUMMY, 200, 500.0))
        times, bitrates = video_bitrate_series(packets, end_ms=1000.0)
        assert times.tolist() == [1000.0]
        # the arrival at 0 has left the trailing second
        assert bitrates.tolist() == [9 * 1250 * 8]

    def test_no_video(self):
        times, bitrates = video_bitrate_series([], end_ms=2000.0)
        assert times.tolist() == [1000.0, 1100.0, 1200.0, 1300.0, 1400.0, 1500.0,
                                  1600.0, 1700.0, 1800.0, 1900.0, 2000.0]
        assert not bitrates.any()

    def test_convergence_time(self):
        times = np.array([0.0, 100.0, 200.0, 300.0])
        series = np.array([10.0, 5.0, 9.0, 10.0])
        assert convergence_time(times, series, 10.0, 50.0) == pytest.approx(0.15)
        assert convergence_time(times, series, 100.0, 50.0) is None

    def test_last_step_up(self, fixed_link):
        link = piecewise(*PRESETS["alternating"])
        assert last_step_up(link, 80_000.0) is None
        assert last_step_up(link, 100_000.0) == (80_000.0, 2e6)
        assert last_step_up(fixed_link(1e6), 10_000.0) is None
