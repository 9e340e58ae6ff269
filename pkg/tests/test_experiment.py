import pytest

from app_config import load_config
from context_helper import ERROR_NAME, FINISHED, LOG_NAME
from experiment import (
    FAILED,
    OK,
    CompareException,
    ExperimentException,
    ExperimentPlan,
    compare,
    point_name,
    run_experiment,
)
from results import AGGREGATE_NAME, read_csv


def settings(**overrides):
    return dict(load_config(overrides={"DURATION_S": 2.0, **overrides}, ablate=False))


@pytest.fixture
def traces(trace_file):
    "A 12 Mbps and a 6 Mbps trace"
    return [
        trace_file(range(1, 1001), "fast.up"),
        trace_file(range(2, 1001, 2), "slow.up"),
    ]


def test_point_name():
    assert point_name(()) == "base"
    assert point_name((("CONTROLLER_P_MS", 20), ("SEED", 1))) == "controller_p_ms-20_seed-1"
    assert point_name((("DUMMY_ENABLED", False),)) == "dummy_enabled-false"


class TestPlan:
    def test_points(self, traces, tmp_path):
        plan = ExperimentPlan(
            settings(),
            tmp_path,
            traces,
            [("CONTROLLER_P_MS", [20, 33]), ("SEED", [1, 2, 3])],
        )
        assert plan.size == 12
        assert len(plan.points) == 6
        assert [name for _, name in plan.trace_names] == ["fast", "slow"]
        assert len(plan.tasks()) == 12

    def test_sweep_cap(self, traces, tmp_path):
        with pytest.raises(ExperimentException, match="more than the cap of 5"):
            ExperimentPlan(
                settings(), tmp_path, traces, [("CONTROLLER_P_MS", [20, 33, 66])], sweep_cap=5
            )

    def test_repeated_key(self, tmp_path):
        with pytest.raises(ExperimentException, match="SEED"):
            ExperimentPlan(settings(), tmp_path, sweep=[("SEED", [1]), ("SEED", [2])])

    def test_jobs(self, tmp_path):
        with pytest.raises(ExperimentException, match="jobs"):
            ExperimentPlan(settings(), tmp_path, jobs=0)

    def test_same_stem(self, trace_file, tmp_path):
        first = trace_file([1, 2], "a.up")
        (tmp_path / "other").mkdir()
        second = trace_file([1, 2], "other/a.up")
        with pytest.raises(ExperimentException, match="distinct stems"):
            ExperimentPlan(settings(), tmp_path / "out", [first, second])

    def test_invalid_point(self, traces, tmp_path):
        """A bad sweep value stops the experiment before anything runs"""
        plan = ExperimentPlan(
            settings(), tmp_path / "out", traces, [("CONTROLLER_LAMBDA", [0.5, 1.5])]
        )
        with pytest.raises(ExperimentException, match="controller_lambda-1.5"):
            run_experiment(plan)
        assert not (tmp_path / "out").exists()

    def test_configured_link(self, tmp_path):
        plan = ExperimentPlan(settings(LINK_PRESET="fixed_1500k"), tmp_path)
        assert plan.trace_names == [(None, "fixed_1500k")]


class TestRunExperiment:
    def test_sweep(self, traces, tmp_path):
        out = tmp_path / "out"
        plan = ExperimentPlan(settings(), out, traces, [("CONTROLLER_P_MS", [20, 33, 66])])
        report = run_experiment(plan)
        assert not report.failed
        assert report.aggregate == out / AGGREGATE_NAME
        for trace in ("fast", "slow"):
            for p_ms in (20, 33, 66):
                run_dir = out / trace / f"controller_p_ms-{p_ms}"
                assert (run_dir / FINISHED).exists()
                assert (run_dir / LOG_NAME).read_text()
                assert "p_ms = " + str(float(p_ms)) in (run_dir / "config.toml").read_text()
        rows = read_csv(report.aggregate)
        assert [(row["trace"], row["point"]) for row in rows] == [
            ("fast", "controller_p_ms-20"),
            ("fast", "controller_p_ms-33"),
            ("fast", "controller_p_ms-66"),
            ("slow", "controller_p_ms-20"),
            ("slow", "controller_p_ms-33"),
            ("slow", "controller_p_ms-66"),
        ]
        assert {row["status"] for row in rows} == {OK}

        first = report.aggregate.read_bytes()
        run_experiment(plan)
        assert report.aggregate.read_bytes() == first

    def test_failed_run_is_isolated(self, traces, tmp_path):
        """A missing trace fails its own run, the others still finish"""
        out = tmp_path / "out"
        plan = ExperimentPlan(settings(), out, [traces[0], tmp_path / "missing.up"])
        report = run_experiment(plan)
        assert [outcome.trace_name for outcome in report.failed] == ["missing"]
        assert "missing.up" in (out / "missing" / "base" / ERROR_NAME).read_text()
        assert not (out / "missing" / "base" / FINISHED).exists()
        assert (out / "fast" / "base" / FINISHED).exists()
        statuses = {row["trace"]: row["status"] for row in read_csv(report.aggregate)}
        assert statuses == {"fast": OK, "missing": FAILED}

    def test_ablation_sweep(self, traces, tmp_path):
        plan = ExperimentPlan(
            settings(), tmp_path, traces[:1], [("ABLATION", ["full", "copa_only"])]
        )
        run_experiment(plan)
        snapshot = (tmp_path / "fast" / "ablation-copa_only" / "config.toml").read_text()
        assert "enabled = false" in snapshot
        assert "safeguard_enabled = false" in snapshot


class TestCompare:
    def experiment(self, out, traces, sweep=()):
        return run_experiment(ExperimentPlan(settings(), out, traces, list(sweep)))

    def test_identical_runs(self, traces, tmp_path):
        self.experiment(tmp_path / "a", traces)
        self.experiment(tmp_path / "b", traces)
        rows = compare([tmp_path / "a", tmp_path / "b"], out=tmp_path / "compare.csv")
        assert [row["metric"] for row in rows][:2] == ["video_bitrate_mean", "video_bitrate_p50"]
        for row in rows:
            assert row["delta_b"] in (0.0, None)
        assert (tmp_path / "compare.csv").read_text().startswith("metric,a,b,delta_b\n")

    def test_different_traces(self, traces, tmp_path):
        self.experiment(tmp_path / "a", traces[:1])
        self.experiment(tmp_path / "b", traces[1:])
        with pytest.raises(CompareException, match="differ"):
            compare([tmp_path / "a", tmp_path / "b"])

    def test_sweep_points_are_columns(self, traces, tmp_path):
        self.experiment(tmp_path / "sweep", traces[:1], [("CONTROLLER_P_MS", [20, 33, 66])])
        (row, *_) = compare([tmp_path / "sweep"])
        assert list(row) == [
            "metric",
            "sweep/controller_p_ms-20",
            "sweep/controller_p_ms-33",
            "sweep/controller_p_ms-66",
            "delta_sweep/controller_p_ms-33",
            "delta_sweep/controller_p_ms-66",
        ]

    def test_needs_two_columns(self, traces, tmp_path):
        self.experiment(tmp_path / "a", traces[:1])
        with pytest.raises(CompareException, match="at least two"):
            compare([tmp_path / "a"])

    def test_unfinished(self, tmp_path):
        with pytest.raises(CompareException, match="not done"):
            compare([tmp_path, tmp_path])
