import pytest
from click.testing import CliRunner

from app import cli, expand_traces
from results import read_csv


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.toml"
    path.write_text("duration_s = 2.0\n")
    return path


def test_expand_traces(trace_file, tmp_path):
    first = trace_file([1, 2], "b.up")
    second = trace_file([1, 2], "a.up")
    assert expand_traces((str(tmp_path / "*.up"),)) == [second, first]
    assert expand_traces(("plain.up",))[0].name == "plain.up"


class TestRun:
    def test_sweep(self, runner, trace_file, short_config, tmp_path):
        trace = trace_file(range(1, 1001), "fast.up")
        out = tmp_path / "out"
        result = runner.invoke(
            cli,
            [
                "run",
                "--config", str(short_config),
                "--trace", str(trace),
                "--out", str(out),
                "--sweep", "controller.P_ms=20,33",
                "--seed", "3",
                "--event-log",
            ],
        )
        assert result.exit_code == 0, result.output
        assert str(out / "aggregate.csv") in result.output
        rows = read_csv(out / "aggregate.csv")
        assert [row["point"] for row in rows] == ["controller_p_ms-20", "controller_p_ms-33"]
        assert {row["seed"] for row in rows} == {"3"}
        assert (out / "fast" / "controller_p_ms-20" / "events.jsonl").exists()

    def test_ablations(self, runner, trace_file, short_config, tmp_path):
        trace = trace_file(range(1, 1001), "fast.up")
        result = runner.invoke(
            cli,
            [
                "run",
                "--config", str(short_config),
                "--trace", str(trace),
                "--out", str(tmp_path / "out"),
                "--ablation", "full",
                "--ablation", "no_dummy",
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "out" / "fast" / "ablation-no_dummy" / "finished").exists()

    def test_failed_run(self, runner, short_config, tmp_path):
        result = runner.invoke(
            cli,
            [
                "run",
                "--config", str(short_config),
                "--trace", str(tmp_path / "missing.up"),
                "--out", str(tmp_path / "out"),
            ],
        )
        assert result.exit_code == 1
        assert "1 of 1 runs failed" in result.output

    def test_bad_sweep(self, runner, tmp_path):
        result = runner.invoke(
            cli, ["run", "--out", str(tmp_path), "--sweep", "controller.P_ms"]
        )
        assert result.exit_code == 2
        assert "key=v1,v2" in result.output

    def test_unknown_key(self, runner, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("[link]\nowd = 3\n")
        result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(tmp_path)])
        assert result.exit_code == 2
        assert "LINK_OWD" in result.output

    def test_glob_without_match(self, runner, tmp_path):
        result = runner.invoke(
            cli, ["run", "--trace", str(tmp_path / "*.up"), "--out", str(tmp_path)]
        )
        assert result.exit_code == 2
        assert "nothing matches" in result.output


class TestAnalyze:
    def test_trace(self, runner, trace_file, tmp_path):
        """At 25 fps each 40 ms interval of a 1 ms trace holds 39 or 40
        opportunities; --eq3 names the same analysis as --ideal"""
        trace = trace_file(range(1, 1001), "fast.up")
        out = tmp_path / "analysis"
        result = runner.invoke(
            cli,
            ["analyze", "--eq3", "--trace", str(trace), "--alpha", "0.5,1.0",
             "--fps", "25", "--out", str(out), "--dat"],
        )
        assert result.exit_code == 0, result.output
        header, row = [line for line in result.output.splitlines() if "\t" in line][:2]
        assert header.split("\t") == [
            "trace",
            "frame_instants",
            "zero_capacity_frames",
            "p95_alpha_0.5",
            "p95_alpha_1.0",
        ]
        assert row.split("\t") == ["fast", "25", "0", "19.00", "39.00"]
        assert (out / "analysis.csv").exists()
        assert (out / "fast.dat").exists()

    def test_preset(self, runner, tmp_path):
        config = tmp_path / "preset.toml"
        config.write_text("[link]\npreset = \"fixed_1500k\"\n")
        result = runner.invoke(cli, ["analyze", "--ideal", "--config", str(config)])
        assert result.exit_code == 0, result.output
        rows = [line for line in result.output.splitlines() if "\t" in line]
        assert rows[1].startswith("fixed_1500k\t")

    def test_analysis_required(self, runner):
        result = runner.invoke(cli, ["analyze"])
        assert result.exit_code == 2

    def test_invalid_alpha(self, runner, trace_file):
        trace = trace_file([1, 2])
        result = runner.invoke(cli, ["analyze", "--ideal", "--trace", str(trace), "--alpha", "2"])
        assert result.exit_code == 2
        assert "alpha" in result.output


def test_compare(runner, trace_file, short_config, tmp_path):
    trace = trace_file(range(1, 1001), "fast.up")
    for name in ("a", "b"):
        result = runner.invoke(
            cli,
            ["run", "--config", str(short_config), "--trace", str(trace),
             "--out", str(tmp_path / name)],
        )
        assert result.exit_code == 0, result.output
    result = runner.invoke(
        cli,
        ["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out",
         str(tmp_path / "compare.csv")],
    )
    assert result.exit_code == 0, result.output
    header = next(line for line in result.output.splitlines() if "\t" in line)
    assert header == "metric\ta\tb\tdelta_b"
    assert (tmp_path / "compare.csv").exists()

    mismatch = runner.invoke(cli, ["compare", str(tmp_path / "a")])
    assert mismatch.exit_code == 2


class TestMakeTrace:
    def test_preset(self, runner, tmp_path):
        out = tmp_path / "fixed.up"
        result = runner.invoke(cli, ["make-trace", "--preset", "fixed_1500k", str(out)])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[:3] == ["8", "16", "24"]
        assert len(lines) == 124

    def test_segments(self, runner, tmp_path):
        out = tmp_path / "steps.up"
        result = runner.invoke(
            cli, ["make-trace", "--segments", "[[100, 1.2e6], [100, 2.4e6]]", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) == 29

    def test_one_source(self, runner, tmp_path):
        result = runner.invoke(cli, ["make-trace", str(tmp_path / "x.up")])
        assert result.exit_code == 2
        result = runner.invoke(cli, ["make-trace", "--segments", "[[1]]", str(tmp_path / "x.up")])
        assert result.exit_code == 2


def test_encoder_step(runner, tmp_path):
    out = tmp_path / "step.csv"
    result = runner.invoke(
        cli, ["encoder-step", "--schedule", "1:5e5,1:2e6", "--duration-s", "4", str(out)]
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out)
    assert len(rows) == 120
    assert float(rows[0]["frame_bytes"]) == pytest.approx(5e5 / 30 / 8, abs=1)
    assert {float(row["target_bps"]) for row in rows} == {5e5, 2e6}

    bad = runner.invoke(cli, ["encoder-step", "--schedule", "1-5e5", str(out)])
    assert bad.exit_code == 2
