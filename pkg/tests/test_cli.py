"""Tests for the command-line interface: exit codes, determinism,
embedded-config round trips, and report formats."""

import json

import pytest

from occupancy import cli, markov


def run_cli(capsys, argv):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def csv_rows(text):
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def embedded_config(text):
    first = text.splitlines()[0]
    assert first.startswith("# config ")
    return json.loads(first[len("# config ") :])


class TestExitCodes:
    def test_success(self, capsys):
        code, out, _ = run_cli(capsys, ["solve-w", "--dist", "gamma22", "--delta", "2"])
        assert code == 0
        assert "0.618033989" in out
        assert "0.381966011" in out

    def test_verify_rejects_deterministic_lifetime(self, capsys):
        code, _, err = run_cli(
            capsys, ["verify", "--dist", "det1", "--delta", "0.5"]
        )
        assert code == 2
        assert "phase-type" in err

    def test_unknown_distribution(self, capsys):
        code, _, err = run_cli(capsys, ["verify", "--dist", "nope", "--delta", "1"])
        assert code == 2
        assert "not a built-in" in err

    def test_tolerance_breach(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "verify",
                "--dist",
                "exp1",
                "--delta",
                "0.5",
                "--kmax",
                "2",
                "--ntrunc",
                "40",
                "--tol",
                "1e-30",
            ],
        )
        assert code == 1
        assert "FAIL" in out

    def test_numerical_failure(self, capsys, monkeypatch):
        def boom(*args, **kwargs):
            raise markov.NumericalError("forced failure")

        monkeypatch.setattr(cli.markov, "solve_w", boom)
        code, _, err = run_cli(capsys, ["solve-w", "--dist", "exp1", "--delta", "2"])
        assert code == 3
        assert "numerical failure" in err

    def test_usage_error_is_config_error(self, capsys):
        # argparse maps unknown flags to exit 2 as well
        assert cli.main(["verify", "--dist", "exp1", "--delta", "1", "--nope"]) == 2
        capsys.readouterr()

    def test_missing_required_setting(self, capsys):
        code, _, err = run_cli(capsys, ["verify", "--delta", "1"])
        assert code == 2
        assert "--dist is required" in err

    def test_estimate_requires_exactly_one_source(self, capsys):
        code, _, err = run_cli(capsys, ["estimate"])
        assert code == 2
        code, _, err = run_cli(
            capsys, ["estimate", "--from-ak", "0.25", "--from-t", "2"]
        )
        assert code == 2

    def test_estimate_from_ak_needs_level_and_regime(self, capsys):
        code, _, err = run_cli(capsys, ["estimate", "--from-ak", "0.25"])
        assert code == 2
        assert "--k" in err


class TestPinnedExamples:
    def test_estimate_from_extinction_time(self, capsys):
        code, out, _ = run_cli(capsys, ["estimate", "--from-t", "2"])
        assert code == 0
        assert "0.79681213" in out

    def test_estimate_at_boundary_returns_zero(self, capsys):
        code, out, _ = run_cli(capsys, ["estimate", "--from-t", "1"])
        assert code == 0
        assert csv_rows(out)[0]["delta_hat"] == "0"

    def test_estimate_from_occupation_round_trip(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["estimate", "--from-ak", "0.25", "--k", "2", "--regime", "sub"],
        )
        assert code == 0
        assert float(csv_rows(out)[0]["delta_hat"]) == pytest.approx(0.5, abs=1e-12)

    def test_verify_meets_default_tolerances(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["verify", "--dist", "mix", "--delta", "0.5", "--kmax", "3", "--ntrunc", "60"],
        )
        assert code == 0
        rows = csv_rows(out)
        assert all(r["status"] == "pass" for r in rows)

    def test_simulate_matches_theory_for_deterministic_lifetime(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "simulate",
                "--dist",
                "det1",
                "--delta",
                "0.5",
                "--reps",
                "4000",
                "--kmax",
                "3",
                "--seed",
                "42",
            ],
        )
        assert code == 0
        for row in csv_rows(out):
            assert abs(float(row["z_score"])) <= 4.0

    def test_simulate_critical_reports_capping(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "simulate",
                "--dist",
                "exp1",
                "--delta",
                "1",
                "--reps",
                "1000",
                "--kmax",
                "2",
                "--event-cap",
                "500",
                "--seed",
                "7",
            ],
        )
        assert code == 0
        rows = csv_rows(out)
        assert float(rows[0]["capped_frac"]) > 0.0


class TestDeterminismAndConfig:
    def test_reruns_are_byte_identical(self, capsys, tmp_path):
        args = [
            "simulate",
            "--dist",
            "mix",
            "--delta",
            "0.5",
            "--reps",
            "1500",
            "--seed",
            "9",
        ]
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_embedded_config_reproduces_the_report(self, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys,
            [
                "simulate",
                "--dist",
                "gamma22",
                "--delta",
                "0.6",
                "--reps",
                "1200",
                "--kmax",
                "2",
                "--seed",
                "11",
            ],
        )
        assert code == 0
        cfg = embedded_config(out)
        cfg_file = tmp_path / "replay.json"
        cfg_file.write_text(json.dumps(cfg))
        # the config file alone supplies every setting, required ones included
        code2, out2, _ = run_cli(capsys, ["simulate", "--config", str(cfg_file)])
        assert code2 == 0
        assert out2 == out

    def test_config_file_overrides_flags(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"delta": 2.0}))
        code, out, _ = run_cli(
            capsys,
            ["solve-w", "--dist", "gamma22", "--delta", "1", "--config", str(cfg)],
        )
        assert code == 0
        assert embedded_config(out)["delta"] == 2.0
        assert "0.618033989" in out

    def test_unknown_config_key_rejected(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        code, _, err = run_cli(
            capsys,
            ["solve-w", "--dist", "gamma22", "--delta", "2", "--config", str(cfg)],
        )
        assert code == 2
        assert "bogus" in err

    def test_malformed_config_rejected(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("not json{")
        code, _, err = run_cli(
            capsys,
            ["solve-w", "--dist", "gamma22", "--delta", "2", "--config", str(cfg)],
        )
        assert code == 2

    def test_workers_environment_default(self, capsys, monkeypatch):
        monkeypatch.setenv("OCCUPANCY_WORKERS", "3")
        code, out, _ = run_cli(capsys, ["estimate", "--from-t", "2"])
        assert code == 0
        assert embedded_config(out)["workers"] == 3

    def test_json_format_mirrors_csv(self, capsys):
        args = [
            "simulate",
            "--dist",
            "exp1",
            "--delta",
            "0.5",
            "--reps",
            "800",
            "--kmax",
            "2",
            "--seed",
            "5",
        ]
        code, out_csv, _ = run_cli(capsys, args)
        code_j, out_json, _ = run_cli(capsys, args + ["--format", "json"])
        assert code == code_j == 0
        doc = json.loads(out_json)
        assert doc["columns"] == list(cli.EXPERIMENT_COLUMNS)
        rows = csv_rows(out_csv)
        assert len(doc["rows"]) == len(rows)
        for jrow, crow in zip(doc["rows"], rows):
            assert f"{jrow['estimate']:.9g}" == crow["estimate"]
        assert doc["config"]["format"] == "json"


class TestCounterexampleCommand:
    def test_batch_report_shape(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "counterexample",
                "--which",
                "batch",
                "--delta",
                "1.5",
                "--reps",
                "6000",
                "--kmax",
                "2",
                "--seed",
                "8",
            ],
        )
        assert code == 0
        rows = csv_rows(out)
        dists = {r["dist"] for r in rows}
        assert dists == {"det1", "exp1", "difference"}
        diff_rows = [r for r in rows if r["dist"] == "difference"]
        assert len(diff_rows) == 2
        assert float(diff_rows[0]["z_score"]) > 4.0

    def test_age_varying_report_shape(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "counterexample",
                "--which",
                "age-varying",
                "--delta",
                "10",
                "--reps",
                "600",
                "--seed",
                "4",
            ],
        )
        assert code == 0
        rows = csv_rows(out)
        assert [r["dist"] for r in rows] == ["front", "back", "difference"]
        assert float(rows[-1]["z_score"]) > 6.0

    def test_tn_growth_report_shape(self, capsys):
        code, out, _ = run_cli(
            capsys,
            [
                "tn-growth",
                "--delta",
                "2",
                "--n-values",
                "8,32,128",
                "--reps",
                "800",
                "--seed",
                "3",
            ],
        )
        assert code == 0
        rows = csv_rows(out)
        assert rows[-1]["dist"] == "slope"
        assert rows[-1]["theory"] == "0.5"
        assert float(rows[-1]["estimate"]) > 0.0
