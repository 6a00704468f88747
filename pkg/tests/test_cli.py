"""Command-line contract checks: exit codes, outputs, golden help."""

import contextlib
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from kbident.cli import build_parser, load_config, main
from kbident.errors import ConfigError
from kbident.model import load_measurements

DATA = Path(__file__).parent / "data"


def run_cli(args):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(args)
    return code, out.getvalue(), err.getvalue()


class TestHelp:
    def test_golden_help_lists_every_flag(self):
        parser = build_parser()
        chunks = []
        for args in (["--help"], ["simulate", "--help"], ["identify", "--help"],
                     ["study", "--help"], ["sweep", "--help"],
                     ["showcase", "--help"]):
            buf = io.StringIO()
            try:
                with contextlib.redirect_stdout(buf):
                    parser.parse_args(args)
            except SystemExit:
                pass
            chunks.append(f"$ kbident {' '.join(args)}\n" + buf.getvalue())
        assert "\n".join(chunks) == (DATA / "help_golden.txt").read_text()


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("train:\n  learning_rte: 0.001\n")
        with pytest.raises(ConfigError) as err:
            load_config(cfg)
        assert "learning_rte" in str(err.value)

    def test_unknown_key_exit_code(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("experiment: 1\n")
        code, _, err = run_cli(["simulate", "--config", str(cfg),
                                "--out", str(tmp_path / "o")])
        assert code == 2
        assert "experiment" in err

    def test_missing_config_exit_code(self, tmp_path):
        code, _, err = run_cli(["simulate", "--config",
                                str(tmp_path / "nope.yaml")])
        assert code == 2 and "nope.yaml" in err

    def test_effective_config_echoed(self, tmp_path):
        out = tmp_path / "o"
        code, _, _ = run_cli(["simulate", "--out", str(out), "--seed", "3",
                              "--frequency-hz", "50", "--duration-s", "1"])
        assert code == 0
        echoed = yaml.safe_load((out / "config.yaml").read_text())
        assert echoed["seed"] == 3
        assert echoed["simulate"]["frequency_hz"] == 50.0


class TestSimulate:
    def test_default_protocol_sample_count(self, tmp_path):
        # samples live on (0, 3]: exactly duration * frequency points, with
        # the initial state supplied separately
        out = tmp_path / "o"
        code, _, _ = run_cli(["simulate", "--out", str(out)])
        assert code == 0
        series = load_measurements(out / "measurements.csv")
        assert len(series) == 3000
        assert series.times[0] > 0.0
        assert series.times[-1] == pytest.approx(3.0, rel=1e-12)
        assert series.frequency_hz == pytest.approx(1000.0)

    def test_zero_noise_matches_trajectory(self, tmp_path):
        out = tmp_path / "o"
        code, _, _ = run_cli(["simulate", "--out", str(out), "--noise-r", "0",
                              "--frequency-hz", "100", "--duration-s", "1"])
        assert code == 0
        series = load_measurements(out / "measurements.csv")
        from kbident.model import aligned_sim_dt, double_pendulum, simulate
        dt, steps = aligned_sim_dt(100.0, 1e-4)
        traj = simulate(double_pendulum(damping=0.05), series.truth_theta,
                        series.truth_x0, 1.0, dt)
        idx = np.rint(series.times / dt).astype(int)
        assert np.allclose(series.samples, traj[1][idx], atol=1e-12)

    def test_seed_determinism_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code, _, _ = run_cli(["simulate", "--out", str(out), "--seed", "11",
                                  "--frequency-hz", "50", "--duration-s", "1"])
            assert code == 0
        assert (a / "measurements.csv").read_bytes() == (b / "measurements.csv").read_bytes()


class TestIdentify:
    def test_missing_file_exit_2_names_path(self, tmp_path):
        code, _, err = run_cli(["identify", str(tmp_path / "missing.csv"),
                                "--out", str(tmp_path / "o")])
        assert code == 2
        assert "missing.csv" in err

    def test_pinn_mode_dispatch(self, tmp_path):
        out = tmp_path / "o"
        run_cli(["simulate", "--out", str(out), "--frequency-hz", "20",
                 "--duration-s", "1", "--noise-r", "0"])
        code, stdout, _ = run_cli(["identify", str(out / "measurements.csv"),
                                   "--out", str(out / "id"), "--mode", "pinn",
                                   "--epochs", "30"])
        assert code == 0
        result = json.loads((out / "id" / "ident_result.json").read_text())
        assert result["method"] == "pinn"
        assert (out / "id" / "mean_net.json").exists()
        assert not (out / "id" / "cov_net.json").exists()

    def test_kbinn_writes_checkpoints_log_and_errors(self, tmp_path):
        out = tmp_path / "o"
        run_cli(["simulate", "--out", str(out), "--frequency-hz", "25",
                 "--duration-s", "1"])
        code, _, _ = run_cli(["identify", str(out / "measurements.csv"),
                              "--out", str(out / "id"), "--epochs", "25"])
        assert code == 0
        result = json.loads((out / "id" / "ident_result.json").read_text())
        assert set(result["theta_hat"]) == {"l1", "l2", "M"}
        assert "abs_errors" in result  # sidecar carried the truth
        log_lines = (out / "id" / "training_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 25
        assert (out / "id" / "cov_net.json").exists()

    def test_numerical_failure_exit_3(self, tmp_path):
        csv_path = tmp_path / "huge.csv"
        lines = ["t,y1,y2,y3,y4"]
        for i in range(1, 21):
            lines.append(f"{i * 0.01},1e200,1e200,1e200,1e200")
        csv_path.write_text("\n".join(lines) + "\n")
        code, _, err = run_cli(["identify", str(csv_path),
                                "--out", str(tmp_path / "o"), "--mode", "pinn",
                                "--epochs", "50"])
        assert code == 3
        assert "numerical" in err.lower()


class TestStudyCli:
    def test_unknown_method_exit_2(self, tmp_path):
        code, _, err = run_cli(["study", "--runs", "1", "--methods", "magic",
                                "--out", str(tmp_path / "o")])
        assert code == 2
        assert "magic" in err

    def test_single_run_aggregate_table(self, tmp_path):
        out = tmp_path / "o"
        code, stdout, _ = run_cli([
            "study", "--runs", "1", "--methods", "baseline",
            "--frequency-hz", "20", "--out", str(out), "--seed", "4",
            "--config", str(_tiny_cfg(tmp_path))])
        assert code == 0
        assert "baseline" in stdout and "+/-" in stdout
        agg = json.loads((out / "aggregates.json").read_text())
        # a single run has zero spread and the mean equals the run itself
        rows = list((out / "study.csv").read_text().splitlines())
        assert len(rows) == 2
        for p in ("l1", "l2", "M"):
            assert agg["baseline"][p]["std"] == 0.0


def _tiny_cfg(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(
        "simulate:\n  duration_s: 1.0\n"
        "nets:\n  mean_hidden: [6]\n  cov_hidden: [6]\n"
        "study:\n  epochs: 40\n"
        "sweep:\n  epochs: 40\n  frequencies_hz: [20.0]\n  scenarios: 1\n")
    return cfg


class TestSweepCli:
    def test_sweep_outputs(self, tmp_path):
        out = tmp_path / "o"
        code, stdout, _ = run_cli(["sweep", "--out", str(out), "--seed", "5",
                                   "--config", str(_tiny_cfg(tmp_path))])
        assert code == 0
        assert (out / "sweep.csv").exists()
        assert "Hz" in stdout


@pytest.mark.slow
class TestPipelineSmoke:
    def test_default_pipeline_under_ten_minutes(self, tmp_path):
        # simulate -> identify -> study (1 run at 100 Hz, reduced epochs)
        import time
        started = time.perf_counter()
        out = tmp_path / "o"
        code, _, _ = run_cli(["simulate", "--out", str(out),
                              "--frequency-hz", "100"])
        assert code == 0
        code, _, _ = run_cli(["identify", str(out / "measurements.csv"),
                              "--out", str(out / "id"), "--epochs", "400",
                              "--benchmark-profile"])
        assert code == 0
        code, _, _ = run_cli(["study", "--runs", "1", "--methods", "kbinn",
                              "--frequency-hz", "100", "--epochs", "400",
                              "--out", str(out / "study"), "--seed", "0"])
        assert code == 0
        assert time.perf_counter() - started < 600.0
