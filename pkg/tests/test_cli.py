import logging

import pytest

from sllmsim.cli import EXIT_DATA, EXIT_OK, main
from sllmsim.loading import generate_naive_dir
from sllmsim.report import (
    BENCH_COLUMNS,
    CALIBRATION_COLUMNS,
    COMPARE_COLUMNS,
    REQUEST_COLUMNS,
    SUMMARY_COLUMNS,
)
from sllmsim.trace import load_trace

from conftest import fixture_path

SCENARIO_CFG = str(fixture_path("two_server_scenario.txt"))

PNG_MAGIC = b"\x89PNG"


def write_scenario_trace(tmp_path):
    path = tmp_path / "trace.txt"
    path.write_text("0 reqA A 10 200\n500 reqB B 10 50\n", encoding="utf-8")
    return str(path)


def header_of(csv_path):
    return csv_path.read_text(encoding="utf-8").splitlines()[0]


# --- exit codes and argument handling -----------------------------------------


def test_no_arguments_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_plot_without_out_is_a_usage_error(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--trace", trace, "--config", SCENARIO_CFG, "--plot"])
    assert exc.value.code == 1
    assert "--plot requires --out" in capsys.readouterr().err


def test_missing_trace_file_is_a_data_error(capsys):
    rc = main(["simulate", "--trace", "/nonexistent/trace.txt",
               "--config", SCENARIO_CFG])
    assert rc == EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_bad_config_file_is_a_data_error(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("server s1\nwibble\n", encoding="utf-8")
    rc = main(["simulate", "--trace", trace, "--config", str(cfg)])
    assert rc == EXIT_DATA
    assert "line 2" in capsys.readouterr().err


def test_unknown_policy_is_a_data_error(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    rc = main(["simulate", "--trace", trace, "--config", SCENARIO_CFG,
               "--policy", "bogus"])
    assert rc == EXIT_DATA
    assert "bogus" in capsys.readouterr().err


def test_effective_config_is_echoed_first(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    rc = main(["simulate", "--trace", trace, "--config", SCENARIO_CFG,
               "--policy", "availability", "--seed", "7"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "# command = simulate"
    echoed = [line for line in out if line.startswith("# ")]
    assert "# policy = availability" in echoed
    assert "# seed = 7" in echoed
    assert f"# config = {SCENARIO_CFG}" in echoed
    # sorted keys after the command line
    keys = [line.split(" = ")[0] for line in echoed[1:]]
    assert keys == sorted(keys)


# --- simulate -------------------------------------------------------------------


def test_simulate_writes_csv_log_and_figure(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    out = tmp_path / "run"
    rc = main([
        "simulate", "--trace", trace, "--config", SCENARIO_CFG,
        "--policy", "live_migration", "--out", str(out), "--plot",
        "--check-invariants",
    ])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert "policy               live_migration" in stdout
    assert "migrations           1 (1 completed, 0 stalled)" in stdout

    assert header_of(out / "requests.csv") == ",".join(REQUEST_COLUMNS)
    body = (out / "requests.csv").read_text(encoding="utf-8").splitlines()
    assert len(body) == 3  # header + reqA + reqB
    assert body[1].startswith("reqA,A,")

    assert header_of(out / "summary.csv") == ",".join(SUMMARY_COLUMNS)
    first_event = (out / "events.log").read_text(encoding="utf-8").splitlines()[0]
    assert first_event.startswith("0.000000000 ARRIVAL")
    assert (out / "latencies.png").read_bytes()[:4] == PNG_MAGIC


def test_simulate_outputs_are_byte_identical_across_runs(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        rc = main(["simulate", "--trace", trace, "--config", SCENARIO_CFG,
                   "--policy", "live_migration", "--seed", "5", "--out", str(out)])
        assert rc == EXIT_OK
        outputs.append(out)
    capsys.readouterr()
    for name in ("requests.csv", "summary.csv", "events.log"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


def test_simulate_with_failure_plan_and_measured_load(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    plan = tmp_path / "failures.txt"
    plan.write_text("1.0 s2\n", encoding="utf-8")
    measured = tmp_path / "measured.txt"
    measured.write_text("# model seconds\nB 0.5\n", encoding="utf-8")
    rc = main(["simulate", "--trace", trace, "--config", SCENARIO_CFG,
               "--policy", "availability", "--failure-plan", str(plan),
               "--measured-load", str(measured)])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert "aborted              1" in stdout


# --- gen-trace ------------------------------------------------------------------


def test_gen_trace_then_simulate_round_trip(tmp_path, capsys):
    trace_path = tmp_path / "gen.txt"
    rc = main(["gen-trace", "--out", str(trace_path), "--duration", "30",
               "--models", "A:0.4,B:0.3", "--seed", "2"])
    assert rc == EXIT_OK
    assert "wrote" in capsys.readouterr().out

    records = load_trace(trace_path)
    assert records
    assert {r.model_id for r in records} <= {"A", "B"}

    rc = main(["simulate", "--trace", str(trace_path), "--config", SCENARIO_CFG,
               "--policy", "availability"])
    assert rc == EXIT_OK
    assert f"requests             {len(records)}" in capsys.readouterr().out


def test_gen_trace_is_seed_deterministic(tmp_path, capsys):
    paths = [tmp_path / "a.txt", tmp_path / "b.txt"]
    for path in paths:
        assert main(["gen-trace", "--out", str(path), "--duration", "20",
                     "--models", "m:1.0", "--seed", "9"]) == EXIT_OK
    capsys.readouterr()
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_gen_trace_rejects_malformed_rates(tmp_path, capsys):
    rc = main(["gen-trace", "--out", str(tmp_path / "t.txt"),
               "--models", "A"])
    assert rc == EXIT_DATA
    assert "model:rate" in capsys.readouterr().err


# --- compare --------------------------------------------------------------------


def test_compare_prints_table_and_writes_outputs(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    out = tmp_path / "cmp"
    rc = main(["compare", "--trace", trace, "--config", SCENARIO_CFG,
               "--policies", "availability,live_migration",
               "--out", str(out), "--plot"])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert "vs_first" in stdout
    assert "availability" in stdout and "live_migration" in stdout

    assert header_of(out / "compare.csv") == ",".join(COMPARE_COLUMNS)
    rows = (out / "compare.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 3
    assert (out / "compare.png").read_bytes()[:4] == PNG_MAGIC


def test_compare_needs_at_least_two_policies(tmp_path, capsys):
    trace = write_scenario_trace(tmp_path)
    rc = main(["compare", "--trace", trace, "--config", SCENARIO_CFG,
               "--policies", "availability"])
    assert rc == EXIT_DATA
    assert "at least two" in capsys.readouterr().err


# --- calibrate ------------------------------------------------------------------


def test_calibrate_recovers_linear_fit(tmp_path, capsys):
    samples = tmp_path / "samples.txt"
    lines = [f"{t} {0.0015 * t + 0.02}" for t in range(10, 210, 10)]
    samples.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "fit"
    rc = main(["calibrate", "--samples", str(samples), "--out", str(out), "--plot"])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    slope = next(float(l.split()[-1]) for l in stdout.splitlines()
                 if l.startswith("a (s/token)"))
    intercept = next(float(l.split()[-1]) for l in stdout.splitlines()
                     if l.startswith("b (s)"))
    assert slope == pytest.approx(0.0015, abs=1e-9)
    assert intercept == pytest.approx(0.02, abs=1e-9)

    assert header_of(out / "calibration.csv") == ",".join(CALIBRATION_COLUMNS)
    rows = (out / "calibration.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 21
    assert (out / "calibration.png").read_bytes()[:4] == PNG_MAGIC


def test_calibrate_rejects_degenerate_samples(tmp_path, capsys):
    samples = tmp_path / "one.txt"
    samples.write_text("10 0.5\n", encoding="utf-8")
    rc = main(["calibrate", "--samples", str(samples)])
    assert rc == EXIT_DATA
    assert "error:" in capsys.readouterr().err


# --- convert and bench-load -------------------------------------------------------


def test_convert_builds_a_chunked_checkpoint(tmp_path, capsys):
    naive = tmp_path / "naive"
    generate_naive_dir(naive, 64 * 1024, 8, seed=1)
    dest = tmp_path / "ckpt"
    rc = main(["convert", str(naive), str(dest), "--model-id", "m",
               "--chunk", "16KiB"])
    assert rc == EXIT_OK
    assert "wrote" in capsys.readouterr().out
    assert (dest / "m.sllm").exists()


def test_convert_missing_source_is_a_data_error(tmp_path, capsys):
    rc = main(["convert", str(tmp_path / "nope"), str(tmp_path / "dest")])
    assert rc == EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_bench_load_smoke(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["bench-load", "--size", "1MiB", "--tensors", "32",
               "--chunk", "64KiB", "--reps", "2", "--workers", "2",
               "--out", str(out), "--plot"])
    assert rc == EXIT_OK
    stdout = capsys.readouterr().out
    assert "speedup" in stdout
    assert header_of(out / "bench.csv") == ",".join(BENCH_COLUMNS)
    rows = (out / "bench.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 5  # header + 2 loaders x 2 reps
    assert (out / "bench.png").read_bytes()[:4] == PNG_MAGIC


# --- logging env var ---------------------------------------------------------------


def test_unknown_log_level_warns(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("SLLM_SIM_LOG_LEVEL", "chatty")
    with caplog.at_level(logging.WARNING, logger="sllmsim.cli"):
        main(["gen-trace", "--out", str(tmp_path / "t.txt"),
              "--models", "m:1.0", "--duration", "5"])
    assert any("SLLM_SIM_LOG_LEVEL" in rec.message for rec in caplog.records)


def test_known_log_level_accepted_silently(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("SLLM_SIM_LOG_LEVEL", "debug")
    with caplog.at_level(logging.WARNING, logger="sllmsim.cli"):
        main(["gen-trace", "--out", str(tmp_path / "t.txt"),
              "--models", "m:1.0", "--duration", "5"])
    assert not [rec for rec in caplog.records if rec.name == "sllmsim.cli"]
