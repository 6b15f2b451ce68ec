import math

import pandas as pd
import pytest

from config import TMLabConfig
from tm_modules.bench_command_handler import (
    BENCH_COLUMNS,
    EXIT_ERROR,
    EXIT_OK,
    SUMMARY_COLUMNS,
    BenchCommandHandler,
    RunConfig,
)
from tm_modules.interleaving_scheduler import Schedule
from tm_modules.memory_metrics import compute_mbar

SCHEDULED = ["--scheduled", "--seed", "7", "--messages", "20"]


@pytest.fixture
def handler(tmp_path):
    return BenchCommandHandler(TMLabConfig(output_dir=str(tmp_path), reps_min=2, reps_max=3))


def header(path):
    return path.read_text(encoding="utf-8").splitlines()[0]


def test_cgl_with_strategy_is_config_error(handler, capsys):
    assert handler.run_cli(["bench", "--engine", "cgl", "--strategy", "trap"]) == EXIT_ERROR
    assert "--strategy" in capsys.readouterr().out


def test_thread_count_is_validated(handler, capsys):
    assert handler.run_cli(["bench", "--threads", "0"]) == EXIT_ERROR
    assert "--threads" in capsys.readouterr().out


def test_thread_split():
    assert RunConfig(strategy="trap", threads=5).split_threads() == (2, 3)
    assert RunConfig(strategy="trap", threads=1).split_threads() == (1, 1)
    assert RunConfig(engine="cgl", threads=4, producers=3).split_threads() == (3, 2)


def test_bench_writes_summary_row(handler, tmp_path):
    out = tmp_path / "bench.csv"
    code = handler.run_cli(["bench", "--engine", "norec", "--strategy", "trap", "--threads", "4",
                            "--out", str(out)] + SCHEDULED)
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == BENCH_COLUMNS
    assert frame.loc[0, "engine"] == "norec-trap"
    assert frame.loc[0, "threads"] == 4
    assert bool(frame.loc[0, "converged"])


def test_bench_sweep_writes_one_row_per_combination(handler, tmp_path):
    out = tmp_path / "sweep.csv"
    code = handler.run_cli(["bench", "--engines", "norec-trap,cgl", "--threads", "2,4",
                            "--out", str(out)] + SCHEDULED)
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == BENCH_COLUMNS
    assert list(zip(frame["engine"], frame["threads"])) == [
        ("norec-trap", 2), ("norec-trap", 4), ("cgl", 2), ("cgl", 4)]


def test_engines_flag_excludes_strategy(handler, capsys):
    assert handler.run_cli(["bench", "--engines", "cgl", "--strategy", "trap"]) == EXIT_ERROR
    assert "--engines" in capsys.readouterr().out


def test_trace_takes_one_thread_count(handler, capsys):
    assert handler.run_cli(["trace", "--threads", "2,4"]) == EXIT_ERROR
    assert "--threads" in capsys.readouterr().out


def test_bench_epoch_memory_not_below_trap(handler, tmp_path):
    rows = {}
    for strategy in ("epoch", "trap"):
        out = tmp_path / f"{strategy}.csv"
        handler.run_cli(["bench", "--strategy", strategy, "--producers", "2", "--consumers", "1",
                         "--out", str(out)] + SCHEDULED)
        rows[strategy] = pd.read_csv(out).iloc[0]
    assert rows["epoch"]["m_max"] >= rows["trap"]["m_max"]


def test_trace_is_self_consistent(handler, tmp_path):
    trace_path = tmp_path / "trace.csv"
    summary_path = tmp_path / "summary.csv"
    code = handler.run_cli(["trace", "--strategy", "epoch", "--out", str(summary_path),
                            "--trace-out", str(trace_path)] + SCHEDULED)
    assert code == EXIT_OK

    assert header(trace_path) == "t_ns,m_bytes"
    assert header(summary_path) == ",".join(SUMMARY_COLUMNS)
    assert b"\r\n" not in trace_path.read_bytes()

    recomputed = compute_mbar(handler.read_trace(trace_path))
    reported = pd.read_csv(summary_path).loc[0, "m_bar"]
    assert abs(reported - recomputed) <= math.ulp(recomputed)


def test_trace_columns_stable_across_engines(handler, tmp_path):
    headers = set()
    for flags in (["--engine", "cgl"], ["--strategy", "epoch"], ["--strategy", "trap"]):
        out = tmp_path / "summary.csv"
        handler.run_cli(["trace", "--out", str(out), "--trace-out", str(tmp_path / "t.csv")] + flags + SCHEDULED)
        headers.add(header(out))
    assert headers == {",".join(SUMMARY_COLUMNS)}


def test_scheduled_output_is_byte_identical(handler, tmp_path):
    outputs = []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        trace = tmp_path / f"trace{i}.csv"
        handler.run_cli(["trace", "--out", str(out), "--trace-out", str(trace)] + SCHEDULED)
        outputs.append((out.read_bytes(), trace.read_bytes()))
    assert outputs[0] == outputs[1]


def test_check_passes(handler):
    assert handler.run_cli(["check", "--micro-producers", "1"]) == EXIT_OK


def test_check_mutation_fails_and_replays(handler, tmp_path):
    saved = tmp_path / "failing.txt"
    code = handler.run_cli(["check", "--epoch-min-age", "1", "--micro-producers", "1", "--out", str(saved)])
    assert code == EXIT_ERROR

    schedule = Schedule.load(saved)
    assert schedule.meta["program"] == "flagship"
    assert schedule.meta["engine"] == "norec-epoch"

    assert handler.run_cli(["check", "--replay", str(saved), "--epoch-min-age", "1"]) == EXIT_ERROR
    assert handler.run_cli(["check", "--replay", str(saved)]) == EXIT_OK
