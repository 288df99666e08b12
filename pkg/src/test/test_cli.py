import json
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest

from src.qnmh.cli import build_parser, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for var in ("QNMH_OUT_DIR", "QNMH_JOBS", "QNMH_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)


def write_config(tmp_path, text):
    path = tmp_path / "experiment.toml"
    path.write_text(text)
    return path


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("simulate", "ingest-bitcoin", "run", "benchmark", "sv-casestudy"):
        args = parser.parse_args([command, "--seed", "3"])
        assert args.command == command and args.seed == 3


def test_simulate_is_byte_identical(tmp_path, capsys):
    config = write_config(tmp_path, "T = 100\n")
    assert main(["simulate", "--config", str(config), "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["T"] == 100 and printed["dataset"].endswith("lgss_T100_seed5.csv")
    assert main(["simulate", "--config", str(config), "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "lgss_T100_seed5.csv").read_bytes()
    assert first == (tmp_path / "b" / "lgss_T100_seed5.csv").read_bytes()
    assert (tmp_path / "a" / "lgss_T100_seed5.csv.meta.json").is_file()


def test_invalid_config_exits_with_json_error(tmp_path, capsys):
    config = write_config(tmp_path, "T = 0\n")
    assert main(["simulate", "--config", str(config)]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError"
    assert "T" in payload["message"]


def test_missing_config_file_exits_with_code_two(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.toml")]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ConfigError"


def test_run_writes_identical_traces_without_timing(tmp_path):
    config = write_config(tmp_path, "\n".join([
        "T = 50",
        "iterations = 200",
        "burn_in = 50",
        "memory_length = 5",
        "delta = 10.0",
        "histogram_bins = 10",
        "record_timing = false",
        "",
    ]))
    for out in ("a", "b"):
        assert main(["run", "--config", str(config), "--seed", "11", "--out", str(tmp_path / out)]) == 0
    trace_a = (tmp_path / "a" / "traces" / "kalman_dbfgs.csv").read_bytes()
    assert trace_a == (tmp_path / "b" / "traces" / "kalman_dbfgs.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "a" / "traces" / "kalman_dbfgs.csv")
    assert list(frame.columns) == ["k", "theta_1", "theta_2", "theta_3", "logpost", "accepted", "corrected", "time_us"]
    assert (frame["time_us"] == 0).all()
    meta = json.loads((tmp_path / "a" / "traces" / "kalman_dbfgs.csv.meta.json").read_text())
    assert meta["config_hash"] and meta["seed"] is not None


def test_benchmark_single_cell(tmp_path, capsys):
    config = write_config(tmp_path, "\n".join([
        "T = 50",
        "iterations = 200",
        "burn_in = 50",
        "replications = 1",
        "pilot_iterations = 100",
        'proposals = ["pmh0"]',
        "record_timing = false",
        "",
    ]))
    assert main(["benchmark", "--config", str(config), "--out", str(tmp_path / "bench")]) == 0
    table = pd.read_csv(tmp_path / "bench" / "benchmark.csv")
    assert len(table) == 1 and table["proposal"].iloc[0] == "pmh0"
    assert "| kalman | pmh0 |" in capsys.readouterr().out


def test_ingest_bitcoin_command(tmp_path, capsys):
    start = date(2015, 11, 1)
    prices = 300.0 * np.exp(np.cumsum(np.random.default_rng(0).normal(0.0, 0.03, 40)))
    raw = tmp_path / "btc.csv"
    pd.DataFrame({"date": [(start + timedelta(days=i)).isoformat() for i in range(40)], "close": prices}).to_csv(raw, index=False)
    config = write_config(tmp_path, "\n".join([
        'model = "sv"',
        f'raw_prices_path = "{raw}"',
        "bitcoin_start = 2015-11-07",
        "bitcoin_end = 2015-12-07",
        "",
    ]))
    assert main(["ingest-bitcoin", "--config", str(config), "--out", str(tmp_path / "sv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["first_date"] == "2015-11-07" and summary["T"] == 30
    assert (tmp_path / "sv" / "bitcoin_returns.csv").is_file()


def test_ingest_bitcoin_without_prices_fails(tmp_path, capsys):
    assert main(["ingest-bitcoin", "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "ConfigError"
