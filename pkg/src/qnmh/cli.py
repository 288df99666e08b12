"""Command line: simulate, ingest-bitcoin, run, benchmark, sv-casestudy."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from data.input.dataset_input import ingest_bitcoin
from data.models.experiment_config import ExperimentConfig, load_config
from data.storage.artifact_store import ArtifactStore
from src.qnmh.diagnostics import metrics_markdown
from src.qnmh.errors import ConfigError, QNMHError
from src.qnmh.experiments import (
    dataset_summary,
    dataset_target,
    run_benchmark,
    run_single,
    run_sv_casestudy,
    simulate_dataset,
    write_dataset_artifact,
)

logger = logging.getLogger("qnmh")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"


def _print(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


# ------------------------
# Subcommands
# ------------------------

def cmd_simulate(config: ExperimentConfig) -> int:
    data = simulate_dataset(config)
    target = dataset_target(config, f"{config.model.value}_T{config.T}_seed{config.seed}.csv")
    path = write_dataset_artifact(data, target, config, {"model": config.model.value, "theta": config.theta, "T": config.T})
    _print({"dataset": str(path), **dataset_summary(data)})
    return 0


def cmd_ingest_bitcoin(config: ExperimentConfig) -> int:
    if config.raw_prices_path is None:
        raise ConfigError("ingest-bitcoin needs raw_prices_path (a date,close CSV)")
    data, provenance = ingest_bitcoin(config.raw_prices_path, config.bitcoin_start, config.bitcoin_end)
    target = dataset_target(config, "bitcoin_returns.csv")
    path = write_dataset_artifact(data, target, config, provenance)
    _print({"dataset": str(path), **provenance, **dataset_summary(data)})
    return 0


def cmd_run(config: ExperimentConfig) -> int:
    store = ArtifactStore(config.out_dir, config.config_hash())
    store.write_json("config.json", config, seed=config.seed)
    outcome = run_single(config, store)
    _print({
        "metrics": outcome.report.to_row(),
        "posterior_mean": {p.name: p.mean for p in outcome.summary.parameters},
    })
    return 0


def cmd_benchmark(config: ExperimentConfig) -> int:
    store = ArtifactStore(config.out_dir, config.config_hash())
    store.write_json("config.json", config, seed=config.seed)
    outcome = run_benchmark(config, store)
    print(metrics_markdown(outcome.reports), end="")
    if outcome.failures:
        logger.warning("%d replication(s) failed; see benchmark.json", len(outcome.failures))
    return 0


def cmd_sv_casestudy(config: ExperimentConfig) -> int:
    store = ArtifactStore(config.out_dir, config.config_hash())
    store.write_json("config.json", config, seed=config.seed)
    outcome = run_sv_casestudy(config, store)
    _print({
        "posterior_mean": {p.name: p.mean for p in outcome.summary.parameters},
        "state_draws": outcome.states.n_draws,
        "data": outcome.data_provenance,
    })
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest-bitcoin": cmd_ingest_bitcoin,
    "run": cmd_run,
    "benchmark": cmd_benchmark,
    "sv-casestudy": cmd_sv_casestudy,
}


# ------------------------
# Entry point
# ------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qnmh", description="Quasi-Newton particle Metropolis-Hastings experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML experiment file")
        p.add_argument("--seed", type=int, default=None, help="master seed (u64)")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=None, help="parallel replications")
        p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, {
            "seed": args.seed,
            "out_dir": args.out,
            "jobs": args.jobs,
            "log_level": args.log_level,
        })
    except (QNMHError, ValueError, OSError) as exc:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        return _fail(exc, 2)

    logging.basicConfig(level=getattr(logging, config.log_level.upper(), logging.INFO), format=LOG_FORMAT)
    logger.info("%s: config hash %s, seed %d", args.command, config.config_hash()[:12], config.seed)
    try:
        return COMMANDS[args.command](config)
    except (QNMHError, ValueError, ValidationError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return _fail(exc, 2)
    except Exception as exc:
        logger.exception("Unexpected error in %s", args.command)
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
