"""Command-line driver.

Every command writes into ``<out>/<command>-<config digest>-s<seed>/`` a
``manifest.json`` and a ``resolved_config.yaml`` next to its outputs, so
rerunning the same configuration overwrites the same directory.

Usage::

    finrl-bench ingest --config run.yml --seed 1
    finrl-bench backtest --config run.yml --seed 1 -v
    finrl-bench report runs/backtest-* runs/rolling-* --seed 1
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from finrl_bench import __version__
from finrl_bench.agents import TrainedAgent, train_agent
from finrl_bench.baselines import buy_and_hold, mean_variance_curve
from finrl_bench.ensemble import run_rolling_ensemble
from finrl_bench.exceptions import BenchException
from finrl_bench.marketdata import (
    compute_indicators,
    load_auxiliary_series,
    load_ohlcv,
    read_feature_csv,
    select_columns,
    select_features,
    split_temporal,
    synthetic_panel,
    write_feature_csv,
)
from finrl_bench.metrics import compute_metrics, metrics_table, write_equity_curve, write_metrics
from finrl_bench.model import AgentSpec, EnvConfig, FeaturePanel, MetricsReport, RunResult
from finrl_bench.protocol import run_backtest, run_rolling
from finrl_bench.run_config import RunConfig, load_run_config, write_resolved_config
from finrl_bench.signals import align_signals, load_signals
from finrl_bench.util import EnhancedJSONEncoder, deep_merge, derive_seed
from finrl_bench.vecenv import VecTradingEnv, measure_throughput

COMMANDS = ("ingest", "train", "backtest", "rolling", "ensemble", "bench", "report")


# ---- data -------------------------------------------------------------------
def build_features(config: RunConfig) -> FeaturePanel:
    """OHLCV -> indicators -> optional feature selection -> optional signals."""
    data = config.data
    panel = load_ohlcv(data.ohlcv)
    indicators = list(data.indicators)
    vix = None
    if data.vix is not None:
        vix = load_auxiliary_series(data.vix)
    elif "vix" in indicators:
        logging.warning("no vix series configured, dropping the vix indicator")
        indicators.remove("vix")
    features = compute_indicators(panel, indicators, vix=vix, turbulence_lookback=data.turbulence_lookback)
    if data.select_features:
        features = select_columns(features, select_features(features, data.corr_threshold))
    if data.signals is not None:
        features = align_signals(load_signals(data.signals), features, fill=data.signal_fill)
    return features


def load_features(config: RunConfig) -> FeaturePanel:
    if config.data.features is not None:
        return read_feature_csv(config.data.features)
    return build_features(config)


# ---- training ---------------------------------------------------------------
def train_single(config: RunConfig, spec: AgentSpec, data: FeaturePanel, env_config: EnvConfig) -> TrainedAgent:
    training = config.training
    venv = VecTradingEnv(
        data,
        n_envs=training.n_envs,
        config=env_config,
        n_workers=training.n_workers,
        timeouts=spec.algorithm != "ppo",
    )
    try:
        return train_agent(spec, venv, training.iterations, training.steps, horizon=training.horizon)
    finally:
        venv.close()


def _write_result(result: RunResult, run_dir: Path, outputs: list[str]) -> None:
    write_metrics(result.metrics, run_dir, "metrics")
    write_equity_curve(result.curve, run_dir / "equity_curve.csv")
    result.trades_frame().to_csv(run_dir / "trades.csv", index=False)
    outputs.extend(["metrics.json", "metrics.csv", "equity_curve.csv", "trades.csv"])


# ---- commands ---------------------------------------------------------------
def cmd_ingest(config: RunConfig, run_dir: Path, args) -> list[str]:
    features = build_features(config)
    write_feature_csv(features, run_dir / "features.csv")
    split = split_temporal(features, config.data.eval_fraction, config.data.relabel)
    manifest = {
        "assets": features.base.assets,
        "feature_names": features.feature_names,
        "n_periods": features.n_periods,
        "n_train": split.train.n_periods,
        "n_eval": split.eval.n_periods,
        "eval_fraction": config.data.eval_fraction,
        "boundary": None if split.boundary is None else str(split.boundary),
    }
    with open(run_dir / "split.json", "w") as output:
        json.dump(manifest, output, indent=2)
    logging.info("ingest: %s bars x %s assets, %s features", features.n_periods, features.n_assets, features.n_features)
    return ["features.csv", "split.json"]


def cmd_train(config: RunConfig, run_dir: Path, args) -> list[str]:
    split = split_temporal(load_features(config), config.data.eval_fraction, config.data.relabel)
    agent = train_single(config, config.agent_spec(), split.train, config.env_config())
    agent.save(run_dir / "agent.json")
    pd.DataFrame(agent.training_log).to_csv(run_dir / "training_log.csv", index=False)
    return ["agent.json", "training_log.csv"]


def _baseline_reports(config: RunConfig, features: FeaturePanel, start: int, timestamps: pd.Index) -> dict[str, MetricsReport]:
    env = config.env
    options = config.metric_options(timestamps)
    prices = features.prices
    reports = {
        "buy_and_hold": compute_metrics(
            buy_and_hold(prices[start:], timestamps[start:], env.initial_balance, env.cost_rate), **options
        )
    }
    cap = max(config.baselines.mean_variance_cap, 1.0 / features.n_assets)
    if cap != config.baselines.mean_variance_cap:
        logging.warning("mean-variance cap raised to %s so %s assets can be fully invested", cap, features.n_assets)
    if start >= 2:
        curve = mean_variance_curve(
            prices, timestamps, start, config.baselines.mean_variance_lookback, cap, env.initial_balance, env.cost_rate
        )
        reports["mean_variance"] = compute_metrics(curve, **options)
    else:
        logging.warning("too little history before the evaluation range for the mean-variance baseline")
    return reports


def cmd_backtest(config: RunConfig, run_dir: Path, args) -> list[str]:
    features = load_features(config)
    split = split_temporal(features, config.data.eval_fraction, config.data.relabel)
    env_config = config.env_config()
    trained = []

    def factory(data: FeaturePanel, candidate: Optional[dict]) -> TrainedAgent:
        agent = train_single(config, config.agent_spec(), data, env_config)
        trained.append(agent)
        return agent

    timestamps = split.train.timestamps.append(split.eval.timestamps)
    result = run_backtest(factory, split, env_config, config.metric_options(timestamps))
    outputs = []
    _write_result(result, run_dir, outputs)
    trained[0].save(run_dir / "agent.json")
    outputs.append("agent.json")
    for name, report in _baseline_reports(config, features, split.train.n_periods, timestamps).items():
        write_metrics(report, run_dir, f"baseline_{name}")
        outputs.extend([f"baseline_{name}.json", f"baseline_{name}.csv"])
    return outputs


def cmd_rolling(config: RunConfig, run_dir: Path, args) -> list[str]:
    features = load_features(config)
    env_config = config.env_config()
    base = config.agent_spec()
    calls = []

    def factory(data: FeaturePanel, candidate: Optional[dict]) -> TrainedAgent:
        spec = AgentSpec.from_dict(deep_merge(asdict(base), candidate or {}))
        spec = replace(spec, seed=derive_seed(config.seed, f"rolling-{len(calls)}"))
        calls.append(spec)
        return train_single(config, spec, data, env_config)

    protocol = config.protocol
    result = run_rolling(
        factory,
        features,
        env_config,
        protocol.train_window,
        protocol.validation_window,
        protocol.trade_window,
        candidates=protocol.candidates or None,
        metric_options=config.metric_options(features.timestamps),
    )
    outputs = []
    _write_result(result, run_dir, outputs)
    return outputs


def cmd_ensemble(config: RunConfig, run_dir: Path, args) -> list[str]:
    features = load_features(config)
    result = run_rolling_ensemble(
        config.ensemble_config(),
        features,
        config.env_config(),
        seed=config.seed,
        n_workers=config.training.n_workers,
        metric_options=config.metric_options(features.timestamps),
    )
    outputs = []
    _write_result(result, run_dir, outputs)
    with open(run_dir / "weights.json", "w") as output:
        json.dump(result.weights, output, cls=EnhancedJSONEncoder, indent=2)
    outputs.append("weights.json")
    return outputs


def cmd_bench(config: RunConfig, run_dir: Path, args) -> list[str]:
    bench = config.bench
    if config.data.features is not None or config.data.ohlcv is not None:
        features = load_features(config)
    else:
        panel = synthetic_panel(bench.synthetic_periods, bench.synthetic_assets, seed=derive_seed(config.seed, "bench"))
        features = FeaturePanel(base=panel, features=np.zeros((panel.n_periods, panel.n_assets, 0)), feature_names=[])
    n_envs = args.n_envs or bench.n_envs
    horizon = args.horizon or bench.horizon
    table = measure_throughput(
        features, n_envs, horizon, config.env_config(), bench.workers, derive_seed(config.seed, "rollout")
    )
    table.to_csv(run_dir / "throughput.csv", index=False)
    speeds = table["samples_per_second"].to_numpy()
    inversions = int((np.diff(speeds) < 0).sum())
    logging.info("bench: %s inversions of the throughput trend over %s configurations", inversions, len(speeds))
    return ["throughput.csv"]


def cmd_report(config: RunConfig, run_dir: Path, args) -> list[str]:
    if not args.runs:
        raise ValueError("report needs at least one run directory.")
    reports = {}
    for directory in map(Path, args.runs):
        metrics_file = directory / "metrics.json"
        if not metrics_file.exists():
            raise ValueError(f"'{directory}' holds no metrics.json.")
        with open(metrics_file, "r") as source:
            values = json.load(source)
        name = directory.name
        manifest_file = directory / "manifest.json"
        if manifest_file.exists():
            with open(manifest_file, "r") as source:
                name = json.load(source).get("run_id", name)
        reports[name] = MetricsReport(**values)
    metrics_table(reports).to_csv(run_dir / "comparison.csv", index=False, na_rep="NA")
    return ["comparison.csv"]


_HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "rolling": cmd_rolling,
    "ensemble": cmd_ensemble,
    "bench": cmd_bench,
    "report": cmd_report,
}


# ---- entry point -------------------------------------------------------------
def parse_args(args: Sequence[str]) -> argparse.Namespace:
    """Parse command line parameters.

    Args:
        args (Sequence[str]): command line parameters as list of strings
            (for example  ``["backtest", "--config", "run.yml"]``).

    Returns:
        argparse.Namespace: command line parameters namespace
    """
    parser = argparse.ArgumentParser(prog="finrl-bench", description="Financial reinforcement learning benchmark")
    parser.add_argument("--version", action="version", version=f"finrl-bench {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="what to run")
    parser.add_argument("runs", nargs="*", help="run directories to compare (report only)")
    parser.add_argument("-c", "--config", dest="config", help="YAML run configuration")
    parser.add_argument("-s", "--seed", dest="seed", type=int, help="top-level seed, overrides the config")
    parser.add_argument("-o", "--out", dest="out", help="output directory, overrides the config")
    parser.add_argument("--n-envs", dest="n_envs", type=int, nargs="+", help="environment counts (bench only)")
    parser.add_argument("--horizon", dest="horizon", type=int, help="steps per configuration (bench only)")
    parser.add_argument(
        "-v", "--verbose", dest="loglevel", help="set loglevel to INFO", action="store_const", const=logging.INFO
    )
    parser.add_argument(
        "-vv", "--very-verbose", dest="loglevel", help="set loglevel to DEBUG", action="store_const", const=logging.DEBUG
    )
    return parser.parse_args(args)


def setup_logging(loglevel: Optional[int]) -> None:
    logformat = "[%(asctime)s] %(levelname)s:%(name)s:%(message)s"
    logging.basicConfig(
        level=loglevel or logging.WARN, stream=sys.stderr, format=logformat, datefmt="%Y-%m-%d %H:%M:%S"
    )


def execute(args: argparse.Namespace) -> Path:
    """Resolves the config, runs one command and writes its manifest.

    Returns:
        Path: The run directory.
    """
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    config = load_run_config(args.config, overrides, command=args.command)
    run_id = config.run_id(args.command)
    run_dir = Path(config.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    logging.info("%s: writing to %s", args.command, run_dir)

    write_resolved_config(config, run_dir / "resolved_config.yaml")
    outputs = _HANDLERS[args.command](config, run_dir, args)
    manifest = {
        "command": args.command,
        "run_id": run_id,
        "seed": config.seed,
        "config_digest": config.digest(),
        "version": __version__,
        "outputs": ["resolved_config.yaml", *outputs],
    }
    with open(run_dir / "manifest.json", "w") as output:
        json.dump(manifest, output, indent=2)
    return run_dir


def main(args: Sequence[str]) -> int:
    """Wrapper allowing commands to be called with string arguments in a CLI fashion.

    Returns:
        int: The exit code; 1 if the run failed.
    """
    parsed = parse_args(args)
    setup_logging(parsed.loglevel)
    try:
        run_dir = execute(parsed)
    except (BenchException, ValueError, OSError) as error:
        print(f"finrl-bench {parsed.command}: {error}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


def run():
    """Calls :func:`main` passing the CLI arguments extracted from :obj:`sys.argv`

    This function can be used as entry point to create console scripts with setuptools.
    """
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
