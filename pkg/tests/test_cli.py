import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from finrl_bench.cli import main, parse_args
from finrl_bench.marketdata import synthetic_panel, write_feature_csv
from finrl_bench.model import FeaturePanel

__author__ = "finrl-bench developers"
__copyright__ = "finrl-bench developers"
__license__ = "MIT"

TINY_TRAINING = {
    "agent": {"hidden_sizes": [4], "batch_size": 16, "ppo_epochs": 1},
    "training": {"n_envs": 2, "horizon": 4, "iterations": 1},
}


class TestParseArgs:
    """Tests for the argument parser."""

    def test_command_and_options(self):
        args = parse_args(["backtest", "--config", "run.yml", "--seed", "3", "-v"])
        assert args.command == "backtest"
        assert args.config == "run.yml"
        assert args.seed == 3
        assert args.loglevel == 20

    def test_report_runs(self):
        assert parse_args(["report", "a", "b"]).runs == ["a", "b"]

    def test_bench_options(self):
        args = parse_args(["bench", "--n-envs", "1", "4", "--horizon", "10"])
        assert args.n_envs == [1, 4]
        assert args.horizon == 10

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            parse_args(["deploy"])


class TestMain:
    """End-to-end runs of the commands on tiny inputs."""

    def test_ingest(self, tmp_path, capsys):
        # GIVEN
        synthetic_panel(60, 2, seed=1).to_frame().to_csv(tmp_path / "ohlcv.csv", index=False)
        config_file = self.__given_config(
            tmp_path, {"data": {"ohlcv": "ohlcv.csv", "indicators": ["macd", "close_30"]}}
        )

        # WHEN
        exit_code = main(["ingest", "-c", str(config_file), "-s", "1"])

        # THEN
        assert exit_code == 0
        run_dir = Path(capsys.readouterr().out.strip())
        split = json.loads((run_dir / "split.json").read_text())
        assert split["n_periods"] == 31
        assert split["n_train"] + split["n_eval"] == 31
        assert split["feature_names"] == ["macd", "close_30"]
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "ingest"
        assert manifest["seed"] == 1
        assert set(manifest["outputs"]) == {"resolved_config.yaml", "features.csv", "split.json"}
        assert run_dir.name == manifest["run_id"]

    def test_same_config_same_run_directory(self, tmp_path, capsys):
        config_file = self.__given_config(tmp_path, {"bench": {"n_envs": [1], "horizon": 3, "synthetic_periods": 10}})
        main(["bench", "-c", str(config_file), "-s", "5"])
        first = capsys.readouterr().out.strip()
        main(["bench", "-c", str(config_file), "-s", "5"])
        assert capsys.readouterr().out.strip() == first

    def test_bench(self, tmp_path, capsys):
        config_file = self.__given_config(tmp_path, {"bench": {"synthetic_periods": 20, "synthetic_assets": 2}})
        assert main(["bench", "-c", str(config_file), "-s", "1", "--n-envs", "1", "2", "--horizon", "5"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())
        table = pd.read_csv(run_dir / "throughput.csv")
        assert list(table["n_envs"]) == [1, 2]
        assert list(table["samples"]) == [5, 10]

    def test_backtest_and_report(self, tmp_path, capsys):
        # GIVEN
        self.__given_features(tmp_path)
        config_file = self.__given_config(
            tmp_path,
            {
                "data": {"features": "features.csv", "eval_fraction": 0.25},
                "baselines": {"mean_variance_lookback": 10},
                **TINY_TRAINING,
            },
        )

        # WHEN
        assert main(["backtest", "-c", str(config_file), "-s", "2"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())

        # THEN
        for name in ("metrics.json", "metrics.csv", "equity_curve.csv", "trades.csv", "agent.json",
                     "baseline_buy_and_hold.json", "baseline_mean_variance.json", "resolved_config.yaml"):
            assert (run_dir / name).exists()
        curve = pd.read_csv(run_dir / "equity_curve.csv")
        assert len(curve) == 10
        assert curve["value"].iloc[0] == pytest.approx(1_000_000.0)

        # WHEN
        assert main(["report", str(run_dir), "-s", "2", "-o", str(tmp_path / "reports")]) == 0
        report_dir = Path(capsys.readouterr().out.strip())

        # THEN
        comparison = pd.read_csv(report_dir / "comparison.csv", keep_default_na=False)
        assert list(comparison["name"]) == [run_dir.name]

    def test_same_seed_same_metrics(self, tmp_path, capsys):
        # GIVEN
        self.__given_features(tmp_path)
        config_file = self.__given_config(tmp_path, {"data": {"features": "features.csv"}, **TINY_TRAINING})

        # WHEN
        assert main(["backtest", "-c", str(config_file), "-s", "6"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())
        first = (run_dir / "metrics.json").read_bytes()
        assert main(["backtest", "-c", str(config_file), "-s", "6"]) == 0

        # THEN
        assert Path(capsys.readouterr().out.strip()) == run_dir
        assert (run_dir / "metrics.json").read_bytes() == first

    def test_train(self, tmp_path, capsys):
        self.__given_features(tmp_path)
        config_file = self.__given_config(tmp_path, {"data": {"features": "features.csv"}, **TINY_TRAINING})
        assert main(["train", "-c", str(config_file), "-s", "2"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())
        assert (run_dir / "agent.json").exists()
        assert len(pd.read_csv(run_dir / "training_log.csv")) == 1

    def test_rolling(self, tmp_path, capsys):
        self.__given_features(tmp_path)
        config_file = self.__given_config(
            tmp_path,
            {
                "data": {"features": "features.csv"},
                "protocol": {"mode": "rolling", "train_window": 6, "validation_window": 2, "trade_window": 10},
                **TINY_TRAINING,
            },
        )
        assert main(["rolling", "-c", str(config_file), "-s", "2"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())
        # windows start at periods 0, 10 and 20 and trade 10 periods each
        assert len(pd.read_csv(run_dir / "equity_curve.csv")) == 31

    def test_ensemble(self, tmp_path, capsys):
        self.__given_features(tmp_path)
        config_file = self.__given_config(
            tmp_path,
            {
                "data": {"features": "features.csv"},
                "ensemble": {
                    "members": [{"algorithm": "ppo"}, {"algorithm": "ppo"}],
                    "kl_lambda": 0.1,
                    "train_window": 4,
                    "validation_window": 2,
                    "trade_window": 10,
                    "iterations": 1,
                    "n_envs": 2,
                    "horizon": 4,
                },
                **TINY_TRAINING,
            },
        )
        assert main(["ensemble", "-c", str(config_file), "-s", "2"]) == 0
        run_dir = Path(capsys.readouterr().out.strip())
        weights = json.loads((run_dir / "weights.json").read_text())
        assert len(weights) == 3
        assert all(sum(window) == pytest.approx(1.0) for window in weights)

    def test_missing_seed_fails(self, tmp_path, capsys):
        config_file = tmp_path / "run.yml"
        config_file.write_text(yaml.safe_dump({"out": str(tmp_path / "runs")}))
        assert main(["bench", "-c", str(config_file)]) == 1
        assert "seed" in capsys.readouterr().err

    def test_command_check_fails(self, tmp_path, capsys):
        config_file = self.__given_config(tmp_path, {})
        assert main(["ingest", "-c", str(config_file), "-s", "1"]) == 1
        assert "data.ohlcv" in capsys.readouterr().err

    def test_report_without_metrics_fails(self, tmp_path, capsys):
        assert main(["report", str(tmp_path), "-s", "1", "-o", str(tmp_path / "reports")]) == 1

    # GIVEN
    @staticmethod
    def __given_config(directory: Path, values: dict) -> Path:
        config_file = directory / "run.yml"
        with open(config_file, "w") as output:
            yaml.safe_dump({"out": str(directory / "runs"), **values}, output)
        return config_file

    @staticmethod
    def __given_features(directory: Path) -> None:
        panel = synthetic_panel(40, 2, seed=4)
        features = np.random.default_rng(4).normal(size=(40, 2, 1))
        write_feature_csv(FeaturePanel(base=panel, features=features, feature_names=["f0"]), directory / "features.csv")
