from pathlib import Path

import pandas as pd
import pytest
import yaml

from finrl_bench.exceptions import ConfigException
from finrl_bench.run_config import (
    RunConfig,
    load_run_config,
    resolve_run_config,
    write_resolved_config,
)

__author__ = "finrl-bench developers"
__copyright__ = "finrl-bench developers"
__license__ = "MIT"


class TestResolveRunConfig:
    """Tests for layering defaults, profile and user values."""

    testee: RunConfig

    def test_defaults(self):
        # WHEN
        self.testee = resolve_run_config({"seed": 1})

        # THEN
        assert self.testee.profile == "stock_daily"
        assert self.testee.agent.algorithm == "ppo"
        assert self.testee.env.initial_balance == 1_000_000.0
        assert self.testee.metrics.periods_per_year == 252.0
        assert [member.algorithm for member in self.testee.ensemble.members] == ["ppo", "sac", "ddpg"]

    def test_seed_is_required(self):
        with pytest.raises(ConfigException) as error:
            resolve_run_config({})
        assert any(message.startswith("seed") for message in error.value.errors)

    def test_crypto_profile(self):
        # WHEN
        self.testee = resolve_run_config({"seed": 1, "profile": "crypto_second"})

        # THEN
        assert self.testee.env.action_mode == "discrete"
        assert self.testee.agent.algorithm == "dqn"
        assert self.testee.agent.learning_rate == pytest.approx(2e-6)
        assert self.testee.agent.hidden_sizes == [128, 128, 128]
        assert self.testee.metrics.periods_per_year is None
        assert self.testee.ensemble.scheme == "majority_vote"
        members = self.testee.ensemble.members
        assert [member.algorithm for member in members] == ["dqn", "double_dqn", "dueling_dqn"]
        # members inherit the profile's agent settings
        assert all(member.batch_size == 512 for member in members)

    def test_user_values_win_over_profile(self):
        self.testee = resolve_run_config({"seed": 1, "profile": "crypto_second", "agent": {"batch_size": 32}})
        assert self.testee.agent.batch_size == 32
        assert self.testee.agent.algorithm == "dqn"

    def test_unknown_field(self):
        with pytest.raises(ConfigException) as error:
            resolve_run_config({"seed": 1, "env": {"cost": 0.1}})
        assert any(message.startswith("env.cost") for message in error.value.errors)

    def test_unknown_profile(self):
        with pytest.raises(ConfigException) as error:
            resolve_run_config({"seed": 1, "profile": "fx_minute"})
        assert any("fx_minute" in message for message in error.value.errors)

    def test_reports_every_problem(self):
        with pytest.raises(ConfigException) as error:
            resolve_run_config({"seed": 1, "env": {"cost_rate": -1.0}, "agent": {"learning_rate": 0.0}})
        locations = [message.split(":")[0] for message in error.value.errors]
        assert "env.cost_rate" in locations
        assert "agent.learning_rate" in locations

    @pytest.mark.parametrize(
        "values,command,location",
        [
            ({"agent": {"algorithm": "dqn"}, "data": {}}, "train", "agent.algorithm"),
            ({"ensemble": {"scheme": "majority_vote"}}, "ensemble", "ensemble.scheme"),
            ({}, "ingest", "data.ohlcv"),
            ({}, "backtest", "data"),
        ],
    )
    def test_command_checks(self, values, command, location):
        with pytest.raises(ConfigException) as error:
            resolve_run_config({"seed": 1, **values}, command=command)
        assert any(message.split(":")[0] == location for message in error.value.errors)

    def test_command_checks_only_apply_to_their_command(self):
        self.testee = resolve_run_config({"seed": 1}, command="bench")
        assert self.testee.check_command("bench") == []

    def test_digest_ignores_seed_and_out(self):
        first = resolve_run_config({"seed": 1, "out": "a"})
        second = resolve_run_config({"seed": 2, "out": "b"})
        changed = resolve_run_config({"seed": 1, "env": {"cost_rate": 0.002}})
        assert first.digest() == second.digest()
        assert first.digest() != changed.digest()
        assert first.run_id("backtest") == f"backtest-{first.digest()[:8]}-s1"

    def test_typed_views(self):
        self.testee = resolve_run_config({"seed": 1, "env": {"cost_rate": 0.002}})
        assert self.testee.env_config().cost_rate == 0.002
        assert self.testee.agent_spec().hidden_sizes == (64, 32)
        ensemble = self.testee.ensemble_config()
        assert len(ensemble.members) == 3
        assert ensemble.perturbation_range == pytest.approx(0.01)

    def test_metric_options_infer_frequency(self):
        self.testee = resolve_run_config({"seed": 1, "metrics": {"periods_per_year": None}})
        timestamps = pd.date_range("2022-01-01", periods=5, freq=pd.Timedelta(hours=1))
        assert self.testee.metric_options(timestamps)["periods_per_year"] == pytest.approx(8760.0)
        assert self.testee.metric_options()["periods_per_year"] == 252.0


class TestLoadRunConfig:
    """Tests for reading run configs from YAML files."""

    testee: RunConfig

    def test_relative_paths_resolve_against_the_file(self, tmp_path):
        # GIVEN
        (tmp_path / "features.csv").write_text("timestamp,asset\n")
        config_file = self.__given_config_file(tmp_path, {"seed": 3, "data": {"features": "features.csv"}})

        # WHEN
        self.testee = load_run_config(config_file)

        # THEN
        assert self.testee.data.features == tmp_path / "features.csv"

    def test_missing_path(self, tmp_path):
        config_file = self.__given_config_file(tmp_path, {"seed": 3, "data": {"signals": "absent.csv"}})
        with pytest.raises(ConfigException) as error:
            load_run_config(config_file)
        assert any(message.startswith("data.signals") for message in error.value.errors)

    def test_overrides(self, tmp_path):
        config_file = self.__given_config_file(tmp_path, {"seed": 3})
        self.testee = load_run_config(config_file, {"seed": 9})
        assert self.testee.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigException):
            load_run_config(tmp_path / "absent.yml")

    @pytest.mark.parametrize("content", ["seed: [1", "- 1\n- 2\n"])
    def test_malformed_file(self, tmp_path, content):
        config_file = tmp_path / "run.yml"
        config_file.write_text(content)
        with pytest.raises(ConfigException):
            load_run_config(config_file)

    def test_resolved_config_reloads_to_the_same_digest(self, tmp_path):
        # GIVEN
        self.testee = resolve_run_config({"seed": 4, "profile": "crypto_second", "env": {"trade_size": 2.0}})

        # WHEN
        write_resolved_config(self.testee, tmp_path / "resolved.yaml")
        reloaded = load_run_config(tmp_path / "resolved.yaml")

        # THEN
        assert reloaded.digest() == self.testee.digest()
        assert reloaded.seed == 4

    # GIVEN
    @staticmethod
    def __given_config_file(directory: Path, values: dict) -> Path:
        config_file = directory / "run.yml"
        with open(config_file, "w") as output:
            yaml.safe_dump(values, output)
        return config_file
