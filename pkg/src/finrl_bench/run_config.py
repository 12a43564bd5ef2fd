"""Run configuration: YAML files validated against a pydantic schema.

The packaged defaults (config.yml) and the chosen task profile lie beneath
the user's values. Validation reports every problem at once.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError

from finrl_bench.exceptions import ConfigException
from finrl_bench.metrics import TRADING_DAYS_PER_YEAR, infer_periods_per_year
from finrl_bench.model import AgentSpec, EnsembleConfig, EnvConfig
from finrl_bench.util import deep_merge, derive_seed, load_config

Algorithm = Literal["ppo", "ddpg", "sac", "dqn", "double_dqn", "dueling_dqn"]
PATH_KEYS = ("ohlcv", "vix", "signals", "features")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(Section):
    ohlcv: Optional[Path] = Field(default=None, description="Long-format OHLCV CSV")
    vix: Optional[Path] = Field(default=None, description="timestamp,asset,value CSV of the vix column")
    signals: Optional[Path] = Field(default=None, description="Sentiment and risk signal CSV")
    features: Optional[Path] = Field(default=None, description="Feature CSV written by ingest")
    indicators: list[str] = Field(default_factory=list)
    turbulence_lookback: int = Field(default=252, ge=2)
    select_features: bool = False
    corr_threshold: float = Field(default=0.95, gt=0, le=1)
    eval_fraction: float = Field(default=0.15, gt=0, lt=1)
    relabel: bool = False
    perturbation_range: float = Field(default=0.01, ge=0, le=0.5)
    signal_fill: Union[float, Literal["ffill"]] = 3.0


class EnvSection(Section):
    initial_balance: float = Field(default=1_000_000.0, ge=0)
    cost_rate: float = Field(default=0.001, ge=0, le=0.05)
    turbulence_threshold: Optional[float] = None
    gamma: float = Field(default=0.99, gt=0, lt=1)
    action_mode: Literal["continuous", "discrete"] = "continuous"
    max_shares: float = Field(default=100.0, gt=0)
    discrete_levels: list[int] = Field(default_factory=lambda: [-1, 0, 1], min_length=1)
    trade_size: float = Field(default=1.0, gt=0)
    reward_scaling: float = Field(default=1.0, gt=0)
    apply_signals: bool = False
    carry_positions: bool = False

    def to_env_config(self) -> EnvConfig:
        return EnvConfig(**self.model_dump())


class AgentSection(Section):
    algorithm: Algorithm = "ppo"
    hidden_sizes: list[PositiveInt] = Field(default_factory=lambda: [64, 32])
    learning_rate: float = Field(default=3e-4, gt=0)
    batch_size: PositiveInt = 64
    gamma: float = Field(default=0.99, gt=0, lt=1)
    epsilon: float = Field(default=0.0, ge=0, le=1)
    clip_epsilon: float = Field(default=0.2, gt=0)
    gae_lambda: float = Field(default=0.95, ge=0, le=1)
    tau: float = Field(default=0.005, gt=0, le=1)
    replay_capacity: PositiveInt = 100_000
    activation: Literal["tanh", "relu"] = "tanh"
    ppo_epochs: PositiveInt = 10
    value_coef: float = Field(default=0.5, ge=0)
    entropy_coef: float = Field(default=0.0, ge=0)
    max_grad_norm: Optional[float] = Field(default=0.5, gt=0)
    sac_alpha: float = Field(default=0.2, ge=0)
    exploration_noise: float = Field(default=0.1, ge=0)
    learning_starts: int = Field(default=256, ge=0)
    train_freq: PositiveInt = 1
    target_update_interval: Optional[PositiveInt] = None
    normalize_states: bool = True
    kl_lambda: float = Field(default=0.0, ge=0)

    def to_spec(self, seed: int) -> AgentSpec:
        return AgentSpec(**self.model_dump(), seed=seed)


class TrainingSection(Section):
    n_envs: PositiveInt = 16
    horizon: Optional[PositiveInt] = Field(default=None, description="Rollout length; a full episode if null")
    iterations: PositiveInt = 20
    steps: PositiveInt = 20000
    n_workers: PositiveInt = 1


class EnsembleSection(Section):
    members: list[AgentSection] = Field(default_factory=list, min_length=1)
    scheme: Literal["weighted_average", "majority_vote"] = "weighted_average"
    kl_lambda: float = Field(default=0.0, ge=0)
    sharpe_discard_threshold: float = 0.0
    train_window: PositiveInt = 30
    validation_window: PositiveInt = 5
    trade_window: PositiveInt = 5
    risk_free: float = 0.0
    combine_mode: Literal["mean", "mixture"] = "mean"
    iterations: PositiveInt = 10
    steps: PositiveInt = 2000
    n_envs: PositiveInt = 8
    horizon: PositiveInt = 64


class ProtocolSection(Section):
    mode: Literal["backtest", "rolling"] = "backtest"
    train_window: PositiveInt = 6
    validation_window: PositiveInt = 2
    trade_window: PositiveInt = 1
    candidates: list[dict[str, Any]] = Field(default_factory=list)


class MetricsSection(Section):
    periods_per_year: Optional[float] = Field(default=252.0, gt=0, description="Inferred from the bars if null")
    risk_free: float = 0.0
    omega_threshold: float = 0.0
    rachev_alpha: float = Field(default=0.05, gt=0, le=1)
    rachev_beta: float = Field(default=0.05, gt=0, le=1)


class BaselineSection(Section):
    mean_variance_cap: float = Field(default=0.05, gt=0, le=1)
    mean_variance_lookback: int = Field(default=252, ge=2)


class BenchSection(Section):
    n_envs: list[PositiveInt] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64], min_length=1)
    horizon: PositiveInt = 64
    workers: PositiveInt = 1
    synthetic_periods: int = Field(default=512, ge=3)
    synthetic_assets: PositiveInt = 4


class RunConfig(Section):
    """A fully resolved run configuration."""
    profile: Literal["stock_daily", "crypto_second"] = "stock_daily"
    seed: int = Field(description="Top-level seed of every random stream")
    out: Path = Path("runs")
    data: DataSection = Field(default_factory=DataSection)
    env: EnvSection = Field(default_factory=EnvSection)
    agent: AgentSection = Field(default_factory=AgentSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    ensemble: EnsembleSection = Field(default_factory=lambda: EnsembleSection(members=[AgentSection()]))
    protocol: ProtocolSection = Field(default_factory=ProtocolSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    baselines: BaselineSection = Field(default_factory=BaselineSection)
    bench: BenchSection = Field(default_factory=BenchSection)

    def env_config(self) -> EnvConfig:
        return self.env.to_env_config()

    def agent_spec(self) -> AgentSpec:
        return self.agent.to_spec(derive_seed(self.seed, "agent"))

    def ensemble_config(self) -> EnsembleConfig:
        # member seeds are derived per window by the ensemble run
        values = self.ensemble.model_dump(exclude={"members"})
        return EnsembleConfig(
            members=[member.to_spec(0) for member in self.ensemble.members],
            perturbation_range=self.data.perturbation_range,
            **values,
        )

    def metric_options(self, timestamps: Optional[Sequence] = None) -> dict:
        """Keyword arguments of compute_metrics; a null periods_per_year is inferred from `timestamps`."""
        options = self.metrics.model_dump()
        if options["periods_per_year"] is None:
            options["periods_per_year"] = (
                infer_periods_per_year(timestamps) if timestamps is not None else float(TRADING_DAYS_PER_YEAR)
            )
        return options

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Hash of everything but the seed and the output directory."""
        values = self.model_dump(mode="json", exclude={"seed", "out"})
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode("utf-8")).hexdigest()

    def run_id(self, command: str) -> str:
        return f"{command}-{self.digest()[:8]}-s{self.seed}"

    def check_command(self, command: str) -> list[str]:
        """Problems that only matter to one command, e.g. an algorithm that does not fit the action mode."""
        errors = []
        discrete = self.env.action_mode == "discrete"
        if command in ("train", "backtest", "rolling"):
            if (self.agent.algorithm in ("dqn", "double_dqn", "dueling_dqn")) != discrete:
                errors.append(f"agent.algorithm: {self.agent.algorithm} does not fit env.action_mode {self.env.action_mode}")
        if command == "ensemble":
            for i, member in enumerate(self.ensemble.members):
                if (member.algorithm in ("dqn", "double_dqn", "dueling_dqn")) != discrete:
                    errors.append(
                        f"ensemble.members.{i}.algorithm: {member.algorithm} does not fit env.action_mode {self.env.action_mode}"
                    )
            if self.ensemble.scheme == "majority_vote" and not discrete:
                errors.append("ensemble.scheme: majority_vote needs env.action_mode discrete")
        if command == "ingest" and self.data.ohlcv is None:
            errors.append("data.ohlcv: ingest needs an OHLCV file")
        if command in ("train", "backtest", "rolling", "ensemble") and self.data.ohlcv is None and self.data.features is None:
            errors.append("data: one of data.features or data.ohlcv is required")
        return errors


def _path_errors(values: dict, base_dir: Optional[Path]) -> list[str]:
    data = values.get("data")
    if not isinstance(data, dict):
        return []
    errors = []
    for key in PATH_KEYS:
        value = data.get(key)
        if not isinstance(value, (str, Path)):
            continue
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        data[key] = str(path)
        if not path.exists():
            errors.append(f"data.{key}: path '{value}' does not exist")
    return errors


def resolve_run_config(
    values: dict, base_dir: Optional[Path] = None, command: Optional[str] = None
) -> RunConfig:
    """Validates user values on top of the packaged defaults and the chosen profile.

    Args:
        values (dict): User configuration.
        base_dir (Path, optional): Directory relative data paths are resolved against.
        command (str, optional): CLI command whose additional checks apply.

    Raises:
        ConfigException: With every schema, path and command problem found.
    """
    defaults = load_config()
    profiles = defaults.pop("profiles")
    errors = []
    profile_name = values.get("profile", "stock_daily")
    if profile_name not in profiles:
        errors.append(f"profile: unknown profile '{profile_name}'")
        profile_name = "stock_daily"
    merged = deep_merge(deep_merge(defaults, profiles[profile_name]), values)
    merged["profile"] = profile_name

    ensemble = merged.get("ensemble")
    if isinstance(ensemble, dict) and isinstance(ensemble.get("members"), list) and isinstance(merged.get("agent"), dict):
        # members inherit the profile's agent settings
        ensemble["members"] = [
            deep_merge(merged["agent"], member) if isinstance(member, dict) else member
            for member in ensemble["members"]
        ]

    errors.extend(_path_errors(merged, base_dir))
    config = None
    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as error:
        for problem in error.errors():
            location = ".".join(str(part) for part in problem["loc"])
            errors.append(f"{location}: {problem['msg']}")
    if config is not None and command is not None:
        errors.extend(config.check_command(command))
    if errors:
        raise ConfigException(errors)
    logging.debug("run_config: resolved profile %s with seed %s", config.profile, config.seed)
    return config


def load_run_config(
    source: Optional[Union[str, Path]] = None,
    overrides: Optional[dict] = None,
    command: Optional[str] = None,
) -> RunConfig:
    """Reads a YAML run config, applies overrides (e.g. --seed) and validates it.

    Raises:
        ConfigException: If the file cannot be read or the values are invalid.
    """
    values: dict = {}
    base_dir = None
    if source is not None:
        source = Path(source)
        if not source.exists():
            raise ConfigException([f"config file '{source}' does not exist"])
        with open(source, "r") as config_file:
            try:
                values = yaml.safe_load(config_file) or {}
            except yaml.YAMLError as error:
                raise ConfigException([f"config file '{source}' is not valid YAML: {error}"])
        if not isinstance(values, dict):
            raise ConfigException([f"config file '{source}' must hold a mapping"])
        base_dir = source.parent
    values = deep_merge(values, overrides or {})
    return resolve_run_config(values, base_dir=base_dir, command=command)


def write_resolved_config(config: RunConfig, path: Union[str, Path]) -> None:
    with open(path, "w") as output:
        yaml.safe_dump(config.resolved(), output, sort_keys=False)
