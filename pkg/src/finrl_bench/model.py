from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

ALGORITHMS = ("ppo", "ddpg", "sac", "dqn", "double_dqn", "dueling_dqn")
CONTINUOUS_ALGORITHMS = ("ppo", "ddpg", "sac")
DISCRETE_ALGORITHMS = ("dqn", "double_dqn", "dueling_dqn")

OHLCV_COLUMNS = ("open", "high", "low", "close", "volume")


### Market data
@dataclass(frozen=True, eq=False)
class PanelData:
    """Time-ordered OHLCV bars, one T×K array per field."""
    timestamps: pd.Index
    assets: list[str]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    @property
    def n_periods(self) -> int:
        return len(self.timestamps)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def slice(self, start: int, stop: int) -> "PanelData":
        return PanelData(
            timestamps=self.timestamps[start:stop],
            assets=list(self.assets),
            open=self.open[start:stop],
            high=self.high[start:stop],
            low=self.low[start:stop],
            close=self.close[start:stop],
            volume=self.volume[start:stop],
        )

    def to_frame(self) -> pd.DataFrame:
        """Long format, one row per (timestamp, asset)."""
        n_periods, n_assets = self.close.shape
        frame = pd.DataFrame(
            {
                "timestamp": np.repeat(np.asarray(self.timestamps), n_assets),
                "asset": np.tile(np.asarray(self.assets, dtype=object), n_periods),
            }
        )
        for column in OHLCV_COLUMNS:
            frame[column] = getattr(self, column).reshape(-1)
        return frame


@dataclass(frozen=True, eq=False)
class FeaturePanel:
    """A panel plus a T×K×I feature tensor."""
    base: PanelData
    features: np.ndarray
    feature_names: list[str]

    @property
    def timestamps(self) -> pd.Index:
        return self.base.timestamps

    @property
    def prices(self) -> np.ndarray:
        return self.base.close

    @property
    def n_periods(self) -> int:
        return self.base.n_periods

    @property
    def n_assets(self) -> int:
        return self.base.n_assets

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def slice(self, start: int, stop: int) -> "FeaturePanel":
        return FeaturePanel(
            base=self.base.slice(start, stop),
            features=self.features[start:stop],
            feature_names=list(self.feature_names),
        )

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, :, self.feature_names.index(name)]

    def with_features(self, names: Sequence[str], values: np.ndarray) -> "FeaturePanel":
        """Appends T×K×len(names) values to the feature tensor."""
        return FeaturePanel(
            base=self.base,
            features=np.concatenate([self.features, values], axis=2),
            feature_names=list(self.feature_names) + list(names),
        )


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: FeaturePanel
    eval: FeaturePanel
    boundary: Any


### Environment
@dataclass
class EnvConfig:
    initial_balance: float = 1_000_000.0
    cost_rate: float = 0.001
    turbulence_threshold: Optional[float] = None
    gamma: float = 0.99
    action_mode: str = "continuous"
    max_shares: float = 100.0
    discrete_levels: tuple[int, ...] = (-1, 0, 1)
    trade_size: float = 1.0
    reward_scaling: float = 1.0
    apply_signals: bool = False
    carry_positions: bool = False

    def __post_init__(self):
        if not 0.0 <= self.cost_rate <= 0.05:
            raise ValueError("cost_rate must lie in [0, 0.05].")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1).")
        if self.action_mode not in ("continuous", "discrete"):
            raise ValueError("action_mode must be 'continuous' or 'discrete'.")
        if self.initial_balance < 0:
            raise ValueError("initial_balance must be non-negative.")
        self.discrete_levels = tuple(int(level) for level in self.discrete_levels)

    @property
    def level_values(self) -> np.ndarray:
        """Share amounts of the discrete action levels."""
        return np.asarray(self.discrete_levels, dtype=float) * self.trade_size

    @classmethod
    def from_dict(cls, values: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})


@dataclass
class MarketState:
    balance: float
    prices: np.ndarray
    holdings: np.ndarray
    features: np.ndarray
    t: int

    def flatten(self) -> np.ndarray:
        """[b, p, h, f] with length K(I+2)+1."""
        return np.concatenate(
            [[self.balance], self.prices, self.holdings, np.ravel(self.features)]
        )

    @staticmethod
    def dimension(n_assets: int, n_features: int) -> int:
        return n_assets * (n_features + 2) + 1


### Rollouts
@dataclass(eq=False)
class TrajectoryBatch:
    """Structure-of-arrays rollout storage of shape N×T×D."""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    mask: np.ndarray
    log_probs: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    next_states: Optional[np.ndarray] = None
    initial_values: Optional[np.ndarray] = None
    final_values: Optional[np.ndarray] = None

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]


@dataclass(eq=False)
class GradientEstimate:
    grad: np.ndarray
    baseline: float
    n: int


### Agents
@dataclass
class AgentSpec:
    algorithm: str = "ppo"
    hidden_sizes: tuple[int, ...] = (64, 32)
    learning_rate: float = 3e-4
    batch_size: int = 64
    gamma: float = 0.99
    epsilon: float = 0.0
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    tau: float = 0.005
    replay_capacity: int = 100_000
    seed: int = 0
    activation: str = "tanh"
    ppo_epochs: int = 10
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    sac_alpha: float = 0.2
    exploration_noise: float = 0.1
    learning_starts: int = 256
    train_freq: int = 1
    target_update_interval: Optional[int] = None
    normalize_states: bool = True
    kl_lambda: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"Unknown algorithm '{self.algorithm}'.")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive.")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1).")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1].")
        if self.kl_lambda < 0:
            raise ValueError("kl_lambda must be non-negative.")
        self.hidden_sizes = tuple(int(size) for size in self.hidden_sizes)

    @property
    def is_discrete(self) -> bool:
        return self.algorithm in DISCRETE_ALGORITHMS

    def with_seed(self, seed: int) -> "AgentSpec":
        return replace(self, seed=seed)

    @classmethod
    def from_dict(cls, values: dict) -> "AgentSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})


### Ensembles
@dataclass
class EnsembleConfig:
    members: list[AgentSpec]
    scheme: str = "weighted_average"
    kl_lambda: float = 0.0
    sharpe_discard_threshold: float = 0.0
    train_window: int = 30
    validation_window: int = 5
    trade_window: int = 5
    risk_free: float = 0.0
    combine_mode: str = "mean"
    perturbation_range: float = 0.0
    iterations: int = 10
    steps: int = 2000
    n_envs: int = 8
    horizon: int = 64

    def __post_init__(self):
        if not self.members:
            raise ValueError("An ensemble needs at least one member.")
        if self.scheme not in ("weighted_average", "majority_vote"):
            raise ValueError("scheme must be 'weighted_average' or 'majority_vote'.")
        if self.kl_lambda < 0:
            raise ValueError("kl_lambda must be non-negative.")
        if min(self.train_window, self.validation_window, self.trade_window) < 1:
            raise ValueError("Window lengths must be at least 1.")
        if self.combine_mode not in ("mean", "mixture"):
            raise ValueError("combine_mode must be 'mean' or 'mixture'.")


### Evaluation
@dataclass(eq=False)
class EquityCurve:
    timestamps: pd.Index
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values must have the same length.")

    @property
    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"timestamp": np.asarray(self.timestamps), "value": self.values})


@dataclass
class MetricsReport:
    """The eleven evaluation metrics. None marks an undefined value."""
    cumulative_return: Optional[float]
    annualized_return: Optional[float]
    annualized_volatility: Optional[float]
    sharpe: Optional[float]
    sortino: Optional[float]
    calmar: Optional[float]
    omega: Optional[float]
    rachev: Optional[float]
    max_drawdown: Optional[float]
    romad: Optional[float]
    win_loss: Optional[float]

    def to_dict(self) -> dict[str, Optional[float]]:
        return asdict(self)


@dataclass(frozen=True)
class Window:
    """Half-open period ranges of one rolling window."""
    train: tuple[int, int]
    validation: tuple[int, int]
    trade: tuple[int, int]
    retrain: tuple[int, int]


@dataclass
class WindowSchedule:
    windows: list[Window] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


@dataclass
class TradeRecord:
    timestamp: Any
    asset: str
    action: float
    executed: float
    price: float
    cost: float
    balance: float
    value: float


@dataclass(eq=False)
class RunResult:
    """Outcome of an evaluation protocol or ensemble run."""
    curve: EquityCurve
    metrics: MetricsReport
    trades: list[TradeRecord] = field(default_factory=list)
    schedule: Optional[WindowSchedule] = None
    weights: list[Optional[list[float]]] = field(default_factory=list)

    def trades_frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(TradeRecord)]
        return pd.DataFrame([asdict(trade) for trade in self.trades], columns=columns)


### Signals
@dataclass(eq=False)
class SignalSeries:
    """Long-format frame with columns timestamp, asset, sentiment, risk."""
    frame: pd.DataFrame

    def __post_init__(self):
        for column in ("sentiment", "risk"):
            present = self.frame[column].dropna()
            if ((present < 1) | (present > 5) | (present != np.round(present))).any():
                raise ValueError(f"{column} scores must be integers in [1, 5].")
