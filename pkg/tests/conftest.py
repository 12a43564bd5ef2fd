"""
    Shared fixtures: small hand-made panels and toy environments with known optima.
"""
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import pytest

from finrl_bench.marketdata import synthetic_panel
from finrl_bench.model import EnvConfig, FeaturePanel, PanelData

__author__ = "finrl-bench developers"
__copyright__ = "finrl-bench developers"
__license__ = "MIT"


def build_panel(
    close: np.ndarray,
    features: Optional[np.ndarray] = None,
    feature_names: Optional[Sequence[str]] = None,
    start: str = "2021-01-04",
    freq: str = "D",
) -> FeaturePanel:
    """FeaturePanel over a T×K close array; open/high/low equal the close."""
    close = np.asarray(close, dtype=float)
    if close.ndim == 1:
        close = close[:, None]
    n_periods, n_assets = close.shape
    base = PanelData(
        timestamps=pd.date_range(start, periods=n_periods, freq=freq),
        assets=[f"A{i}" for i in range(n_assets)],
        open=close.copy(),
        high=close.copy(),
        low=close.copy(),
        close=close,
        volume=np.full((n_periods, n_assets), 1000.0),
    )
    if features is None:
        features = np.zeros((n_periods, n_assets, 0))
        feature_names = []
    return FeaturePanel(base=base, features=np.asarray(features, dtype=float), feature_names=list(feature_names))


@pytest.fixture
def panel_builder():
    return build_panel


@pytest.fixture
def random_panel() -> FeaturePanel:
    """40 bars of 3 random-walk assets with two random features."""
    panel = synthetic_panel(40, 3, seed=7)
    rng = np.random.default_rng(7)
    return FeaturePanel(base=panel, features=rng.normal(size=(40, 3, 2)), feature_names=["f0", "f1"])


@pytest.fixture
def uptrend_panel() -> FeaturePanel:
    """One asset rising deterministically from 100 to 130 over 31 bars, no features."""
    return build_panel(np.linspace(100.0, 130.0, 31))


class ChainVecEnv:
    """Two-state chain: level 1 switches the state, level 0 stays.

    Every step pays 1 if the chain is in state 1 afterwards. States are
    one-hot, starts are random and episodes are truncated after `horizon`
    steps, so the value of the last state is bootstrapped.
    """

    state_dim = 2
    n_assets = 1

    def __init__(self, n_envs: int = 8, horizon: int = 20, gamma: float = 0.9, seed: int = 0):
        self.n_envs = n_envs
        self.horizon = horizon
        self.config = EnvConfig(action_mode="discrete", discrete_levels=(0, 1), gamma=gamma)
        self._rng = np.random.default_rng(seed)
        self.position = np.zeros(n_envs, dtype=int)
        self.t = 0

    @staticmethod
    def next_state(state: int, action: int) -> int:
        return 1 - state if action == 1 else state

    @staticmethod
    def reward(state: int, action: int) -> float:
        return float(ChainVecEnv.next_state(state, action) == 1)

    def _states(self) -> np.ndarray:
        return np.eye(2)[self.position]

    def reset(self, seed=None, options=None):
        self.position = self._rng.integers(0, 2, size=self.n_envs)
        self.t = 0
        return self._states(), {"values": np.zeros(self.n_envs)}

    def step(self, actions):
        switch = np.asarray(actions, dtype=float).reshape(self.n_envs, -1)[:, 0] > 0.5
        self.position = np.where(switch, 1 - self.position, self.position)
        rewards = (self.position == 1).astype(float)
        self.t += 1
        truncated = np.full(self.n_envs, self.t >= self.horizon)
        terminated = np.zeros(self.n_envs, dtype=bool)
        return self._states(), rewards, terminated, truncated, {}

    def close(self):
        pass


class LineVecEnv:
    """Four positions on a line moved by levels (-1, 0, 1), clipped at the ends.

    Reaching or staying at the last position pays 1 and every non-zero level
    costs 0.5, so the optimal greedy level depends on the position. States are
    one-hot, starts are random and episodes are truncated after `horizon` steps.
    """

    state_dim = 4
    n_assets = 1
    levels = (-1, 0, 1)

    def __init__(self, n_envs: int = 8, horizon: int = 20, gamma: float = 0.9, seed: int = 0):
        self.n_envs = n_envs
        self.horizon = horizon
        self.config = EnvConfig(action_mode="discrete", discrete_levels=self.levels, gamma=gamma)
        self._rng = np.random.default_rng(seed)
        self.position = np.zeros(n_envs, dtype=int)
        self.t = 0

    @staticmethod
    def next_state(state: int, level: int) -> int:
        return min(max(state + level, 0), 3)

    @staticmethod
    def reward(state: int, level: int) -> float:
        return float(LineVecEnv.next_state(state, level) == 3) - 0.5 * abs(level)

    def _states(self) -> np.ndarray:
        return np.eye(4)[self.position]

    def reset(self, seed=None, options=None):
        self.position = self._rng.integers(0, 4, size=self.n_envs)
        self.t = 0
        return self._states(), {"values": np.zeros(self.n_envs)}

    def step(self, actions):
        levels = np.rint(np.asarray(actions, dtype=float).reshape(self.n_envs, -1)[:, 0]).astype(int)
        rewards = np.array([self.reward(s, a) for s, a in zip(self.position, levels)])
        self.position = np.clip(self.position + levels, 0, 3)
        self.t += 1
        truncated = np.full(self.n_envs, self.t >= self.horizon)
        terminated = np.zeros(self.n_envs, dtype=bool)
        return self._states(), rewards, terminated, truncated, {}

    def close(self):
        pass


class BanditVecEnv:
    """One-step bandit paying the first action component as reward."""

    state_dim = 1
    n_assets = 1

    def __init__(self, n_envs: int):
        self.n_envs = n_envs
        self.config = EnvConfig()

    def reset(self, seed=None, options=None):
        return np.ones((self.n_envs, 1)), {"values": np.zeros(self.n_envs)}

    def step(self, actions):
        rewards = np.asarray(actions, dtype=float)[:, 0]
        done = np.ones(self.n_envs, dtype=bool)
        return np.ones((self.n_envs, 1)), rewards, done, np.zeros(self.n_envs, dtype=bool), {"values": rewards}


class GaussianMeanPolicy:
    """a ~ N(theta, 1) regardless of the state; grad log pi = a - theta."""

    def __init__(self, theta: float):
        self.theta = theta

    def sample(self, states, rng):
        actions = self.theta + rng.standard_normal((states.shape[0], 1))
        log_probs = -0.5 * (actions[:, 0] - self.theta) ** 2 - 0.5 * np.log(2 * np.pi)
        return actions, actions, log_probs

    def score(self, states, actions, weights):
        return np.array([float((weights * (actions[:, 0] - self.theta)).sum())])


@pytest.fixture
def chain_env_factory():
    return ChainVecEnv


@pytest.fixture
def line_env_factory():
    return LineVecEnv


@pytest.fixture
def bandit_env_factory():
    return BanditVecEnv


@pytest.fixture
def gaussian_policy_factory():
    return GaussianMeanPolicy
