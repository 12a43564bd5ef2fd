"""Gym-style trading environment over a feature panel.

The trading rules live in `MarketSimulator`, which advances any number of
sub-environments in lockstep. `TradingEnv` is the one-row case and
`finrl_bench.vecenv.VecTradingEnv` the many-row case, so both run the very
same arithmetic.
"""
import logging
from typing import Any, Optional, Sequence

import gymnasium as gym
import numpy as np

from finrl_bench.exceptions import (
    EnvironmentException,
    EpisodeDoneException,
    InvalidActionException,
    InvariantViolationException,
)
from finrl_bench.model import EnvConfig, FeaturePanel, MarketState
from finrl_bench.signals import portfolio_weights, risk_penalty_factor, sentiment_factor


def total_asset_value(state: MarketState) -> float:
    """v_t = b_t + sum(p_t * h_t)."""
    return float(
        portfolio_value(
            np.array([state.balance], dtype=float),
            np.atleast_2d(np.asarray(state.prices, dtype=float)),
            np.atleast_2d(np.asarray(state.holdings, dtype=float)),
        )[0]
    )


def portfolio_value(balance: np.ndarray, prices: np.ndarray, holdings: np.ndarray) -> np.ndarray:
    """Row-wise b + p·h, accumulated in asset order."""
    value = balance.copy()
    for k in range(prices.shape[1]):
        value = value + prices[:, k] * holdings[:, k]
    return value


def execute_trades(
    balance: np.ndarray,
    prices: np.ndarray,
    holdings: np.ndarray,
    actions: np.ndarray,
    cost_rate: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Executes sells, then buys in ascending asset order, at the given prices.

    Sells are clipped to the shares held, buys to the cash left including
    their cost. The cost is cost_rate times the traded value on both sides.

    Returns:
        tuple: New balance (N,), new holdings (N, K), executed shares (N, K)
            with sells negative, and costs (N, K).
    """
    balance = balance.copy()
    holdings = holdings.copy()
    executed = np.zeros_like(actions)
    costs = np.zeros_like(actions)
    for k in range(actions.shape[1]):
        sold = np.minimum(np.maximum(-actions[:, k], 0.0), holdings[:, k])
        proceeds = prices[:, k] * sold
        fee = proceeds * cost_rate
        balance = balance + proceeds - fee
        holdings[:, k] = holdings[:, k] - sold
        executed[:, k] = -sold
        costs[:, k] = fee
    for k in range(actions.shape[1]):
        affordable = balance / (prices[:, k] * (1.0 + cost_rate))
        bought = np.minimum(np.maximum(actions[:, k], 0.0), affordable)
        spent = prices[:, k] * bought
        fee = spent * cost_rate
        # rounding can leave -1 ulp after spending everything
        balance = np.maximum(balance - spent - fee, 0.0)
        holdings[:, k] = holdings[:, k] + bought
        executed[:, k] = executed[:, k] + bought
        costs[:, k] = costs[:, k] + fee
    return balance, holdings, executed, costs


class MarketSimulator:
    """N sub-environments advanced in lockstep over equally long panels.

    Rows are independent; `step_rows` may be called concurrently on disjoint
    row ranges before `advance` moves the shared clock forward.
    """

    def __init__(self, panels: Sequence[FeaturePanel], config: EnvConfig, n_rows: Optional[int] = None):
        if not panels:
            raise EnvironmentException("The environment is not bound to any data.")
        first = panels[0]
        for panel in panels[1:]:
            if panel.n_periods != first.n_periods or panel.n_assets != first.n_assets:
                raise EnvironmentException("All sub-environment panels must have the same shape.")
            if panel.feature_names != first.feature_names:
                raise EnvironmentException("All sub-environment panels must have the same features.")
        if first.n_periods < 2:
            raise EnvironmentException("A trading environment needs at least two timestamps.")

        self.config = config
        self.n_rows = n_rows if n_rows is not None else len(panels)
        if len(panels) == 1:
            self.prices = np.broadcast_to(first.prices[None], (self.n_rows,) + first.prices.shape)
            self.features = np.broadcast_to(first.features[None], (self.n_rows,) + first.features.shape)
        elif len(panels) == self.n_rows:
            self.prices = np.stack([panel.prices for panel in panels])
            self.features = np.stack([panel.features for panel in panels])
        else:
            raise EnvironmentException("Pass one panel, or one panel per sub-environment.")

        self.timestamps = first.timestamps
        self.feature_names = list(first.feature_names)
        self.n_periods = first.n_periods
        self.n_assets = first.n_assets
        self.n_features = first.n_features
        self.state_dim = MarketState.dimension(self.n_assets, self.n_features)
        self._turbulence_index = self._index_of("turbulence")
        self._sentiment_index = self._index_of("sentiment")
        self._risk_index = self._index_of("risk")
        self.t = 0
        self.balance = np.zeros(self.n_rows)
        self.holdings = np.zeros((self.n_rows, self.n_assets))
        self.done = True

    def _index_of(self, name: str) -> Optional[int]:
        return self.feature_names.index(name) if name in self.feature_names else None

    def reset(self, balance: Optional[np.ndarray] = None, holdings: Optional[np.ndarray] = None) -> None:
        self.t = 0
        if balance is None:
            balance = np.full(self.n_rows, float(self.config.initial_balance))
        if holdings is None:
            holdings = np.zeros((self.n_rows, self.n_assets))
        self.balance = np.array(np.broadcast_to(balance, (self.n_rows,)), dtype=float)
        self.holdings = np.array(np.broadcast_to(holdings, (self.n_rows, self.n_assets)), dtype=float)
        self.done = False

    def observations(self, rows: slice = slice(None)) -> np.ndarray:
        balance = self.balance[rows]
        features = self.features[rows, self.t]
        return np.concatenate(
            [
                balance[:, None],
                self.prices[rows, self.t],
                self.holdings[rows],
                features.reshape(features.shape[0], -1),
            ],
            axis=1,
        )

    def values(self, rows: slice = slice(None)) -> np.ndarray:
        return portfolio_value(self.balance[rows], self.prices[rows, self.t], self.holdings[rows])

    def validate_actions(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n_rows, self.n_assets):
            raise InvalidActionException(
                f"expected actions of shape {(self.n_rows, self.n_assets)}, got {actions.shape}"
            )
        if not np.isfinite(actions).all():
            raise InvalidActionException("actions must be finite")
        if self.config.action_mode == "discrete" and not np.isin(actions, self.config.level_values).all():
            raise InvalidActionException(
                f"discrete actions must be one of {self.config.level_values.tolist()}"
            )
        return actions

    def step_rows(self, rows: slice, actions: np.ndarray) -> dict[str, np.ndarray]:
        """Trades rows at p_t and marks them at p_{t+1}; does not move the clock."""
        t = self.t
        prices = self.prices[rows, t]
        next_prices = self.prices[rows, t + 1]
        balance = self.balance[rows]
        holdings = self.holdings[rows]

        if self.config.apply_signals and self._sentiment_index is not None:
            actions = sentiment_factor(self.features[rows, t, :, self._sentiment_index], actions)

        gated = np.zeros(balance.shape[0], dtype=bool)
        threshold = self.config.turbulence_threshold
        if threshold is not None and self._turbulence_index is not None:
            gated = self.features[rows, t, 0, self._turbulence_index] > threshold
            actions = np.where(gated[:, None], -holdings, actions)

        value_before = portfolio_value(balance, prices, holdings)
        new_balance, new_holdings, executed, costs = execute_trades(
            balance, prices, holdings, actions, self.config.cost_rate
        )
        value_after = portfolio_value(new_balance, next_prices, new_holdings)
        rewards = value_after - value_before

        multiplier = np.ones(balance.shape[0])
        if self.config.apply_signals and self._risk_index is not None:
            weights = portfolio_weights(new_balance, prices, new_holdings)
            multiplier = risk_penalty_factor(self.features[rows, t, :, self._risk_index], weights)
            rewards = rewards / multiplier
        rewards = rewards * self.config.reward_scaling

        if (new_balance < 0).any() or (new_holdings < 0).any():
            raise InvariantViolationException("balance or holdings became negative")
        self.balance[rows] = new_balance
        self.holdings[rows] = new_holdings
        return {
            "rewards": rewards,
            "executed": executed,
            "costs": costs,
            "values": value_after,
            "gated": gated,
            "risk_multiplier": multiplier,
        }

    def advance(self) -> bool:
        self.t += 1
        self.done = self.t >= self.n_periods - 1
        return self.done


class TradingEnv(gym.Env):
    """Single trading environment with the market MDP and trading constraints.

    Observation: [b_t, p_t, h_t, f_t] of length K(I+2)+1.
    Action: shares to trade per asset, positive buys and negative sells.
    Reward: change of the total asset value, times reward_scaling and
    divided by the risk multiplier when signals are applied.
    """

    metadata = {"render_modes": []}

    def __init__(self, data: Optional[FeaturePanel], config: Optional[EnvConfig] = None):
        super().__init__()
        if data is None:
            raise EnvironmentException("The environment is not bound to any data.")
        self.config = config or EnvConfig()
        self.data = data
        self.simulator = MarketSimulator([data], self.config)
        self.observation_space = gym.spaces.Box(
            low=-np.inf, high=np.inf, shape=(self.simulator.state_dim,), dtype=np.float64
        )
        if self.config.action_mode == "continuous":
            bound = self.config.max_shares
        else:
            bound = float(np.max(np.abs(self.config.level_values)))
        self.action_space = gym.spaces.Box(
            low=-bound, high=bound, shape=(data.n_assets,), dtype=np.float64
        )
        logging.debug(
            "TradingEnv: created (periods=%s, assets=%s, features=%s)",
            data.n_periods,
            data.n_assets,
            data.n_features,
        )

    @property
    def state(self) -> MarketState:
        simulator = self.simulator
        return MarketState(
            balance=float(simulator.balance[0]),
            prices=simulator.prices[0, simulator.t].copy(),
            holdings=simulator.holdings[0].copy(),
            features=simulator.features[0, simulator.t].copy(),
            t=simulator.t,
        )

    def reset(self, seed: Optional[int] = None, options: Optional[dict[str, Any]] = None):
        """Resets to t=0 with the initial balance and no holdings.

        Args:
            seed (int, optional): Accepted for API compatibility; the initial
                state is deterministic.
            options (dict, optional): 'balance' and 'holdings' to start from
                an existing portfolio instead.

        Returns:
            tuple: Observation and info with the total asset value.
        """
        super().reset(seed=seed)
        options = options or {}
        self.simulator.reset(options.get("balance"), options.get("holdings"))
        return self.simulator.observations()[0], {"value": float(self.simulator.values()[0])}

    def step(self, action):
        if self.simulator.done:
            raise EpisodeDoneException("step() called on a finished episode; call reset().")
        actions = self.simulator.validate_actions(np.reshape(np.asarray(action, dtype=float), (1, -1)))
        result = self.simulator.step_rows(slice(None), actions)
        terminated = self.simulator.advance()
        info = {
            "t": self.simulator.t,
            "executed": result["executed"][0],
            "costs": result["costs"][0],
            "value": float(result["values"][0]),
            "balance": float(self.simulator.balance[0]),
            "gated": bool(result["gated"][0]),
            "risk_multiplier": float(result["risk_multiplier"][0]),
        }
        return self.simulator.observations()[0], float(result["rewards"][0]), terminated, False, info
