"""Evaluation protocols: frozen backtests and rolling retrain-and-trade windows.

Periods are steps between consecutive bars: a panel with n bars has n - 1
periods, and the period range [a, b) trades on bars a..b.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from finrl_bench.env import TradingEnv
from finrl_bench.exceptions import ProtocolViolationException, UndefinedMetricException
from finrl_bench.metrics import compute_metrics, period_returns, sharpe_ratio
from finrl_bench.model import (
    DataSplit,
    EnvConfig,
    EquityCurve,
    FeaturePanel,
    RunResult,
    TradeRecord,
    Window,
    WindowSchedule,
)


class Actor(Protocol):
    def act(self, state: np.ndarray, mode: str = "exploit", seed: Optional[int] = None) -> np.ndarray:
        ...


# Builds an agent from training data and an optional hyperparameter candidate.
AgentFactory = Callable[[FeaturePanel, Optional[dict]], Any]


def make_windows(
    n_periods: int, train: int, validation: int, trade: int, roll: Optional[int] = None
) -> WindowSchedule:
    """Enumerates train / validation / trade windows rolling forward by `roll`.

    Args:
        n_periods (int): Total number of periods T.
        train (int): Train periods X.
        validation (int): Validation periods Y.
        trade (int): Trade periods per window.
        roll (int, optional): Shift between windows. Defaults to `trade`.

    Raises:
        ValueError: If T < X + Y + trade or a length is below 1.

    Returns:
        WindowSchedule: Windows whose retrain range is [z - Y - X, z) for a
            trade range starting at z.
    """
    roll = trade if roll is None else roll
    if min(train, validation, trade, roll) < 1:
        raise ValueError("window lengths and roll must be at least 1.")
    span = train + validation + trade
    if n_periods < span:
        raise ValueError(f"{n_periods} periods are fewer than one window of {span}.")
    windows = []
    for start in range(0, n_periods - span + 1, roll):
        trade_start = start + train + validation
        windows.append(
            Window(
                train=(start, start + train),
                validation=(start + train, trade_start),
                trade=(trade_start, trade_start + trade),
                retrain=(start, trade_start),
            )
        )
    return WindowSchedule(windows)


def period_slice(data: FeaturePanel, periods: tuple[int, int]) -> FeaturePanel:
    """Bars a..b of the period range [a, b)."""
    start, stop = periods
    return data.slice(start, stop + 1)


@dataclass
class Segment:
    timestamps: pd.Index
    values: np.ndarray
    trades: list[TradeRecord]
    balance: float
    holdings: np.ndarray


def trade_segment(
    policy: Actor,
    data: FeaturePanel,
    env_config: EnvConfig,
    balance: Optional[float] = None,
    holdings: Optional[np.ndarray] = None,
) -> Segment:
    """Trades a policy's exploit actions over every period of `data`.

    Returns:
        Segment: One value per bar, trades with a non-zero action or execution,
            and the final portfolio.
    """
    env = TradingEnv(data, env_config)
    options = {}
    if balance is not None:
        options["balance"] = balance
    if holdings is not None:
        options["holdings"] = holdings
    state, info = env.reset(options=options)
    values = [info["value"]]
    trades = []
    terminated = False
    while not terminated:
        t = env.simulator.t
        action = np.asarray(policy.act(state, mode="exploit"), dtype=float).reshape(-1)
        state, _, terminated, _, info = env.step(action)
        values.append(info["value"])
        for k, asset in enumerate(data.base.assets):
            if action[k] != 0 or info["executed"][k] != 0:
                trades.append(
                    TradeRecord(
                        timestamp=data.timestamps[t],
                        asset=asset,
                        action=float(action[k]),
                        executed=float(info["executed"][k]),
                        price=float(data.prices[t, k]),
                        cost=float(info["costs"][k]),
                        balance=info["balance"],
                        value=info["value"],
                    )
                )
    return Segment(
        timestamps=data.timestamps,
        values=np.asarray(values),
        trades=trades,
        balance=float(env.simulator.balance[0]),
        holdings=env.simulator.holdings[0].copy(),
    )


class EquityChain:
    """Joins consecutive trading segments into one continuous equity curve.

    Segments share their boundary bar. Unless positions are carried, the
    portfolio is liquidated at each boundary, paying the trading cost, and
    the next segment starts from cash.
    """

    def __init__(self, env_config: EnvConfig):
        self.env_config = env_config
        self.timestamps: list = []
        self.values: list[float] = []
        self.trades: list[TradeRecord] = []
        self._last: Optional[Segment] = None
        self._assets: list[str] = []
        self._prices: Optional[np.ndarray] = None

    def _opening_portfolio(self) -> tuple[Optional[float], Optional[np.ndarray]]:
        last = self._last
        if last is None:
            return None, None
        if self.env_config.carry_positions:
            return last.balance, last.holdings
        proceeds = self._prices * last.holdings
        costs = proceeds * self.env_config.cost_rate
        balance = last.balance + float(proceeds.sum() - costs.sum())
        for k, asset in enumerate(self._assets):
            if last.holdings[k] > 0:
                self.trades.append(
                    TradeRecord(
                        timestamp=last.timestamps[-1],
                        asset=asset,
                        action=-float(last.holdings[k]),
                        executed=-float(last.holdings[k]),
                        price=float(self._prices[k]),
                        cost=float(costs[k]),
                        balance=balance,
                        value=balance,
                    )
                )
        return balance, np.zeros_like(last.holdings)

    def run(self, policy: Actor, data: FeaturePanel) -> Segment:
        balance, holdings = self._opening_portfolio()
        segment = trade_segment(policy, data, self.env_config, balance, holdings)
        if self._last is None:
            self.timestamps.extend(segment.timestamps)
            self.values.extend(segment.values.tolist())
        else:
            self.values[-1] = float(segment.values[0])
            self.timestamps.extend(segment.timestamps[1:])
            self.values.extend(segment.values[1:].tolist())
        self.trades.extend(segment.trades)
        self._last = segment
        self._assets = list(data.base.assets)
        self._prices = data.prices[-1]
        return segment

    def curve(self) -> EquityCurve:
        return EquityCurve(timestamps=pd.Index(self.timestamps), values=np.asarray(self.values))


def validation_sharpe(policy: Actor, data: FeaturePanel, env_config: EnvConfig, risk_free: float = 0.0) -> Optional[float]:
    """Per-period Sharpe ratio of trading `data` from fresh cash; None if undefined."""
    segment = trade_segment(policy, data, env_config)
    try:
        return sharpe_ratio(period_returns(segment.values), risk_free)
    except UndefinedMetricException:
        return None


def run_backtest(
    factory: AgentFactory,
    split: DataSplit,
    env_config: EnvConfig,
    metric_options: Optional[dict] = None,
) -> RunResult:
    """Trains once on the released data, freezes, and trades the withheld data.

    Raises:
        ProtocolViolationException: If the agent is updated during evaluation.
    """
    logging.info("protocol: backtest over %s evaluation bars", split.eval.n_periods)
    agent = factory(split.train, None)
    agent.freeze()
    updates = agent.update_count
    segment = trade_segment(agent, split.eval, env_config)
    if agent.update_count != updates:
        raise ProtocolViolationException("the agent was updated during backtest evaluation")
    curve = EquityCurve(timestamps=segment.timestamps, values=segment.values)
    return RunResult(curve=curve, metrics=compute_metrics(curve, **(metric_options or {})), trades=segment.trades)


def run_rolling(
    factory: AgentFactory,
    data: FeaturePanel,
    env_config: EnvConfig,
    train: int,
    validation: int,
    trade: int = 1,
    candidates: Optional[Sequence[dict]] = None,
    metric_options: Optional[dict] = None,
) -> RunResult:
    """Rolling retrain-and-trade loop over every window that fits the data.

    Per window: each hyperparameter candidate is trained on the train range
    and scored by its validation Sharpe, the best one is retrained on train
    plus validation, frozen and traded for `trade` periods. Windows roll by
    `trade`, so every period after the first window's validation is traded
    exactly once.
    """
    schedule = make_windows(data.n_periods - 1, train, validation, trade, roll=trade)
    logging.info("protocol: rolling over %s windows", len(schedule))
    chain = EquityChain(env_config)
    for window in schedule:
        best = None
        if candidates:
            scores = []
            for candidate in candidates:
                agent = factory(period_slice(data, window.train), candidate)
                agent.freeze()
                score = validation_sharpe(agent, period_slice(data, window.validation), env_config)
                scores.append(-np.inf if score is None else score)
            best = candidates[int(np.argmax(scores))]
            logging.debug("protocol: window %s picks candidate %s", window.trade, best)
        agent = factory(period_slice(data, window.retrain), best)
        agent.freeze()
        chain.run(agent, period_slice(data, window.trade))
    curve = chain.curve()
    return RunResult(
        curve=curve,
        metrics=compute_metrics(curve, **(metric_options or {})),
        trades=chain.trades,
        schedule=schedule,
    )


def run_protocol(
    mode: str,
    factory: AgentFactory,
    data,
    env_config: EnvConfig,
    metric_options: Optional[dict] = None,
    **options,
) -> RunResult:
    """Runs mode 'backtest' on a DataSplit or mode 'rolling' on a FeaturePanel.

    Rolling mode takes the keyword options of `run_rolling`.
    """
    if mode == "backtest":
        if not isinstance(data, DataSplit):
            raise ValueError("backtest mode needs a DataSplit.")
        return run_backtest(factory, data, env_config, metric_options)
    if mode == "rolling":
        if isinstance(data, DataSplit):
            raise ValueError("rolling mode needs a FeaturePanel.")
        return run_rolling(factory, data, env_config, metric_options=metric_options, **options)
    raise ValueError(f"unknown protocol mode '{mode}'")
