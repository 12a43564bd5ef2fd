"""Passive baselines: buy-and-hold and capped mean-variance allocation."""
import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from finrl_bench.model import EquityCurve

RIDGE = 1e-8


def project_capped_simplex(v: np.ndarray, cap: float, iterations: int = 200) -> np.ndarray:
    """Euclidean projection onto {w : sum(w) = 1, 0 <= w <= cap}.

    The projection is clip(v - tau, 0, cap) for the tau at which the weights
    sum to one; tau is found by bisection.
    """
    v = np.asarray(v, dtype=float)
    if v.size * cap < 1.0:
        raise ValueError(f"cap {cap} is infeasible for {v.size} assets.")
    low, high = float(v.min()) - cap, float(v.max())
    for _ in range(iterations):
        tau = 0.5 * (low + high)
        if np.clip(v - tau, 0.0, cap).sum() > 1.0:
            low = tau
        else:
            high = tau
        if high - low <= 0.0:
            break
    return np.clip(v - 0.5 * (low + high), 0.0, cap)


def mean_variance_objective(weights: np.ndarray, mean: np.ndarray, covariance: np.ndarray, risk_aversion: float) -> float:
    """mu'w - rho/2 w'Σw."""
    return float(mean @ weights - 0.5 * risk_aversion * weights @ covariance @ weights)


def tangency_risk_aversion(mean: np.ndarray, covariance: np.ndarray) -> float:
    """rho = 1'Σ^-1 mu, so that Σ^-1 mu / rho is the tangency portfolio; 1 if that is not positive."""
    rho = float(np.ones(mean.size) @ np.linalg.solve(covariance, mean))
    return rho if np.isfinite(rho) and rho > 0 else 1.0


def mean_variance_weights(
    returns_window: np.ndarray,
    cap: float = 0.05,
    risk_aversion: Optional[float] = None,
    max_iterations: int = 20000,
    tolerance: float = 1e-13,
) -> np.ndarray:
    """Maximizes mu'w - rho/2 w'Σw over the capped simplex by accelerated projected gradient.

    Args:
        returns_window (np.ndarray): T×K per-period returns.
        cap (float, optional): Upper bound of every weight.
        risk_aversion (float, optional): rho; defaults to the tangency calibration.
        max_iterations (int, optional): Iteration budget.
        tolerance (float, optional): Stop when the step is below this norm.

    Raises:
        ValueError: If K * cap < 1 or there are fewer than two rows.

    Returns:
        np.ndarray: Weights summing to 1, each in [0, cap].
    """
    returns_window = np.atleast_2d(np.asarray(returns_window, dtype=float))
    n_rows, n_assets = returns_window.shape
    if n_rows < 2:
        raise ValueError("mean-variance weights need at least two return rows.")
    if n_assets * cap < 1.0:
        raise ValueError(f"cap {cap} is infeasible for {n_assets} assets.")
    mean = returns_window.mean(axis=0)
    covariance = np.atleast_2d(np.cov(returns_window, rowvar=False)) + RIDGE * np.eye(n_assets)
    rho = tangency_risk_aversion(mean, covariance) if risk_aversion is None else risk_aversion
    lipschitz = rho * float(np.linalg.eigvalsh(covariance).max())
    step = 1.0 / lipschitz

    weights = project_capped_simplex(np.full(n_assets, 1.0 / n_assets), cap)
    momentum = weights.copy()
    acceleration = 1.0
    for iteration in range(max_iterations):
        gradient = mean - rho * covariance @ momentum
        updated = project_capped_simplex(momentum + step * gradient, cap)
        next_acceleration = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * acceleration * acceleration))
        momentum = updated + ((acceleration - 1.0) / next_acceleration) * (updated - weights)
        moved = float(np.linalg.norm(updated - weights))
        weights, acceleration = updated, next_acceleration
        if moved < tolerance:
            break
    logging.debug("baselines: mean_variance_weights converged after %s iterations (rho=%s)", iteration + 1, rho)
    return weights


def buy_and_hold(
    prices: np.ndarray,
    timestamps: Optional[Sequence] = None,
    initial_balance: float = 1_000_000.0,
    cost_rate: float = 0.0,
    weights: Optional[np.ndarray] = None,
) -> EquityCurve:
    """Invests everything at the first bar and holds.

    Args:
        prices (np.ndarray): T prices of an index or T×K prices of a panel.
        timestamps (Sequence, optional): Bar labels; defaults to 0..T-1.
        initial_balance (float, optional): Capital invested at t=0.
        cost_rate (float, optional): Cost paid on the entry purchase.
        weights (np.ndarray, optional): Capital shares per asset; equal by default.
    """
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 1:
        prices = prices[:, None]
    if not (prices > 0).all():
        raise ValueError("prices must be positive.")
    n_assets = prices.shape[1]
    weights = np.full(n_assets, 1.0 / n_assets) if weights is None else np.asarray(weights, dtype=float)
    shares = weights * initial_balance / (prices[0] * (1.0 + cost_rate))
    values = prices @ shares
    timestamps = pd.RangeIndex(prices.shape[0]) if timestamps is None else pd.Index(timestamps)
    return EquityCurve(timestamps=timestamps, values=values)


def mean_variance_curve(
    prices: np.ndarray,
    timestamps: Sequence,
    start: int,
    lookback: int = 252,
    cap: float = 0.05,
    initial_balance: float = 1_000_000.0,
    cost_rate: float = 0.0,
) -> EquityCurve:
    """Buys the mean-variance portfolio of the trailing returns at `start` and holds it.

    Uses the returns of at most `lookback` periods before bar `start`.
    """
    prices = np.asarray(prices, dtype=float)
    first = max(0, start - lookback)
    window = prices[first + 1:start + 1] / prices[first:start] - 1.0
    weights = mean_variance_weights(window, cap=cap)
    return buy_and_hold(
        prices[start:], pd.Index(timestamps)[start:], initial_balance, cost_rate, weights=weights
    )
