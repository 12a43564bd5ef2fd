"""Performance metrics of an equity curve.

Ratios whose denominator vanishes are reported as None, never as 0 or inf.
"""
import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from finrl_bench.exceptions import UndefinedMetricException
from finrl_bench.model import EquityCurve, MetricsReport
from finrl_bench.util import EnhancedJSONEncoder

TRADING_DAYS_PER_YEAR = 252
SECONDS_PER_DAY = 86400.0


def period_returns(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[1:] / values[:-1] - 1.0


def max_drawdown(values: np.ndarray) -> float:
    """Largest relative decline from a running peak, in [-1, 0]."""
    values = np.asarray(values, dtype=float)
    peaks = np.maximum.accumulate(values)
    return float(np.min(values / peaks - 1.0))


def infer_periods_per_year(timestamps: Sequence) -> float:
    """252 for daily or coarser bars, otherwise calendar seconds per year over the median bar interval."""
    index = pd.Index(timestamps)
    if len(index) < 2 or not isinstance(index, pd.DatetimeIndex):
        return float(TRADING_DAYS_PER_YEAR)
    seconds = float(np.median(np.diff(index.asi8))) / 1e9
    if seconds <= 0:
        raise ValueError("timestamps must be strictly increasing.")
    if seconds >= SECONDS_PER_DAY:
        return float(TRADING_DAYS_PER_YEAR)
    return 365.0 * SECONDS_PER_DAY / seconds


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    if denominator == 0 or not np.isfinite(denominator):
        return None
    return float(numerator / denominator)


def compute_metrics(
    curve: Union[EquityCurve, np.ndarray],
    periods_per_year: float = TRADING_DAYS_PER_YEAR,
    risk_free: float = 0.0,
    omega_threshold: float = 0.0,
    rachev_alpha: float = 0.05,
    rachev_beta: float = 0.05,
) -> MetricsReport:
    """Computes the eleven metrics of an equity curve.

    Args:
        curve (EquityCurve | np.ndarray): Portfolio values v_0..v_T.
        periods_per_year (float, optional): Annualization factor.
        risk_free (float, optional): Annual risk-free rate; spread evenly
            over the periods of a year.
        omega_threshold (float, optional): Per-period return threshold of Omega.
        rachev_alpha (float, optional): Upper tail share of the Rachev ratio.
        rachev_beta (float, optional): Lower tail share of the Rachev ratio.

    Raises:
        ValueError: If there are fewer than two values or a value is not positive.

    Returns:
        MetricsReport: The metrics; undefined ones are None.
    """
    values = curve.values if isinstance(curve, EquityCurve) else np.asarray(curve, dtype=float)
    if values.size < 2:
        raise ValueError("an equity curve needs at least two values.")
    if not (values > 0).all():
        raise ValueError("equity curve values must be positive.")

    returns = period_returns(values)
    n = returns.size
    growth = values[-1] / values[0]
    cumulative = float(growth - 1.0)
    annualized = float(growth ** (periods_per_year / n) - 1.0)
    periodic_risk_free = risk_free / periods_per_year
    excess = float(returns.mean() - periodic_risk_free)
    scale = np.sqrt(periods_per_year)

    std = float(returns.std(ddof=1)) if n > 1 and np.ptp(returns) > 0 else 0.0
    volatility = std * scale if n > 1 else None
    sharpe = _ratio(scale * excess, std) if n > 1 else None

    shortfall = np.minimum(returns - periodic_risk_free, 0.0)
    downside = float(np.sqrt((shortfall * shortfall).sum() / (n - 1))) if n > 1 else 0.0
    sortino = _ratio(scale * excess, downside) if n > 1 else None

    drawdown = max_drawdown(values)
    calmar = _ratio(annualized, abs(drawdown))
    romad = _ratio(cumulative, abs(drawdown))

    gains = float(np.maximum(returns - omega_threshold, 0.0).sum())
    losses = float(np.maximum(omega_threshold - returns, 0.0).sum())
    omega = _ratio(gains, losses)

    upper_tail = returns[returns >= np.quantile(returns, 1.0 - rachev_alpha)].mean()
    lower_tail = returns[returns <= np.quantile(returns, rachev_beta)].mean()
    rachev = _ratio(float(upper_tail), float(-lower_tail)) if lower_tail < 0 else None

    wins = int((returns > 0).sum())
    defeats = int((returns < 0).sum())
    win_loss = _ratio(wins, defeats)

    return MetricsReport(
        cumulative_return=cumulative,
        annualized_return=annualized,
        annualized_volatility=volatility,
        sharpe=sharpe,
        sortino=sortino,
        calmar=calmar,
        omega=omega,
        rachev=rachev,
        max_drawdown=drawdown,
        romad=romad,
        win_loss=win_loss,
    )


def metrics_from_config(curve: EquityCurve, config: dict) -> MetricsReport:
    """compute_metrics with the 'metrics' section of a config.

    A periods_per_year of null is inferred from the curve's timestamps.
    """
    periods_per_year = config.get("periods_per_year") or infer_periods_per_year(curve.timestamps)
    return compute_metrics(
        curve,
        periods_per_year=periods_per_year,
        risk_free=config.get("risk_free", 0.0),
        omega_threshold=config.get("omega_threshold", 0.0),
        rachev_alpha=config.get("rachev_alpha", 0.05),
        rachev_beta=config.get("rachev_beta", 0.05),
    )


def metrics_table(reports: dict[str, MetricsReport]) -> pd.DataFrame:
    """One row per named report, one column per metric."""
    columns = [field.name for field in fields(MetricsReport)]
    rows = [{"name": name, **report.to_dict()} for name, report in reports.items()]
    return pd.DataFrame(rows, columns=["name", *columns])


def write_metrics(report: MetricsReport, directory: Union[str, Path], name: str = "metrics") -> None:
    """Writes <name>.json (undefined as null) and <name>.csv (undefined as NA)."""
    directory = Path(directory)
    with open(directory / f"{name}.json", "w") as output:
        json.dump(report.to_dict(), output, cls=EnhancedJSONEncoder, indent=2)
    metrics_table({name: report}).to_csv(directory / f"{name}.csv", index=False, na_rep="NA")
    logging.debug("metrics: wrote %s to %s", name, directory)


def write_equity_curve(curve: EquityCurve, path: Union[str, Path]) -> None:
    curve.to_frame().to_csv(path, index=False)


def sharpe_ratio(returns: Sequence[float], risk_free: float = 0.0) -> float:
    """(mean - r_f) / sample std of raw per-period returns, not annualized.

    Raises:
        UndefinedMetricException: With fewer than two returns or zero variance.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.size < 2:
        raise UndefinedMetricException("the Sharpe ratio needs at least two returns")
    std = float(returns.std(ddof=1))
    # the mean of equal values may be off by an ulp, leaving a tiny non-zero std
    if std == 0 or np.all(returns == returns[0]):
        raise UndefinedMetricException("the Sharpe ratio is undefined for constant returns")
    return float((returns.mean() - risk_free) / std)
