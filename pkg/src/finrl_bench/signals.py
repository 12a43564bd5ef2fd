"""Precomputed sentiment and risk scores and the adjustments they drive.

Scores are integers from 1 (most negative / lowest risk) to 5, with 3 being
neutral. Sentiment scales actions, risk divides rewards; both factors stay
within [0.9, 1.1].
"""
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from finrl_bench.exceptions import AlignmentException, DataParseException
from finrl_bench.marketdata import parse_timestamps
from finrl_bench.model import FeaturePanel, SignalSeries

NEUTRAL_SCORE = 3.0
SIGNAL_STRENGTH = 0.05
SIMPLEX_TOLERANCE = 1e-9


def _check_scores(scores: np.ndarray, name: str) -> None:
    if ((scores < 1) | (scores > 5)).any() or not np.isfinite(scores).all():
        raise ValueError(f"{name} scores must lie in [1, 5].")


def sentiment_multiplier(u, a):
    """l = 1 + 0.05 (u - 3) sign(a)."""
    u = np.asarray(u, dtype=float)
    _check_scores(u, "sentiment")
    return 1.0 + SIGNAL_STRENGTH * (u - NEUTRAL_SCORE) * np.sign(a)


def sentiment_factor(u, a):
    """Scales an action by its sentiment multiplier.

    Buying is amplified and selling dampened under positive sentiment, and
    the other way round under negative sentiment. A zero action stays zero.

    Args:
        u: Sentiment scores in [1, 5], broadcastable against a.
        a: Action components in shares.

    Raises:
        ValueError: If a score lies outside [1, 5].

    Returns:
        The adjusted action, a float for scalar input.
    """
    a = np.asarray(a, dtype=float)
    adjusted = sentiment_multiplier(u, a) * a
    return float(adjusted) if adjusted.ndim == 0 else adjusted


def risk_penalty_factor(q, w):
    """M = sum_i w_i (1 + 0.05 (q_i - 3)).

    `w` holds one weight per asset, optionally followed by the cash weight;
    cash carries a multiplier of 1. The last axis is the asset axis, so rows
    of a batch are handled at once.

    Raises:
        ValueError: If a score lies outside [1, 5] or w is not on the simplex.
    """
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    _check_scores(q, "risk")
    if (w < -SIMPLEX_TOLERANCE).any() or (np.abs(w.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE).any():
        raise ValueError("portfolio weights must be non-negative and sum to 1.")
    multipliers = 1.0 + SIGNAL_STRENGTH * (q - NEUTRAL_SCORE)
    if w.shape[-1] == q.shape[-1] + 1:
        multipliers = np.concatenate([multipliers, np.ones(multipliers.shape[:-1] + (1,))], axis=-1)
    elif w.shape[-1] != q.shape[-1]:
        raise ValueError("w needs one weight per asset, plus optionally one for cash.")
    factor = (w * multipliers).sum(axis=-1)
    return float(factor) if factor.ndim == 0 else factor


def penalize_reward(reward, factor):
    """r' = r / M."""
    return reward / factor


def portfolio_weights(balance, prices, holdings) -> np.ndarray:
    """Value weights p_i h_i / v of each asset, followed by the cash weight b / v.

    An empty portfolio (v = 0) counts as all cash.
    """
    balance = np.atleast_1d(np.asarray(balance, dtype=float))
    positions = np.atleast_2d(np.asarray(prices, dtype=float) * np.asarray(holdings, dtype=float))
    total = balance + positions.sum(axis=1)
    weights = np.zeros((positions.shape[0], positions.shape[1] + 1))
    empty = total <= 0
    safe_total = np.where(empty, 1.0, total)
    weights[:, :-1] = positions / safe_total[:, None]
    weights[:, -1] = np.where(empty, 1.0, balance / safe_total)
    return weights


def load_signals(source: Union[str, Path]) -> SignalSeries:
    """Reads a `timestamp,asset,sentiment,risk` file. A blank asset means all assets.

    Either score may be blank; rows are kept as long as one score is given.
    """
    logging.debug("signals: load_signals(source=%s)", source)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"No such signal file: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    for column in ("timestamp", "asset", "sentiment", "risk"):
        if column not in raw.columns:
            raise DataParseException(f"missing column '{column}'", line_number=1)
    line_numbers = raw.index.to_numpy() + 2
    frame = pd.DataFrame(
        {
            "timestamp": parse_timestamps(raw["timestamp"].str.strip(), line_numbers),
            "asset": raw["asset"].str.strip().to_numpy(),
        }
    )
    for column in ("sentiment", "risk"):
        text = raw[column].str.strip()
        values = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
        bad = np.isnan(values) & (text != "").to_numpy()
        if bad.any():
            index = int(np.argmax(bad))
            raise DataParseException(
                f"cannot parse {column} score '{text.iloc[index]}'", line_number=int(line_numbers[index])
            )
        frame[column] = values
    empty = frame[["sentiment", "risk"]].isna().all(axis=1)
    if empty.any():
        logging.warning("signals: dropping %s rows without any score", int(empty.sum()))
    frame = frame[~empty].sort_values("timestamp", kind="stable").reset_index(drop=True)
    try:
        return SignalSeries(frame)
    except ValueError as error:
        raise DataParseException(str(error)) from error


def align_signals(
    signals: SignalSeries, panel: FeaturePanel, fill: Union[float, str] = NEUTRAL_SCORE
) -> FeaturePanel:
    """Appends sentiment and risk as two features of the panel.

    A signal is attached to the first bar at or after its timestamp, so bar t
    only sees signals published up to t. When several signals land on the same
    bar and asset, the latest one wins. Signals with a blank asset apply to
    every asset without a specific one.

    Args:
        signals (SignalSeries): The scores.
        panel (FeaturePanel): Panel to extend.
        fill (float | str, optional): Value for bars without a signal, or
            'ffill' to carry the last known score (neutral before the first).
            Defaults to the neutral score 3.

    Raises:
        AlignmentException: If no signal falls within the panel's time range.

    Returns:
        FeaturePanel: The panel with features 'sentiment' and 'risk' appended.
    """
    logging.debug("signals: align_signals(fill=%s)", fill)
    frame = signals.frame
    timestamps = pd.Index(panel.timestamps)
    first, last = timestamps[0], timestamps[-1]
    inside = (frame["timestamp"] >= first) & (frame["timestamp"] <= last)
    if not inside.any():
        raise AlignmentException(
            f"no signal between {first} and {last}; signals span "
            f"{frame['timestamp'].min()} to {frame['timestamp'].max()}"
        )

    bars = timestamps.searchsorted(frame["timestamp"].to_numpy(), side="left")
    frame = frame.assign(bar=bars)
    frame = frame[frame["bar"] < len(timestamps)].sort_values("timestamp", kind="stable")

    values = np.full((panel.n_periods, panel.n_assets, 2), np.nan)
    for index, column in enumerate(("sentiment", "risk")):
        scores = frame.dropna(subset=[column]).drop_duplicates(["bar", "asset"], keep="last")
        broadcast = scores[scores["asset"] == ""]
        specific = scores[scores["asset"].isin(panel.base.assets)]
        values[broadcast["bar"].to_numpy(), :, index] = broadcast[column].to_numpy()[:, None]
        asset_index = np.array([panel.base.assets.index(asset) for asset in specific["asset"]], dtype=int)
        values[specific["bar"].to_numpy(), asset_index, index] = specific[column].to_numpy()

    if fill == "ffill":
        for index in range(2):
            values[:, :, index] = pd.DataFrame(values[:, :, index]).ffill().to_numpy()
        values = np.where(np.isnan(values), NEUTRAL_SCORE, values)
    else:
        values = np.where(np.isnan(values), float(fill), values)
    return panel.with_features(["sentiment", "risk"], values)
