"""Market data ingestion, indicator features, feature selection and dataset splits.

Everything in here is a pure function of its inputs: nothing is cached and no
input array is modified in place.
"""
import logging
import math
import re
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from finrl_bench.exceptions import (
    DataException,
    DataParseException,
    DuplicateKeyException,
    EmptyDatasetException,
    UnknownIndicatorException,
    WarmupException,
)
from finrl_bench.model import OHLCV_COLUMNS, DataSplit, FeaturePanel, PanelData

DEFAULT_INDICATORS = (
    "macd",
    "boll_ub",
    "boll_lb",
    "rsi_30",
    "cci_30",
    "dx_30",
    "close_30",
    "close_60",
    "vix",
    "turbulence",
)

# Features measured in price units; they scale with the prices they came from.
PRICE_LEVEL_FEATURES = ("macd", "boll_ub", "boll_lb", "close_30", "close_60")

# Leading rows without a valid value, per indicator.
_WARMUP_ROWS = {
    "macd": 25,
    "boll_ub": 19,
    "boll_lb": 19,
    "rsi_30": 30,
    "cci_30": 29,
    "dx_30": 30,
    "close_30": 29,
    "close_60": 59,
    "vix": 0,
}

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}
_EPOCH_PATTERN = re.compile(r"^\d+(\.\d+)?$")

PathLike = Union[str, Path]


def load_ohlcv(source: PathLike, schema: Optional[Dict[str, str]] = None) -> PanelData:
    """Loads an OHLCV file into a panel.

    Rows with a missing field are dropped, as are timestamps for which not
    every asset has a complete bar.

    Args:
        source (PathLike): Path of the CSV file.
        schema (Dict[str, str], optional): Maps the logical column names
            (timestamp, asset, open, high, low, close, volume) to the column
            names used in the file. Defaults to identical names.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataParseException: If a value cannot be parsed; names the line.
        DuplicateKeyException: If a (timestamp, asset) pair repeats.
        EmptyDatasetException: If nothing is left after cleaning.

    Returns:
        PanelData: The cleaned panel sorted by timestamp and asset.
    """
    logging.debug("marketdata: load_ohlcv(source=%s, schema=%s)", source, schema)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"No such OHLCV file: {path}")

    mapping = {name: name for name in ("timestamp", "asset", *OHLCV_COLUMNS)}
    mapping.update(schema or {})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing_columns = [column for column in mapping.values() if column not in raw.columns]
    if missing_columns:
        raise DataParseException(f"missing columns {missing_columns}", line_number=1)

    raw = raw[list(mapping.values())]
    raw.columns = list(mapping.keys())
    raw = raw.apply(lambda column: column.str.strip())
    # header is line 1
    line_numbers = raw.index.to_numpy() + 2

    incomplete = raw.apply(lambda column: column.str.lower().isin(_MISSING_TOKENS)).any(axis=1)
    if incomplete.any():
        logging.warning(
            "marketdata: dropping %s rows with missing values from %s",
            int(incomplete.sum()),
            path,
        )
    raw = raw[~incomplete.to_numpy()]
    line_numbers = line_numbers[~incomplete.to_numpy()]
    if raw.empty:
        raise EmptyDatasetException(f"No complete rows in {path}")

    frame = pd.DataFrame(
        {
            "timestamp": parse_timestamps(raw["timestamp"], line_numbers),
            "asset": raw["asset"].to_numpy(),
        }
    )
    for column in OHLCV_COLUMNS:
        values = pd.to_numeric(raw[column], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            index = int(np.argmax(bad))
            raise DataParseException(
                f"cannot parse {column} value '{raw[column].iloc[index]}'",
                line_number=int(line_numbers[index]),
            )
        frame[column] = values

    invalid = (frame[["open", "high", "low", "close"]] <= 0).any(axis=1) | (frame["volume"] < 0)
    if invalid.any():
        index = int(np.argmax(invalid.to_numpy()))
        raise DataParseException(
            "prices must be positive and volume non-negative",
            line_number=int(line_numbers[index]),
        )

    duplicated = frame.duplicated(["timestamp", "asset"])
    if duplicated.any():
        index = int(np.argmax(duplicated.to_numpy()))
        raise DuplicateKeyException(
            f"line {int(line_numbers[index])}: duplicate bar for "
            f"({frame['timestamp'].iloc[index]}, {frame['asset'].iloc[index]})"
        )

    return _panel_from_frame(frame)


def load_auxiliary_series(source: PathLike) -> pd.DataFrame:
    """Loads a `timestamp,asset,value` series. A blank asset means all assets.

    Returns:
        pd.DataFrame: Columns timestamp, asset, value sorted by timestamp.
    """
    logging.debug("marketdata: load_auxiliary_series(source=%s)", source)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"No such series file: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    for column in ("timestamp", "asset", "value"):
        if column not in raw.columns:
            raise DataParseException(f"missing column '{column}'", line_number=1)
    line_numbers = raw.index.to_numpy() + 2
    values = pd.to_numeric(raw["value"].str.strip(), errors="coerce").to_numpy(dtype=float)
    keep = np.isfinite(values)
    if not keep.all():
        logging.warning("marketdata: dropping %s series rows without a value", int((~keep).sum()))
    series = pd.DataFrame(
        {
            "timestamp": parse_timestamps(raw["timestamp"].str.strip()[keep], line_numbers[keep]),
            "asset": raw["asset"].str.strip().to_numpy()[keep],
            "value": values[keep],
        }
    )
    return series.sort_values("timestamp", kind="stable").reset_index(drop=True)


def compute_indicators(
    panel: PanelData,
    indicators: Optional[Sequence[str]] = None,
    vix: Optional[pd.DataFrame] = None,
    turbulence_lookback: int = 252,
) -> FeaturePanel:
    """Computes market indicators and trims the warm-up rows.

    Args:
        panel (PanelData): The raw panel.
        indicators (Sequence[str], optional): Indicator names in output order.
            Defaults to the ten standard indicators.
        vix (pd.DataFrame, optional): Auxiliary `timestamp,asset,value` series
            passed through as the vix column. Required when 'vix' is requested.
        turbulence_lookback (int, optional): Trailing window of the turbulence
            index in periods. Defaults to 252 (one trading year).

    Raises:
        UnknownIndicatorException: If an indicator name is not supported.
        WarmupException: If the panel is too short for an indicator.

    Returns:
        FeaturePanel: Features of the rows after the longest warm-up.
    """
    names = list(indicators if indicators is not None else DEFAULT_INDICATORS)
    logging.debug(
        "marketdata: compute_indicators(indicators=%s, turbulence_lookback=%s)",
        names,
        turbulence_lookback,
    )
    warmups = {}
    for name in names:
        if name == "turbulence":
            warmups[name] = turbulence_lookback + 1
        elif name in _WARMUP_ROWS:
            warmups[name] = _WARMUP_ROWS[name]
        else:
            raise UnknownIndicatorException(f"Unknown indicator '{name}'.")
    for name, rows in warmups.items():
        if panel.n_periods <= rows:
            raise WarmupException(name, rows, panel.n_periods)

    close = pd.DataFrame(panel.close)
    high = pd.DataFrame(panel.high)
    low = pd.DataFrame(panel.low)
    columns = []
    for name in names:
        if name == "macd":
            values = _macd(close)
        elif name in ("boll_ub", "boll_lb"):
            values = _bollinger(close, upper=name == "boll_ub")
        elif name == "rsi_30":
            values = _rsi(close, 30)
        elif name == "cci_30":
            values = _cci(high, low, close, 30)
        elif name == "dx_30":
            values = _dx(high, low, close, 30)
        elif name == "close_30":
            values = close.rolling(30).mean().to_numpy()
        elif name == "close_60":
            values = close.rolling(60).mean().to_numpy()
        elif name == "vix":
            if vix is None:
                raise DataException("indicator 'vix' needs an auxiliary vix series")
            values = _broadcast_series(vix, panel)
        else:
            values = _turbulence(panel.close, turbulence_lookback)
        columns.append(values)

    start = max(warmups.values(), default=0)
    features = np.stack(columns, axis=2) if columns else np.zeros((panel.n_periods, panel.n_assets, 0))
    features = features[start:]
    if not np.isfinite(features).all():
        bad = sorted({names[i] for i in np.where(~np.isfinite(features).all(axis=(0, 1)))[0]})
        raise DataException(f"non-finite indicator values after warm-up in {bad}")
    return FeaturePanel(base=panel.slice(start, panel.n_periods), features=features, feature_names=names)


def select_features(fp: FeaturePanel, corr_threshold: float = 0.95) -> list[str]:
    """Keeps one representative per group of strongly correlated features.

    Features whose absolute Pearson correlation reaches the threshold are
    grouped transitively; the first feature of each group is kept.

    Args:
        fp (FeaturePanel): Panel whose features are compared over all
            (timestamp, asset) samples.
        corr_threshold (float, optional): Grouping threshold in (0, 1].
            Defaults to 0.95.

    Raises:
        ValueError: If the threshold is out of range or there are fewer than
            two samples.

    Returns:
        list[str]: Selected feature names in their original order.
    """
    logging.debug("marketdata: select_features(corr_threshold=%s)", corr_threshold)
    if not 0.0 < corr_threshold <= 1.0:
        raise ValueError("corr_threshold must lie in (0, 1].")
    samples = pd.DataFrame(fp.features.reshape(-1, fp.n_features), columns=fp.feature_names)
    if len(samples) < 2:
        raise ValueError("Feature selection needs at least two samples.")

    constant = samples.max() == samples.min()
    for name in samples.columns[constant.to_numpy()]:
        logging.warning("marketdata: feature '%s' has zero variance and is excluded", name)
    candidates = [name for name, flat in zip(fp.feature_names, constant) if not flat]
    if not candidates:
        return []

    correlation = samples[candidates].corr(method="pearson").abs().to_numpy()
    parent = list(range(len(candidates)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            if correlation[i, j] >= corr_threshold:
                root_i, root_j = find(i), find(j)
                if root_i != root_j:
                    parent[max(root_i, root_j)] = min(root_i, root_j)

    return [name for i, name in enumerate(candidates) if find(i) == i]


def select_columns(fp: FeaturePanel, names: Sequence[str]) -> FeaturePanel:
    """Restricts a panel to the named features, in the given order."""
    indices = [fp.feature_names.index(name) for name in names]
    return FeaturePanel(base=fp.base, features=fp.features[:, :, indices], feature_names=list(names))


def split_temporal(fp: FeaturePanel, eval_fraction: float, relabel: bool = False) -> DataSplit:
    """Withholds the most recent timestamps for evaluation.

    Args:
        fp (FeaturePanel): The full panel.
        eval_fraction (float): Fraction in [0, 1) of timestamps withheld;
            the count is rounded up.
        relabel (bool, optional): Replace timestamps by ordinal indices so
            calendar dates are hidden. Defaults to False.

    Raises:
        ValueError: If the fraction is out of range or leaves no training rows.

    Returns:
        DataSplit: Train and eval panels and the first eval timestamp
            (None when nothing is withheld).
    """
    logging.debug("marketdata: split_temporal(eval_fraction=%s, relabel=%s)", eval_fraction, relabel)
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in [0, 1).")
    if relabel:
        fp = FeaturePanel(
            base=replace(fp.base, timestamps=pd.RangeIndex(fp.n_periods)),
            features=fp.features,
            feature_names=list(fp.feature_names),
        )
    n_periods = fp.n_periods
    # round first so 0.15 * 100 does not become 16
    n_eval = math.ceil(round(eval_fraction * n_periods, 9))
    n_train = n_periods - n_eval
    if n_train < 1:
        raise ValueError("eval_fraction leaves no training rows.")
    boundary = fp.timestamps[n_train] if n_eval else None
    return DataSplit(train=fp.slice(0, n_train), eval=fp.slice(n_train, n_periods), boundary=boundary)


def perturb_prices(panel: PanelData, range_pct: float, seed: int) -> PanelData:
    """Scales each asset's prices by one random factor in [1 - range, 1 + range].

    Volumes are unchanged and, since the factor is constant over time, so are
    the return series.
    """
    logging.debug("marketdata: perturb_prices(range_pct=%s, seed=%s)", range_pct, seed)
    factors = _perturbation_factors(panel.n_assets, range_pct, seed)
    return replace(
        panel,
        open=panel.open * factors,
        high=panel.high * factors,
        low=panel.low * factors,
        close=panel.close * factors,
    )


def perturb_feature_panel(fp: FeaturePanel, range_pct: float, seed: int) -> FeaturePanel:
    """perturb_prices on the underlying panel; price-level features scale along."""
    factors = _perturbation_factors(fp.n_assets, range_pct, seed)
    features = fp.features.copy()
    for i, name in enumerate(fp.feature_names):
        if name in PRICE_LEVEL_FEATURES:
            features[:, :, i] *= factors
    return FeaturePanel(
        base=perturb_prices(fp.base, range_pct, seed),
        features=features,
        feature_names=list(fp.feature_names),
    )


def synthetic_panel(
    n_periods: int,
    n_assets: int = 2,
    drift: float = 0.0005,
    volatility: float = 0.01,
    seed: int = 0,
    start: str = "2020-01-01",
    freq: str = "B",
    initial_price: float = 100.0,
) -> PanelData:
    """Geometric random-walk OHLCV panel for benchmarks and tests."""
    rng = np.random.default_rng(seed)
    log_returns = rng.normal(drift, volatility, size=(n_periods, n_assets))
    log_returns[0] = 0.0
    close = initial_price * np.exp(np.cumsum(log_returns, axis=0))
    open_ = np.vstack([close[:1], close[:-1]])
    spread = np.abs(rng.normal(0.0, volatility / 2, size=(n_periods, n_assets)))
    high = np.maximum(open_, close) * (1.0 + spread)
    low = np.minimum(open_, close) * (1.0 - spread)
    volume = rng.uniform(1e5, 1e6, size=(n_periods, n_assets))
    return PanelData(
        timestamps=pd.date_range(start, periods=n_periods, freq=freq),
        assets=[f"A{i}" for i in range(n_assets)],
        open=open_,
        high=high,
        low=low,
        close=close,
        volume=volume,
    )


def write_feature_csv(fp: FeaturePanel, destination: PathLike) -> None:
    """Writes `timestamp,asset,open,high,low,close,volume,<features...>`."""
    frame = fp.base.to_frame()
    flat = fp.features.reshape(-1, fp.n_features)
    for i, name in enumerate(fp.feature_names):
        frame[name] = flat[:, i]
    frame.to_csv(destination, index=False)


def read_feature_csv(source: PathLike) -> FeaturePanel:
    """Reads a file written by write_feature_csv back into a FeaturePanel."""
    logging.debug("marketdata: read_feature_csv(source=%s)", source)
    frame = pd.read_csv(source)
    if pd.api.types.is_integer_dtype(frame["timestamp"]):
        frame["timestamp"] = frame["timestamp"].astype(int)
    else:
        frame["timestamp"] = pd.to_datetime(frame["timestamp"])
    frame["asset"] = frame["asset"].astype(str)
    feature_names = [c for c in frame.columns if c not in ("timestamp", "asset", *OHLCV_COLUMNS)]
    panel = _panel_from_frame(frame[["timestamp", "asset", *OHLCV_COLUMNS]])
    features = np.stack(
        [_pivot(frame, name, panel) for name in feature_names], axis=2
    ) if feature_names else np.zeros((panel.n_periods, panel.n_assets, 0))
    return FeaturePanel(base=panel, features=features, feature_names=feature_names)


def _perturbation_factors(n_assets: int, range_pct: float, seed: int) -> np.ndarray:
    if not 0.0 <= range_pct <= 0.5:
        raise ValueError("range_pct must lie in [0, 0.5].")
    rng = np.random.default_rng(seed)
    return rng.uniform(1.0 - range_pct, 1.0 + range_pct, size=n_assets)


def _panel_from_frame(frame: pd.DataFrame) -> PanelData:
    frame = frame.sort_values(["timestamp", "asset"], kind="stable")
    assets = sorted(frame["asset"].unique().tolist())
    wide = {
        column: frame.pivot(index="timestamp", columns="asset", values=column).reindex(columns=assets)
        for column in OHLCV_COLUMNS
    }
    complete = np.ones(len(wide["close"]), dtype=bool)
    for table in wide.values():
        complete &= table.notna().all(axis=1).to_numpy()
    if not complete.all():
        logging.warning(
            "marketdata: dropping %s timestamps without a bar for every asset",
            int((~complete).sum()),
        )
    if not complete.any():
        raise EmptyDatasetException("No timestamp has a complete bar for every asset.")
    timestamps = wide["close"].index[complete]
    if isinstance(timestamps, pd.DatetimeIndex):
        timestamps = pd.DatetimeIndex(timestamps, name=None)
    else:
        timestamps = pd.Index(timestamps, name=None)
    return PanelData(
        timestamps=timestamps,
        assets=assets,
        **{column: wide[column].to_numpy(dtype=float)[complete] for column in OHLCV_COLUMNS},
    )


def _pivot(frame: pd.DataFrame, column: str, panel: PanelData) -> np.ndarray:
    table = frame.pivot(index="timestamp", columns="asset", values=column)
    return table.reindex(index=panel.timestamps, columns=panel.assets).to_numpy(dtype=float)


def parse_timestamps(values: pd.Series, line_numbers: np.ndarray) -> pd.Series:
    values = values.reset_index(drop=True)
    if len(values) and values.str.match(_EPOCH_PATTERN).all():
        return pd.to_datetime(values.astype(float), unit="s")
    parsed = pd.to_datetime(values, errors="coerce", format="ISO8601")
    bad = parsed.isna().to_numpy()
    if bad.any():
        index = int(np.argmax(bad))
        raise DataParseException(
            f"cannot parse timestamp '{values.iloc[index]}'", line_number=int(line_numbers[index])
        )
    return parsed


def _macd(close: pd.DataFrame) -> np.ndarray:
    fast = close.ewm(span=12, adjust=False).mean()
    slow = close.ewm(span=26, adjust=False).mean()
    return (fast - slow).to_numpy()


def _bollinger(close: pd.DataFrame, upper: bool) -> np.ndarray:
    middle = close.rolling(20).mean()
    width = 2.0 * close.rolling(20).std(ddof=0)
    return (middle + width if upper else middle - width).to_numpy()


def _wilder(values: pd.DataFrame, period: int) -> pd.DataFrame:
    return values.ewm(alpha=1.0 / period, adjust=False).mean()


def _rsi(close: pd.DataFrame, period: int) -> np.ndarray:
    delta = close.diff()
    average_gain = _wilder(delta.clip(lower=0.0), period).to_numpy()
    average_loss = _wilder((-delta).clip(lower=0.0), period).to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        rsi = 100.0 - 100.0 / (1.0 + average_gain / average_loss)
    # no losses: 100, no movement at all: 50
    rsi = np.where(average_loss == 0.0, np.where(average_gain == 0.0, 50.0, 100.0), rsi)
    return np.where(np.isnan(average_gain), np.nan, rsi)


def _cci(high: pd.DataFrame, low: pd.DataFrame, close: pd.DataFrame, period: int) -> np.ndarray:
    typical = (high + low + close) / 3.0
    mean = typical.rolling(period).mean()
    deviation = typical.rolling(period).apply(lambda x: np.mean(np.abs(x - x.mean())), raw=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cci = ((typical - mean) / (0.015 * deviation)).to_numpy()
    return np.where(deviation.to_numpy() == 0.0, 0.0, cci)


def _dx(high: pd.DataFrame, low: pd.DataFrame, close: pd.DataFrame, period: int) -> np.ndarray:
    up = high.diff().to_numpy()
    down = -low.diff().to_numpy()
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    previous_close = close.shift(1).to_numpy()
    true_range = np.fmax(
        (high - low).to_numpy(),
        np.fmax(np.abs(high.to_numpy() - previous_close), np.abs(low.to_numpy() - previous_close)),
    )
    smoothed_tr = _wilder(pd.DataFrame(true_range), period).to_numpy()
    smoothed_plus = _wilder(pd.DataFrame(plus_dm), period).to_numpy()
    smoothed_minus = _wilder(pd.DataFrame(minus_dm), period).to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        plus_di = np.where(smoothed_tr > 0, 100.0 * smoothed_plus / smoothed_tr, 0.0)
        minus_di = np.where(smoothed_tr > 0, 100.0 * smoothed_minus / smoothed_tr, 0.0)
        total = plus_di + minus_di
        dx = np.where(total > 0, 100.0 * np.abs(plus_di - minus_di) / total, 0.0)
    return dx


def _turbulence(close: np.ndarray, lookback: int) -> np.ndarray:
    """Mahalanobis distance of each period's return vector from the trailing window."""
    returns = close[1:] / close[:-1] - 1.0
    returns = np.vstack([np.full((1, close.shape[1]), np.nan), returns])
    turbulence = np.full(close.shape[0], np.nan)
    for t in range(lookback + 1, close.shape[0]):
        history = returns[t - lookback:t]
        deviation = returns[t] - history.mean(axis=0)
        covariance = np.atleast_2d(np.cov(history, rowvar=False))
        turbulence[t] = float(deviation @ np.linalg.pinv(covariance) @ deviation)
    return np.repeat(turbulence[:, None], close.shape[1], axis=1)


def _broadcast_series(series: pd.DataFrame, panel: PanelData) -> np.ndarray:
    """Aligns an auxiliary series to the panel with the last known value (no look-ahead)."""
    timestamps = pd.Index(panel.timestamps)
    values = np.full((panel.n_periods, panel.n_assets), np.nan)
    for asset, group in series.groupby("asset", sort=False):
        aligned = (
            group.drop_duplicates("timestamp", keep="last")
            .set_index("timestamp")["value"]
            .sort_index()
            .reindex(timestamps, method="ffill")
            .to_numpy()
        )
        if asset == "":
            values = np.where(np.isnan(values), aligned[:, None], values)
        elif asset in panel.assets:
            values[:, panel.assets.index(asset)] = aligned
    return values
