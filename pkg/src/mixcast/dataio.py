"""Data acquisition: trade and order-book featurization, intraday
deseasonalization, synthetic regime-switching generation with known ground
truth, windowing with train-fitted standardization, and dataset bundles.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distributions import DistKind

TRADE_FEATURES = [
    "buy_volume",
    "sell_volume",
    "volume_imbalance",
    "buy_count",
    "sell_count",
    "count_imbalance",
]

LOB_BASE_FEATURES = ["spread", "ask_volume", "bid_volume", "volume_imbalance"]
DEFAULT_DEPTH_FRACTIONS = (0.01, 0.05, 0.10)
DEFAULT_SPLITS = (0.7, 0.1, 0.2)
SECONDS_PER_DAY = 86400


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# raw records


@dataclass(frozen=True)
class RawTrade:
    timestamp: float
    price: float
    size: float
    side: str  # "buy" or "sell"

    def __post_init__(self):
        if self.side not in ("buy", "sell"):
            raise DataError(f"trade side must be buy/sell, got {self.side!r}")
        if self.size <= 0 or self.price <= 0:
            raise DataError(f"trade price/size must be positive, got ({self.price}, {self.size})")


@dataclass(frozen=True)
class LobSnapshot:
    timestamp: float
    bids: tuple  # ((price, size), ...) price-descending
    asks: tuple  # ((price, size), ...) price-ascending

    def __post_init__(self):
        if not self.bids or not self.asks:
            raise DataError(f"snapshot at {self.timestamp} has an empty book side")
        bp = [p for p, _ in self.bids]
        ap = [p for p, _ in self.asks]
        if any(b2 >= b1 for b1, b2 in zip(bp, bp[1:])):
            raise DataError(f"snapshot at {self.timestamp}: bids not strictly price-descending")
        if any(a2 <= a1 for a1, a2 in zip(ap, ap[1:])):
            raise DataError(f"snapshot at {self.timestamp}: asks not strictly price-ascending")
        if any(s <= 0 for _, s in self.bids) or any(s <= 0 for _, s in self.asks):
            raise DataError(f"snapshot at {self.timestamp}: non-positive size")
        if bp[0] >= ap[0]:
            raise DataError(f"snapshot at {self.timestamp}: crossed book (bid {bp[0]} >= ask {ap[0]})")


@dataclass
class SourceSeries:
    source_id: str
    market_id: str
    feature_names: list[str]
    values: np.ndarray  # (T, d)
    interval_seconds: int
    t_start: float  # timestamp of row 0; row k is t_start + k * interval

    def timestamps(self) -> np.ndarray:
        return self.t_start + self.interval_seconds * np.arange(self.values.shape[0], dtype=np.float64)


@dataclass
class SeasonalProfile:
    """Per time-of-day-slot mean of the target, fitted on training rows."""

    interval_seconds: int
    slots_per_day: int
    values: np.ndarray  # (slots_per_day,)

    def slot_of(self, timestamps: np.ndarray) -> np.ndarray:
        day_pos = np.mod(timestamps, SECONDS_PER_DAY)
        return (day_pos // (SECONDS_PER_DAY / self.slots_per_day)).astype(int) % self.slots_per_day

    def apply(self, y: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
        return y - self.values[self.slot_of(timestamps)]

    def invert(self, residual: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
        return residual + self.values[self.slot_of(timestamps)]


@dataclass
class MultiSourceDataset:
    sources: list[SourceSeries]
    target: np.ndarray  # (T,)
    timestamps: np.ndarray  # (T,)
    interval_seconds: int
    split_fractions: tuple = DEFAULT_SPLITS
    seasonal: SeasonalProfile | None = None
    dist_hint: str | None = None

    def __post_init__(self):
        t = len(self.target)
        for s in self.sources:
            if s.values.shape[0] != t:
                raise DataError(f"source {s.source_id} has {s.values.shape[0]} rows, target has {t}")

    @property
    def length(self) -> int:
        return len(self.target)

    @property
    def dims(self) -> list[int]:
        return [s.values.shape[1] for s in self.sources]


@dataclass
class SynthGroundTruth:
    regime: np.ndarray  # (T,) int in [0, S)
    component_mean: np.ndarray  # (T, S) conditional mean had each source been active
    true_mean: np.ndarray  # (T,)
    true_var: np.ndarray  # (T,)
    noise_var: float
    signal_feature: int = 0
    indicator_feature: int = 1


@dataclass
class WindowedInstance:
    windows: list[np.ndarray]  # per source (L, d_s)
    y: float
    timestamp: float


@dataclass
class SplitArrays:
    windows: list[np.ndarray]  # per source (N, L, d_s)
    y: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def instance(self, i: int) -> WindowedInstance:
        return WindowedInstance(
            windows=[w[i].copy() for w in self.windows],
            y=float(self.y[i]),
            timestamp=float(self.timestamps[i]),
        )


@dataclass
class WindowedData:
    train: SplitArrays
    val: SplitArrays
    test: SplitArrays
    lookback: int
    horizon: int
    dims: list[int]
    stats: dict
    ar_source: int | None


# ---------------------------------------------------------------------------
# featurization


def _grid(timestamps, interval_seconds, t_start, t_end):
    if t_start is None:
        t_start = math.floor(min(timestamps) / interval_seconds) * interval_seconds
    if t_end is None:
        t_end = math.floor(max(timestamps) / interval_seconds) * interval_seconds
    n = int((t_end - t_start) // interval_seconds) + 1
    if n < 1:
        raise DataError("empty time grid")
    return float(t_start), n


def featurize_trades(
    trades: list[RawTrade],
    interval_seconds: int,
    t_start: float | None = None,
    t_end: float | None = None,
    source_id: str = "trades",
    market_id: str = "",
) -> SourceSeries:
    """Per-interval buy/sell volume, counts, and their absolute imbalances.

    Intervals with no trades are all-zero rows.
    """
    if not trades:
        raise DataError("no trades to featurize")
    ts = [t.timestamp for t in trades]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise DataError("trades must be sorted by timestamp")
    start, n = _grid(ts, interval_seconds, t_start, t_end)
    vals = np.zeros((n, 6))
    for tr in trades:
        k = int((tr.timestamp - start) // interval_seconds)
        if not 0 <= k < n:
            continue
        if tr.side == "buy":
            vals[k, 0] += tr.size
            vals[k, 3] += 1
        else:
            vals[k, 1] += tr.size
            vals[k, 4] += 1
    vals[:, 2] = np.abs(vals[:, 0] - vals[:, 1])
    vals[:, 5] = np.abs(vals[:, 3] - vals[:, 4])
    return SourceSeries(source_id, market_id, list(TRADE_FEATURES), vals, interval_seconds, start)


def _side_slopes(levels, fractions, min_offset: float) -> list[float]:
    sizes = np.array([s for _, s in levels])
    prices = np.array([p for p, _ in levels])
    cum = np.cumsum(sizes)
    total = cum[-1]
    best = prices[0]
    slopes = []
    for p in fractions:
        target = p * total
        idx = int(np.searchsorted(cum, target, side="left"))
        idx = min(idx, len(cum) - 1)
        delta = max(abs(prices[idx] - best), min_offset)
        slopes.append(float(cum[idx] / delta))
    return slopes


def lob_snapshot_features(
    snap: LobSnapshot,
    depth_fractions=DEFAULT_DEPTH_FRACTIONS,
    min_offset: float = 0.01,
) -> np.ndarray:
    """13 features: spread, side volumes and their imbalance, then per depth
    fraction the ask slope, bid slope, and slope imbalance.

    A slope is the cumulative volume reaching the fraction of side depth
    divided by its price offset from the best quote; the offset is floored at
    min_offset so a single dominant level cannot divide by zero.
    """
    best_bid = snap.bids[0][0]
    best_ask = snap.asks[0][0]
    ask_vol = float(sum(s for _, s in snap.asks))
    bid_vol = float(sum(s for _, s in snap.bids))
    feats = [best_ask - best_bid, ask_vol, bid_vol, abs(ask_vol - bid_vol)]
    ask_slopes = _side_slopes(snap.asks, depth_fractions, min_offset)
    bid_slopes = _side_slopes(snap.bids, depth_fractions, min_offset)
    for a, b in zip(ask_slopes, bid_slopes):
        feats.extend([a, b, abs(a - b)])
    return np.array(feats)


def lob_feature_names(depth_fractions=DEFAULT_DEPTH_FRACTIONS) -> list[str]:
    names = list(LOB_BASE_FEATURES)
    for p in depth_fractions:
        tag = f"{p * 100:g}pct"
        names += [f"ask_slope_{tag}", f"bid_slope_{tag}", f"slope_imbalance_{tag}"]
    return names


def featurize_lob(
    snapshots: list[LobSnapshot],
    interval_seconds: int,
    depth_fractions=DEFAULT_DEPTH_FRACTIONS,
    min_offset: float = 0.01,
    t_start: float | None = None,
    t_end: float | None = None,
    source_id: str = "lob",
    market_id: str = "",
) -> tuple[SourceSeries, int]:
    """Average per-snapshot features within each interval.

    Intervals after the first observed snapshot with no data are forward
    filled; returns (series, first index with real data) so callers can trim
    leading gaps and realign other sources.
    """
    if not snapshots:
        raise DataError("no snapshots to featurize")
    ts = [s.timestamp for s in snapshots]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise DataError("snapshots must be sorted by timestamp")
    start, n = _grid(ts, interval_seconds, t_start, t_end)
    d = len(LOB_BASE_FEATURES) + 3 * len(depth_fractions)
    sums = np.zeros((n, d))
    counts = np.zeros(n)
    for snap in snapshots:
        k = int((snap.timestamp - start) // interval_seconds)
        if not 0 <= k < n:
            continue
        sums[k] += lob_snapshot_features(snap, depth_fractions, min_offset)
        counts[k] += 1

    vals = np.zeros((n, d))
    first_valid = -1
    last = None
    for k in range(n):
        if counts[k] > 0:
            vals[k] = sums[k] / counts[k]
            last = vals[k]
            if first_valid < 0:
                first_valid = k
        elif last is not None:
            vals[k] = last
    if first_valid < 0:
        raise DataError("no snapshot fell inside the time grid")
    series = SourceSeries(source_id, market_id, lob_feature_names(depth_fractions), vals, interval_seconds, start)
    return series, first_valid


def make_target(trade_series: SourceSeries) -> np.ndarray:
    """Total traded volume: buy volume plus sell volume."""
    return trade_series.values[:, 0] + trade_series.values[:, 1]


def deseasonalize(
    y: np.ndarray,
    timestamps: np.ndarray,
    interval_seconds: int,
    n_train_rows: int,
    slots_per_day: int | None = None,
) -> tuple[np.ndarray, SeasonalProfile]:
    """Subtract the per time-of-day-slot mean fitted on the training rows.

    Slots with no training observations fall back to the global training mean.
    """
    y = np.asarray(y, dtype=np.float64)
    if slots_per_day is None:
        slots_per_day = SECONDS_PER_DAY // interval_seconds
    profile = SeasonalProfile(interval_seconds, slots_per_day, np.zeros(slots_per_day))
    slots = profile.slot_of(np.asarray(timestamps, dtype=np.float64))
    global_mean = float(y[:n_train_rows].mean())
    for s in range(slots_per_day):
        mask = slots[:n_train_rows] == s
        profile.values[s] = y[:n_train_rows][mask].mean() if mask.any() else global_mean
    return y - profile.values[slots], profile


# ---------------------------------------------------------------------------
# synthetic regime-switching generator


def synth_generate(
    n_sources: int,
    length: int,
    lookback: int = 8,
    kind: DistKind = DistKind.NORMAL,
    seed: int = 0,
    regime_persistence: float = 0.995,
    signal_rho: float = 0.97,
    obs_noise=0.1,
    indicator_noise: float = 0.5,
    target_noise: float = 0.3,
    interval_seconds: int = 300,
) -> tuple[MultiSourceDataset, SynthGroundTruth]:
    """Hidden slow Markov regime selects which source's latent signal drives
    the target; each source observes its own signal, a noisy activity
    indicator, and a distractor column.

    `obs_noise` may be a scalar or one value per source, so sources can have
    unequal signal quality (as real markets do). The conditional law of the
    target given the regime and signals is known exactly, so a Bayes-optimal
    predictor is available for tests.
    """
    if n_sources < 2:
        raise ValueError("synthetic data needs at least 2 sources")
    if length < 1000:
        raise ValueError("synthetic data needs length >= 1000")
    if not 1 <= lookback < length:
        raise ValueError("lookback must be in [1, length)")
    obs_noise = np.broadcast_to(np.asarray(obs_noise, dtype=np.float64), (n_sources,))
    rng = np.random.default_rng(seed)

    regime = np.empty(length, dtype=int)
    regime[0] = rng.integers(n_sources)
    stay = rng.random(length)
    jump = rng.integers(0, n_sources - 1, size=length)
    for t in range(1, length):
        if stay[t] < regime_persistence:
            regime[t] = regime[t - 1]
        else:
            k = jump[t]
            regime[t] = k if k < regime[t - 1] else k + 1

    innov_sd = math.sqrt(1.0 - signal_rho**2)
    signals = np.empty((length, n_sources))
    signals[0] = rng.normal(0.0, 1.0, size=n_sources)
    eps = rng.normal(0.0, innov_sd, size=(length, n_sources))
    for t in range(1, length):
        signals[t] = signal_rho * signals[t - 1] + eps[t]

    sources = []
    for s in range(n_sources):
        obs = signals[:, s] + rng.normal(0.0, obs_noise[s], size=length)
        active = (regime == s).astype(float) + rng.normal(0.0, indicator_noise, size=length)
        distractor = rng.normal(0.0, 1.0, size=length)
        vals = np.column_stack([obs, active, distractor])
        sources.append(
            SourceSeries(
                source_id=f"synth_{s}",
                market_id="synth",
                feature_names=["signal", "active", "noise"],
                values=vals,
                interval_seconds=interval_seconds,
                t_start=0.0,
            )
        )

    lagged = np.vstack([signals[:1], signals[:-1]])  # row t holds signals at t-1
    comp_loc = lagged if kind is DistKind.NORMAL else 0.5 * lagged
    loc = comp_loc[np.arange(length), regime]
    noise = rng.normal(0.0, target_noise, size=length)
    if kind is DistKind.NORMAL:
        target = loc + noise
        true_mean = loc.copy()
        true_var = np.full(length, target_noise**2)
        component_mean = comp_loc.copy()
    else:
        target = np.exp(loc + noise)
        s2 = target_noise**2
        true_mean = np.exp(loc + 0.5 * s2)
        true_var = np.expm1(s2) * np.exp(2.0 * loc + s2)
        component_mean = np.exp(comp_loc + 0.5 * s2)

    timestamps = interval_seconds * np.arange(length, dtype=np.float64)
    dataset = MultiSourceDataset(
        sources=sources,
        target=target,
        timestamps=timestamps,
        interval_seconds=interval_seconds,
        dist_hint=kind.value,
    )
    truth = SynthGroundTruth(
        regime=regime,
        component_mean=component_mean,
        true_mean=true_mean,
        true_var=true_var,
        noise_var=target_noise**2,
    )
    return dataset, truth


def oracle_regime_rate(
    dataset: MultiSourceDataset,
    truth: SynthGroundTruth,
    lookback: int,
    horizon: int = 1,
    target_rows: np.ndarray | None = None,
) -> float:
    """Accuracy of the Bayes-style regime classifier that picks the source with
    the largest window sum of its activity indicator."""
    col = truth.indicator_feature
    t_all = np.arange(lookback + horizon, dataset.length) if target_rows is None else np.asarray(target_rows)
    scores = np.stack(
        [np.array([s.values[t - horizon - lookback + 1 : t - horizon + 1, col].sum() for t in t_all]) for s in dataset.sources],
        axis=1,
    )
    return float(np.mean(np.argmax(scores, axis=1) == truth.regime[t_all]))


# ---------------------------------------------------------------------------
# windowing and splits


def _fit_stats(dataset: MultiSourceDataset, n_train_rows: int, dist: DistKind, ar_source: int | None) -> dict:
    feature_mean, feature_std = [], []
    for s in dataset.sources:
        block = s.values[:n_train_rows]
        m = block.mean(axis=0)
        sd = block.std(axis=0)
        sd = np.where(sd == 0.0, 1.0, sd)
        feature_mean.append(m)
        feature_std.append(sd)
    stats = {
        "feature_mean": feature_mean,
        "feature_std": feature_std,
        "target_mean": None,
        "target_std": None,
        "ar_mean": None,
        "ar_std": None,
    }
    ytr = dataset.target[:n_train_rows]
    if dist is DistKind.NORMAL:
        sd = float(ytr.std()) or 1.0
        stats["target_mean"], stats["target_std"] = float(ytr.mean()), sd
        stats["ar_mean"], stats["ar_std"] = stats["target_mean"], stats["target_std"]
    elif ar_source is not None:
        if np.any(ytr <= 0):
            raise DataError("log-normal mode requires positive targets for the history column")
        ly = np.log(ytr)
        stats["ar_mean"] = float(ly.mean())
        stats["ar_std"] = float(ly.std()) or 1.0
    return stats


def window_and_split(
    dataset: MultiSourceDataset,
    lookback: int,
    horizon: int = 1,
    fractions: tuple = DEFAULT_SPLITS,
    dist: DistKind = DistKind.NORMAL,
    ar_source: int | None = None,
    stats: dict | None = None,
) -> WindowedData:
    """Build per-source windows ending at t - horizon for every target row t.

    Standardization is fitted on the leading training fraction of rows only
    (pass `stats` to reuse a fit); the target itself is standardized only for
    normal-mode data. With `ar_source` set, the (standardized) target history
    rides along as an extra feature column of that source.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    if len(fractions) != 3:
        raise ValueError("expected (train, val, test) fractions")
    big_t = dataset.length
    if big_t <= lookback + horizon:
        raise ValueError(f"series length {big_t} too short for lookback {lookback} + horizon {horizon}")

    # epsilon guards the floor against float noise in fraction sums
    n_train_rows = int(math.floor(fractions[0] * big_t + 1e-9))
    n_val_end = int(math.floor((fractions[0] + fractions[1]) * big_t + 1e-9))
    if stats is None:
        stats = _fit_stats(dataset, n_train_rows, dist, ar_source)

    mats = []
    for s, src in enumerate(dataset.sources):
        mats.append((src.values - stats["feature_mean"][s]) / stats["feature_std"][s])
    if ar_source is not None:
        if not 0 <= ar_source < len(mats):
            raise ValueError(f"ar_source {ar_source} out of range")
        hist = dataset.target if dist is DistKind.NORMAL else np.log(dataset.target)
        hist = (hist - stats["ar_mean"]) / stats["ar_std"]
        mats[ar_source] = np.column_stack([mats[ar_source], hist])

    y = dataset.target.astype(np.float64).copy()
    if dist is DistKind.NORMAL and stats["target_mean"] is not None:
        y = (y - stats["target_mean"]) / stats["target_std"]

    t_first = lookback + horizon
    targets_t = np.arange(t_first, big_t)
    bounds = (targets_t < n_train_rows, (targets_t >= n_train_rows) & (targets_t < n_val_end), targets_t >= n_val_end)

    splits = []
    for mask in bounds:
        rows = targets_t[mask]
        windows = []
        for mat in mats:
            w = np.stack([mat[t - horizon - lookback + 1 : t - horizon + 1] for t in rows]) if len(rows) else np.zeros(
                (0, lookback, mat.shape[1])
            )
            windows.append(w)
        splits.append(SplitArrays(windows=windows, y=y[rows], timestamps=dataset.timestamps[rows]))

    dims = [m.shape[1] for m in mats]
    return WindowedData(
        train=splits[0],
        val=splits[1],
        test=splits[2],
        lookback=lookback,
        horizon=horizon,
        dims=dims,
        stats=stats,
        ar_source=ar_source,
    )


def destandardize_mean(values: np.ndarray, stats: dict) -> np.ndarray:
    if stats.get("target_mean") is None:
        return values
    return values * stats["target_std"] + stats["target_mean"]


def destandardize_variance(values: np.ndarray, stats: dict) -> np.ndarray:
    if stats.get("target_mean") is None:
        return values
    return values * stats["target_std"] ** 2


# ---------------------------------------------------------------------------
# CSV parsing and dataset bundles


def load_trades_csv(path) -> list[RawTrade]:
    """timestamp,price,size,side rows; raises DataError with the line number."""
    trades = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"timestamp", "price", "size", "side"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: trades header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                trades.append(
                    RawTrade(
                        timestamp=float(row["timestamp"]),
                        price=float(row["price"]),
                        size=float(row["size"]),
                        side=row["side"].strip().lower(),
                    )
                )
            except (TypeError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad trade row ({exc})") from None
    return trades


def load_lob_csv(path) -> list[LobSnapshot]:
    """Long-format snapshots: timestamp,level,side,price,size with level 0 best."""
    rows_by_ts: dict[float, dict[str, list]] = {}
    order: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"timestamp", "level", "side", "price", "size"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: LOB header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = float(row["timestamp"])
                level = int(row["level"])
                side = row["side"].strip().lower()
                price = float(row["price"])
                size = float(row["size"])
                if side not in ("bid", "ask"):
                    raise DataError(f"side must be bid/ask, got {side!r}")
            except (TypeError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: bad LOB row ({exc})") from None
            if ts not in rows_by_ts:
                rows_by_ts[ts] = {"bid": [], "ask": []}
                order.append(ts)
            rows_by_ts[ts][side].append((level, price, size))

    snaps = []
    for ts in order:
        sides = rows_by_ts[ts]
        bids = tuple((p, s) for _, p, s in sorted(sides["bid"]))
        asks = tuple((p, s) for _, p, s in sorted(sides["ask"]))
        try:
            snaps.append(LobSnapshot(timestamp=ts, bids=bids, asks=asks))
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
    return snaps


def build_market_dataset(
    markets: list[dict],
    interval_seconds: int = 300,
    target_market: int = 0,
    deseason: bool = True,
    split_fractions: tuple = DEFAULT_SPLITS,
    depth_fractions=DEFAULT_DEPTH_FRACTIONS,
    min_offset: float = 0.01,
) -> MultiSourceDataset:
    """Assemble the multi-market layout: per market one transaction source and
    one order-book source, target = total traded volume of the target market.

    `markets` entries are {"id": str, "trades": [RawTrade], "lob": [LobSnapshot]}.
    Leading intervals missing order-book data are dropped across all sources.
    """
    if not markets:
        raise DataError("need at least one market")
    all_ts = []
    for m in markets:
        all_ts += [t.timestamp for t in m["trades"]]
        all_ts += [s.timestamp for s in m["lob"]]
    start, n = _grid(all_ts, interval_seconds, None, None)
    t_end = start + (n - 1) * interval_seconds

    sources: list[SourceSeries] = []
    first_valid = 0
    for m in markets:
        tr = featurize_trades(
            m["trades"], interval_seconds, t_start=start, t_end=t_end,
            source_id=f"{m['id']}_trades", market_id=m["id"],
        )
        lob, valid_from = featurize_lob(
            m["lob"], interval_seconds, depth_fractions=depth_fractions, min_offset=min_offset,
            t_start=start, t_end=t_end, source_id=f"{m['id']}_lob", market_id=m["id"],
        )
        first_valid = max(first_valid, valid_from)
        sources += [tr, lob]

    if first_valid > 0:
        for s in sources:
            s.values = s.values[first_valid:]
            s.t_start = s.t_start + first_valid * interval_seconds
        start = start + first_valid * interval_seconds

    target = make_target(sources[2 * target_market])
    timestamps = sources[0].timestamps()
    seasonal = None
    if deseason:
        n_train_rows = int(math.floor(split_fractions[0] * len(target) + 1e-9))
        target, seasonal = deseasonalize(target, timestamps, interval_seconds, n_train_rows)

    return MultiSourceDataset(
        sources=sources,
        target=target,
        timestamps=timestamps,
        interval_seconds=interval_seconds,
        split_fractions=split_fractions,
        seasonal=seasonal,
        dist_hint=DistKind.NORMAL.value if deseason else None,
    )


def _write_csv(path, header: list[str], columns: list[np.ndarray]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(columns[0])):
            writer.writerow([repr(float(c[i])) for c in columns])


def save_bundle(dataset: MultiSourceDataset, out_dir, ground_truth: SynthGroundTruth | None = None):
    """Directory bundle: per-source CSV, target CSV, meta.json, optional truth.

    Floats are written via repr, so a load round trip is bit identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": 1,
        "interval_seconds": dataset.interval_seconds,
        "n_sources": len(dataset.sources),
        "length": dataset.length,
        "t_start": float(dataset.timestamps[0]),
        "source_ids": [s.source_id for s in dataset.sources],
        "market_ids": [s.market_id for s in dataset.sources],
        "feature_names": [s.feature_names for s in dataset.sources],
        "split_fractions": list(dataset.split_fractions),
        "dist_hint": dataset.dist_hint,
        "seasonal": None,
        "ground_truth": None,
    }
    if dataset.seasonal is not None:
        meta["seasonal"] = {
            "interval_seconds": dataset.seasonal.interval_seconds,
            "slots_per_day": dataset.seasonal.slots_per_day,
            "values": [repr(float(v)) for v in dataset.seasonal.values],
        }
    for i, s in enumerate(dataset.sources):
        _write_csv(out / f"source_{i}.csv", ["timestamp"] + s.feature_names,
                   [s.timestamps()] + [s.values[:, j] for j in range(s.values.shape[1])])
    _write_csv(out / "target.csv", ["timestamp", "target"], [dataset.timestamps, dataset.target])
    if ground_truth is not None:
        n_src = ground_truth.component_mean.shape[1]
        header = ["timestamp", "regime", "true_mean", "true_var"] + [f"component_mean_{s}" for s in range(n_src)]
        cols = [dataset.timestamps, ground_truth.regime.astype(float), ground_truth.true_mean, ground_truth.true_var]
        cols += [ground_truth.component_mean[:, s] for s in range(n_src)]
        _write_csv(out / "ground_truth.csv", header, cols)
        meta["ground_truth"] = {
            "noise_var": ground_truth.noise_var,
            "signal_feature": ground_truth.signal_feature,
            "indicator_feature": ground_truth.indicator_feature,
        }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))


def _read_csv_columns(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.asarray(rows, dtype=np.float64)


def load_bundle(bundle_dir) -> tuple[MultiSourceDataset, SynthGroundTruth | None]:
    bundle = Path(bundle_dir)
    meta_path = bundle / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{bundle}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    sources = []
    for i in range(meta["n_sources"]):
        header, arr = _read_csv_columns(bundle / f"source_{i}.csv")
        sources.append(
            SourceSeries(
                source_id=meta["source_ids"][i],
                market_id=meta["market_ids"][i],
                feature_names=header[1:],
                values=arr[:, 1:],
                interval_seconds=meta["interval_seconds"],
                t_start=float(arr[0, 0]),
            )
        )
    _, tgt = _read_csv_columns(bundle / "target.csv")
    seasonal = None
    if meta.get("seasonal"):
        s = meta["seasonal"]
        seasonal = SeasonalProfile(
            interval_seconds=s["interval_seconds"],
            slots_per_day=s["slots_per_day"],
            values=np.asarray([float(v) for v in s["values"]]),
        )
    dataset = MultiSourceDataset(
        sources=sources,
        target=tgt[:, 1],
        timestamps=tgt[:, 0],
        interval_seconds=meta["interval_seconds"],
        split_fractions=tuple(meta["split_fractions"]),
        seasonal=seasonal,
        dist_hint=meta.get("dist_hint"),
    )
    truth = None
    gt_path = bundle / "ground_truth.csv"
    if gt_path.exists():
        header, arr = _read_csv_columns(gt_path)
        n_src = sum(1 for h in header if h.startswith("component_mean_"))
        gt_meta = meta.get("ground_truth") or {}
        truth = SynthGroundTruth(
            regime=arr[:, 1].astype(int),
            component_mean=arr[:, 4 : 4 + n_src],
            true_mean=arr[:, 2],
            true_var=arr[:, 3],
            noise_var=float(gt_meta.get("noise_var", float("nan"))),
            signal_feature=int(gt_meta.get("signal_feature", 0)),
            indicator_feature=int(gt_meta.get("indicator_feature", 1)),
        )
    return dataset, truth
