import numpy as np
import pytest

from mixcast.dataio import (
    DataError,
    LobSnapshot,
    RawTrade,
    build_market_dataset,
    deseasonalize,
    featurize_lob,
    featurize_trades,
    load_bundle,
    load_lob_csv,
    load_trades_csv,
    lob_snapshot_features,
    make_target,
    oracle_regime_rate,
    save_bundle,
    synth_generate,
    window_and_split,
)
from mixcast.distributions import DistKind


def trade(ts, side, size, price=100.0):
    return RawTrade(timestamp=ts, price=price, size=size, side=side)


# ---------------------------------------------------------------------------
# trades


def test_featurize_trades_hand_fixture():
    trades = [trade(10.0, "buy", 0.5), trade(20.0, "buy", 0.3), trade(40.0, "sell", 0.1)]
    series = featurize_trades(trades, interval_seconds=60, t_start=0.0, t_end=0.0)
    assert series.values.shape == (1, 6)
    assert np.allclose(series.values[0], [0.8, 0.1, 0.7, 2.0, 1.0, 1.0], atol=1e-15)


def test_featurize_trades_empty_interval_zeros():
    trades = [trade(10.0, "buy", 0.5), trade(130.0, "sell", 0.2)]
    series = featurize_trades(trades, interval_seconds=60, t_start=0.0, t_end=120.0)
    assert np.array_equal(series.values[1], np.zeros(6))


def test_featurize_trades_side_swap_symmetry():
    trades = [trade(1.0, "buy", 0.5), trade(2.0, "sell", 0.2), trade(3.0, "buy", 0.1)]
    swapped = [trade(t.timestamp, "sell" if t.side == "buy" else "buy", t.size) for t in trades]
    a = featurize_trades(trades, 60, t_start=0.0, t_end=0.0).values[0]
    b = featurize_trades(swapped, 60, t_start=0.0, t_end=0.0).values[0]
    assert np.array_equal(a[[0, 1]], b[[1, 0]])
    assert np.array_equal(a[[3, 4]], b[[4, 3]])
    assert a[2] == b[2] and a[5] == b[5]


def test_featurize_trades_rejects_unsorted():
    trades = [trade(10.0, "buy", 0.5), trade(5.0, "sell", 0.2)]
    with pytest.raises(DataError, match="sorted"):
        featurize_trades(trades, 60)


def test_make_target_equals_recomputation_from_raw():
    rng = np.random.default_rng(0)
    trades = []
    t = 0.0
    for _ in range(200):
        t += float(rng.uniform(1, 20))
        trades.append(trade(t, "buy" if rng.random() < 0.5 else "sell", float(rng.uniform(0.01, 2.0))))
    series = featurize_trades(trades, 300)
    y = make_target(series)
    # independent recomputation: total size per interval straight from trades
    expected = np.zeros_like(y)
    for tr in trades:
        k = int((tr.timestamp - series.t_start) // 300)
        if 0 <= k < len(expected):
            expected[k] += tr.size
    assert np.allclose(y, expected, atol=1e-12)
    assert y[0] == series.values[0, 0] + series.values[0, 1]


# ---------------------------------------------------------------------------
# order book


def test_lob_snapshot_basic_features():
    snap = LobSnapshot(timestamp=0.0, bids=((100.0, 3.0),), asks=((100.5, 2.0),))
    feats = lob_snapshot_features(snap)
    assert feats[0] == pytest.approx(0.5, abs=1e-12)
    assert feats[1] == 2.0 and feats[2] == 3.0
    assert feats[3] == 1.0


def test_lob_slope_zero_offset_floor():
    # first ask level alone reaches 10% of depth: offset 0 floored to one tick
    snap = LobSnapshot(
        timestamp=0.0,
        bids=((99.0, 1.0), (98.0, 9.0)),
        asks=((100.5, 1.0), (101.5, 9.0)),
    )
    feats = lob_snapshot_features(snap, depth_fractions=(0.10,), min_offset=0.01)
    ask_slope = feats[4]
    assert ask_slope == pytest.approx(1.0 / 0.01, abs=1e-9)
    # bid side identical by construction
    assert feats[5] == pytest.approx(1.0 / 0.01, abs=1e-9)
    assert feats[6] == pytest.approx(0.0, abs=1e-12)


def test_lob_slope_deeper_fraction_uses_price_offset():
    snap = LobSnapshot(
        timestamp=0.0,
        bids=((99.0, 1.0), (98.0, 9.0)),
        asks=((100.0, 1.0), (102.0, 9.0)),
    )
    feats = lob_snapshot_features(snap, depth_fractions=(0.5,), min_offset=0.01)
    # 50% of 10 needs the second level: cumulative 10 at offset 2.0 -> slope 5
    assert feats[4] == pytest.approx(10.0 / 2.0, abs=1e-12)
    # bid side: cumulative 10 at offset 1.0 -> slope 10
    assert feats[5] == pytest.approx(10.0 / 1.0, abs=1e-12)
    assert feats[6] == pytest.approx(5.0, abs=1e-12)


def test_symmetric_book_has_zero_slope_imbalances():
    snap = LobSnapshot(
        timestamp=0.0,
        bids=((100.0, 2.0), (99.0, 5.0), (98.0, 3.0)),
        asks=((101.0, 2.0), (102.0, 5.0), (103.0, 3.0)),
    )
    feats = lob_snapshot_features(snap)
    assert feats[3] == 0.0
    for i in (6, 9, 12):
        assert feats[i] == pytest.approx(0.0, abs=1e-12)


def test_lob_snapshot_validation():
    with pytest.raises(DataError, match="crossed"):
        LobSnapshot(0.0, bids=((101.0, 1.0),), asks=((100.0, 1.0),))
    with pytest.raises(DataError, match="descending"):
        LobSnapshot(0.0, bids=((99.0, 1.0), (100.0, 1.0)), asks=((101.0, 1.0),))
    with pytest.raises(DataError, match="size"):
        LobSnapshot(0.0, bids=((99.0, 0.0),), asks=((101.0, 1.0),))
    with pytest.raises(DataError, match="empty"):
        LobSnapshot(0.0, bids=(), asks=((101.0, 1.0),))


def make_snap(ts, mid=100.0, size=1.0):
    return LobSnapshot(ts, bids=((mid - 0.5, size),), asks=((mid + 0.5, size),))


def test_featurize_lob_interval_average_and_ffill():
    snaps = [make_snap(0.0, size=1.0), make_snap(30.0, size=3.0), make_snap(130.0, size=5.0)]
    series, first_valid = featurize_lob(snaps, interval_seconds=60, t_start=0.0, t_end=180.0)
    assert first_valid == 0
    assert series.values.shape == (4, 13)
    assert series.values[0, 1] == pytest.approx(2.0)  # mean of sizes 1 and 3
    assert np.array_equal(series.values[1], series.values[0])  # forward fill
    assert series.values[2, 1] == pytest.approx(5.0)


def test_featurize_lob_leading_gap_reported():
    snaps = [make_snap(130.0)]
    series, first_valid = featurize_lob(snaps, interval_seconds=60, t_start=0.0, t_end=180.0)
    assert first_valid == 2
    assert np.array_equal(series.values[0], np.zeros(13))


# ---------------------------------------------------------------------------
# deseasonalization


def test_deseasonalize_constant_series():
    y = np.full(40, 7.5)
    ts = 300.0 * np.arange(40)
    residual, profile = deseasonalize(y, ts, 300, n_train_rows=28)
    assert np.array_equal(residual, np.zeros(40))
    assert np.all(profile.values[np.unique(profile.slot_of(ts))] == 7.5)


def test_deseasonalize_pure_periodic_series():
    slots_per_day = 4
    interval = 86400 // slots_per_day
    pattern = np.array([1.0, 3.0, 2.0, 5.0])
    y = np.tile(pattern, 10)
    ts = interval * np.arange(40, dtype=float)
    residual, profile = deseasonalize(y, ts, interval, n_train_rows=28)
    assert np.allclose(residual, 0.0, atol=1e-12)
    assert np.array_equal(profile.values, pattern)


def test_deseasonalize_round_trip():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 1000, size=60).astype(float)  # integer-valued: add/sub exact
    ts = 300.0 * np.arange(60)
    residual, profile = deseasonalize(y, ts, 300, n_train_rows=42)
    assert np.array_equal(profile.invert(residual, ts), y)
    yf = rng.normal(size=60) * 100
    residual_f, profile_f = deseasonalize(yf, ts, 300, n_train_rows=42)
    assert np.allclose(profile_f.invert(residual_f, ts), yf, rtol=1e-12)


def test_deseasonalize_empty_slot_uses_global_mean():
    slots_per_day = 4
    interval = 86400 // slots_per_day
    y = np.array([2.0, 4.0, 2.0, 4.0, 6.0, 8.0])
    ts = interval * np.arange(6, dtype=float)
    # training rows cover slots 0 and 1 only
    _, profile = deseasonalize(y, ts, interval, n_train_rows=2)
    assert profile.values[0] == 2.0 and profile.values[1] == 4.0
    assert profile.values[2] == 3.0 and profile.values[3] == 3.0  # global training mean


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_deterministic():
    a, ta = synth_generate(3, 1000, seed=42)
    b, tb = synth_generate(3, 1000, seed=42)
    for sa, sb in zip(a.sources, b.sources):
        assert np.array_equal(sa.values, sb.values)
    assert np.array_equal(a.target, b.target)
    assert np.array_equal(ta.regime, tb.regime)
    c, _ = synth_generate(3, 1000, seed=43)
    assert not np.array_equal(a.target, c.target)


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_generate(1, 2000)
    with pytest.raises(ValueError):
        synth_generate(3, 500)


def test_synth_oracle_predictor_hits_noise_floor():
    dataset, truth = synth_generate(3, 8000, seed=7, target_noise=0.3)
    err = dataset.target - truth.true_mean
    assert np.sqrt(np.mean(err**2)) == pytest.approx(0.3, rel=0.03)
    # residuals match the regime-selected component means too
    picked = truth.component_mean[np.arange(dataset.length), truth.regime]
    assert np.array_equal(picked, truth.true_mean)


def test_synth_lognormal_mode():
    dataset, truth = synth_generate(2, 2000, kind=DistKind.LOGNORMAL, seed=3)
    assert np.all(dataset.target > 0)
    err = dataset.target - truth.true_mean
    assert np.mean(err**2) == pytest.approx(np.mean(truth.true_var), rel=0.25)


def test_synth_regimes_are_persistent_and_complete():
    dataset, truth = synth_generate(3, 5000, seed=11, regime_persistence=0.995)
    switches = np.sum(truth.regime[1:] != truth.regime[:-1])
    assert 5 <= switches <= 60
    assert set(np.unique(truth.regime)) == {0, 1, 2}


def test_oracle_regime_rate_high_on_clean_indicators():
    dataset, truth = synth_generate(3, 4000, seed=5, indicator_noise=0.05)
    rate = oracle_regime_rate(dataset, truth, lookback=8)
    assert rate > 0.97


# ---------------------------------------------------------------------------
# windowing


def test_window_count_matches_contract():
    dataset, _ = synth_generate(2, 1000, seed=1)
    # trim to an even 100 rows to check the arithmetic exactly
    for s in dataset.sources:
        s.values = s.values[:100]
    dataset.target = dataset.target[:100]
    dataset.timestamps = dataset.timestamps[:100]
    data = window_and_split(dataset, lookback=10, horizon=1)
    total = len(data.train) + len(data.val) + len(data.test)
    assert total == 89


def test_window_standardization_definitional():
    dataset, _ = synth_generate(2, 2000, seed=2)
    data = window_and_split(dataset, lookback=8, horizon=1, dist=DistKind.NORMAL)
    n_train_rows = int(0.7 * dataset.length)
    for s, src in enumerate(dataset.sources):
        standardized = (src.values[:n_train_rows] - data.stats["feature_mean"][s]) / data.stats["feature_std"][s]
        assert np.all(np.abs(standardized.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(standardized.var(axis=0) - 1.0) < 1e-10)
    y_rows = (dataset.target[:n_train_rows] - data.stats["target_mean"]) / data.stats["target_std"]
    assert abs(y_rows.mean()) < 1e-10
    assert abs(y_rows.var() - 1.0) < 1e-10


def test_window_contents_and_time_ordering():
    dataset, _ = synth_generate(2, 1500, seed=3)
    data = window_and_split(dataset, lookback=6, horizon=1)
    assert data.train.timestamps.max() < data.val.timestamps.min() < data.test.timestamps.min()

    # windows end at t - horizon: check one instance against the matrices
    i = 5
    t = int(data.train.timestamps[i] / dataset.interval_seconds)
    mat = (dataset.sources[0].values - data.stats["feature_mean"][0]) / data.stats["feature_std"][0]
    assert np.allclose(data.train.windows[0][i], mat[t - 6 : t], atol=1e-12)


def test_window_fraction_validation():
    dataset, _ = synth_generate(2, 1000, seed=4)
    with pytest.raises(ValueError, match="sum to 1"):
        window_and_split(dataset, lookback=8, fractions=(0.5, 0.2, 0.2))


def test_window_ar_column():
    dataset, _ = synth_generate(2, 1200, seed=5)
    plain = window_and_split(dataset, lookback=4, dist=DistKind.NORMAL)
    with_ar = window_and_split(dataset, lookback=4, dist=DistKind.NORMAL, ar_source=1)
    assert with_ar.dims == [plain.dims[0], plain.dims[1] + 1]
    i = 3
    t = int(with_ar.train.timestamps[i] / dataset.interval_seconds)
    col = with_ar.train.windows[1][i][:, -1]
    expected = (dataset.target[t - 4 : t] - with_ar.stats["ar_mean"]) / with_ar.stats["ar_std"]
    assert np.allclose(col, expected, atol=1e-12)


def test_window_instance_accessor():
    dataset, _ = synth_generate(2, 1000, seed=6)
    data = window_and_split(dataset, lookback=5)
    inst = data.test.instance(0)
    assert inst.windows[0].shape == (5, 3)
    assert inst.y == data.test.y[0]


# ---------------------------------------------------------------------------
# bundles and CSV parsing


def test_bundle_round_trip_bit_identical(tmp_path):
    dataset, truth = synth_generate(3, 1200, seed=8)
    ts = dataset.timestamps
    residual, profile = deseasonalize(dataset.target, ts, dataset.interval_seconds, n_train_rows=800)
    dataset.seasonal = profile
    save_bundle(dataset, tmp_path / "bundle", ground_truth=truth)
    loaded, loaded_truth = load_bundle(tmp_path / "bundle")
    for a, b in zip(dataset.sources, loaded.sources):
        assert np.array_equal(a.values, b.values)
        assert a.feature_names == b.feature_names
    assert np.array_equal(dataset.target, loaded.target)
    assert np.array_equal(dataset.timestamps, loaded.timestamps)
    assert np.array_equal(dataset.seasonal.values, loaded.seasonal.values)
    assert np.array_equal(truth.regime, loaded_truth.regime)
    assert np.array_equal(truth.true_mean, loaded_truth.true_mean)
    assert np.array_equal(truth.component_mean, loaded_truth.component_mean)
    assert loaded_truth.noise_var == truth.noise_var


def test_load_trades_csv_and_errors(tmp_path):
    good = tmp_path / "trades.csv"
    good.write_text("timestamp,price,size,side\n1.0,100.0,0.5,buy\n2.0,101.0,0.2,sell\n")
    trades = load_trades_csv(good)
    assert len(trades) == 2 and trades[0].side == "buy"

    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,price,size,side\n1.0,100.0,0.5,buy\n2.0,oops,0.2,sell\n")
    with pytest.raises(DataError, match=r"bad.csv:3"):
        load_trades_csv(bad)


def test_load_lob_csv(tmp_path):
    path = tmp_path / "lob.csv"
    path.write_text(
        "timestamp,level,side,price,size\n"
        "1.0,0,bid,100.0,3.0\n"
        "1.0,0,ask,100.5,2.0\n"
        "1.0,1,ask,101.0,1.0\n"
    )
    snaps = load_lob_csv(path)
    assert len(snaps) == 1
    assert snaps[0].bids == ((100.0, 3.0),)
    assert snaps[0].asks == ((100.5, 2.0), (101.0, 1.0))

    bad = tmp_path / "bad_lob.csv"
    bad.write_text("timestamp,level,side,price,size\n1.0,0,mid,100.0,3.0\n")
    with pytest.raises(DataError, match=r"bad_lob.csv:2"):
        load_lob_csv(bad)


def market_fixture(rng, t_end=3000.0, lob_from=0.0):
    trades, snaps = [], []
    t = 0.0
    while t < t_end:
        t += float(rng.uniform(5, 40))
        trades.append(trade(t, "buy" if rng.random() < 0.5 else "sell", float(rng.uniform(0.1, 1.0))))
    t = lob_from
    while t < t_end:
        snaps.append(make_snap(t, mid=100.0 + float(rng.normal()), size=float(rng.uniform(0.5, 3.0))))
        t += float(rng.uniform(20, 90))
    return {"trades": trades, "lob": snaps}


def test_build_market_dataset_layout():
    rng = np.random.default_rng(9)
    markets = [dict(market_fixture(rng), id="m0"), dict(market_fixture(rng), id="m1")]
    dataset = build_market_dataset(markets, interval_seconds=300, deseason=False)
    assert dataset.dims == [6, 13, 6, 13]
    assert [s.market_id for s in dataset.sources] == ["m0", "m0", "m1", "m1"]
    # imbalance features are absolute differences
    for s in (0, 2):
        assert np.all(dataset.sources[s].values[:, 2] >= 0)
        assert np.all(dataset.sources[s].values[:, 5] >= 0)
    assert np.all(dataset.sources[1].values[:, 3] >= 0)
    assert np.array_equal(dataset.target, make_target(dataset.sources[0]))


def test_build_market_dataset_trims_leading_lob_gap():
    rng = np.random.default_rng(10)
    markets = [
        dict(market_fixture(rng), id="m0"),
        dict(market_fixture(rng, lob_from=900.0), id="m1"),
    ]
    full = build_market_dataset([dict(m) for m in markets], interval_seconds=300, deseason=False)
    assert full.timestamps[0] >= 900.0 - 300.0
    assert full.dims == [6, 13, 6, 13]


def test_build_market_dataset_deseasonalized_profile_recorded():
    rng = np.random.default_rng(11)
    markets = [dict(market_fixture(rng, t_end=20000.0), id="m0")]
    dataset = build_market_dataset(markets, interval_seconds=300, deseason=True)
    assert dataset.seasonal is not None
    assert dataset.dims == [6, 13]
