"""Batch command-line front end: synth, featurize, train, evaluate, predict,
verify.

Config precedence is CLI flags > --config JSON file > built-in defaults; the
effective configuration is echoed into every output directory. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, grad_core, inference, metrics, training
from .dataio import DataError
from .distributions import DistKind
from .model import (
    ModelConfig,
    build_graph,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import PhasedSchedule, TrainingDiverged

DATA_DIR_ENV = "MIXCAST_DATA_DIR"


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _default_out(name: str) -> str:
    base = os.environ.get(DATA_DIR_ENV, ".")
    return str(Path(base) / name)


def _merge(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit CLI flags; unknown file keys rejected."""
    cfg = dict(defaults)
    provided = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    path = getattr(args, "config", None)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; known: {sorted(defaults)}")
        cfg.update(file_cfg)
    cfg.update(provided)
    return cfg


def _echo_config(out_dir: Path, command: str, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps({"command": command, **cfg}, indent=1, default=str))


def _parse_dist(name: str) -> DistKind:
    try:
        return DistKind(name)
    except ValueError:
        raise ConfigError(f"unknown distribution {name!r} (use normal or lognormal)") from None


# ---------------------------------------------------------------------------
# subcommands

SYNTH_DEFAULTS = {
    "sources": 3,
    "length": 20000,
    "seed": 0,
    "dist": "normal",
    "lookback": 8,
    "regime_persistence": 0.995,
    "out": None,
}


def cmd_synth(args) -> int:
    cfg = _merge(SYNTH_DEFAULTS, args)
    if cfg["sources"] < 2:
        raise ConfigError("the mixture experiment needs --sources >= 2")
    out = Path(cfg["out"] or _default_out("synth_bundle"))
    kind = _parse_dist(cfg["dist"])
    dataset, truth = dataio.synth_generate(
        n_sources=cfg["sources"],
        length=cfg["length"],
        lookback=cfg["lookback"],
        kind=kind,
        seed=cfg["seed"],
        regime_persistence=cfg["regime_persistence"],
    )
    dataio.save_bundle(dataset, out, ground_truth=truth)
    _echo_config(out, "synth", cfg)
    print(f"wrote synthetic bundle with {cfg['sources']} sources, T={cfg['length']} to {out}")
    return 0


FEATURIZE_DEFAULTS = {
    "interval": 300,
    "target_market": 0,
    "deseasonalize": True,
    "tick": 0.01,
    "out": None,
}


def cmd_featurize(args) -> int:
    cfg = _merge(FEATURIZE_DEFAULTS, args)
    markets_arg = getattr(args, "market", None)
    if not markets_arg:
        raise ConfigError("need at least one --market NAME TRADES_CSV LOB_CSV")
    markets = []
    for name, trades_path, lob_path in markets_arg:
        markets.append(
            {"id": name, "trades": dataio.load_trades_csv(trades_path), "lob": dataio.load_lob_csv(lob_path)}
        )
    dataset = dataio.build_market_dataset(
        markets,
        interval_seconds=cfg["interval"],
        target_market=cfg["target_market"],
        deseason=cfg["deseasonalize"],
        min_offset=cfg["tick"],
    )
    out = Path(cfg["out"] or _default_out("market_bundle"))
    dataio.save_bundle(dataset, out)
    cfg["market"] = [list(m) for m in markets_arg]
    _echo_config(out, "featurize", cfg)
    dims = dataset.dims
    print(f"wrote market bundle: {len(dataset.sources)} sources, dims {dims}, T={dataset.length} to {out}")
    return 0


TRAIN_DEFAULTS = {
    "bundle": None,
    "out": None,
    "lookback": 8,
    "horizon": 1,
    "hidden": 16,
    "layers": 1,
    "head_hidden": "",
    "logit_hidden": 8,
    "dist": None,
    "ar_source": "0",
    "sigma2_min": 1e-8,
    "impartial_epochs": 10,
    "epochs": 60,
    "lr": 1e-3,
    "optimizer": "adam",
    "batch_size": 256,
    "decay_rate": 0.85,
    "decay_every": 10,
    "grad_clip": None,
    "seed": 0,
}


def _resolve_ar_source(raw) -> int | None:
    if raw in (None, "none", "None", ""):
        return None
    return int(raw)


def cmd_train(args) -> int:
    cfg = _merge(TRAIN_DEFAULTS, args)
    if not cfg["bundle"]:
        raise ConfigError("--bundle is required")
    dataset, _ = dataio.load_bundle(cfg["bundle"])
    kind = _parse_dist(cfg["dist"] or dataset.dist_hint or "normal")
    if kind is DistKind.LOGNORMAL and np.any(dataset.target <= 0):
        raise ConfigError("log-normal mode requires strictly positive targets; this bundle has y <= 0")
    ar_source = _resolve_ar_source(cfg["ar_source"])
    windowed = dataio.window_and_split(
        dataset,
        lookback=cfg["lookback"],
        horizon=cfg["horizon"],
        fractions=dataset.split_fractions,
        dist=kind,
        ar_source=ar_source,
    )
    head_hidden = [int(v) for v in str(cfg["head_hidden"]).split(",") if v.strip()]
    config = ModelConfig(
        n_sources=len(dataset.sources),
        input_dims=windowed.dims,
        lookback=cfg["lookback"],
        hidden_size=cfg["hidden"],
        encoder_layers=cfg["layers"],
        head_hidden=head_hidden,
        logit_hidden=cfg["logit_hidden"],
        dist=kind,
        sigma2_min=cfg["sigma2_min"],
        seed=cfg["seed"],
    )
    schedule = PhasedSchedule(
        impartial_epochs=cfg["impartial_epochs"],
        total_epochs=cfg["epochs"],
        step_size=cfg["lr"],
        optimizer=cfg["optimizer"],
        batch_size=cfg["batch_size"],
        lr_decay_rate=cfg["decay_rate"],
        lr_decay_every=cfg["decay_every"],
        grad_clip=cfg["grad_clip"],
        seed=cfg["seed"],
    )
    out = Path(cfg["out"] or _default_out("train_run"))
    out.mkdir(parents=True, exist_ok=True)
    params, diag = training.train(windowed, config, schedule)
    extra = {
        "schedule": schedule.to_dict(),
        "window": {
            "lookback": cfg["lookback"],
            "horizon": cfg["horizon"],
            "ar_source": ar_source,
            "stats": _stats_to_json(windowed.stats),
        },
        "best_epoch": diag.best_epoch,
    }
    save_checkpoint(out / "checkpoint.json", config, params, extra)
    diag.to_csv(out / "diagnostics.csv")
    _echo_config(out, "train", cfg)
    print(
        f"trained {schedule.total_epochs} epochs ({schedule.impartial_epochs} impartial); "
        f"best val NLL {diag.val_nll[diag.best_epoch]:.6f} at epoch {diag.best_epoch}; wrote {out}"
    )
    return 0


def _stats_to_json(stats: dict) -> dict:
    return {
        "feature_mean": [m.tolist() for m in stats["feature_mean"]],
        "feature_std": [m.tolist() for m in stats["feature_std"]],
        "target_mean": stats["target_mean"],
        "target_std": stats["target_std"],
        "ar_mean": stats["ar_mean"],
        "ar_std": stats["ar_std"],
    }


def _stats_from_json(blob: dict) -> dict:
    return {
        "feature_mean": [np.asarray(m) for m in blob["feature_mean"]],
        "feature_std": [np.asarray(m) for m in blob["feature_std"]],
        "target_mean": blob["target_mean"],
        "target_std": blob["target_std"],
        "ar_mean": blob["ar_mean"],
        "ar_std": blob["ar_std"],
    }


def _load_for_inference(cfg):
    if not cfg["checkpoint"] or not cfg["bundle"]:
        raise ConfigError("--checkpoint and --bundle are required")
    config, params, extra = load_checkpoint(cfg["checkpoint"])
    dataset, truth = dataio.load_bundle(cfg["bundle"])
    win = extra["window"]
    windowed = dataio.window_and_split(
        dataset,
        lookback=win["lookback"],
        horizon=win["horizon"],
        fractions=dataset.split_fractions,
        dist=config.dist,
        ar_source=win["ar_source"],
        stats=_stats_from_json(win["stats"]),
    )
    split = {"train": windowed.train, "val": windowed.val, "test": windowed.test}[cfg["split"]]
    return config, params, windowed, split, dataset, truth


EVALUATE_DEFAULTS = {
    "checkpoint": None,
    "bundle": None,
    "split": "test",
    "bins": 5,
    "format": "json",
    "out": None,
}


def cmd_evaluate(args) -> int:
    cfg = _merge(EVALUATE_DEFAULTS, args)
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError(f"--format must be json or csv, got {cfg['format']!r}")
    config, params, _, split, _, _ = _load_for_inference(cfg)
    outputs = forward_batch(split.windows, params, config)
    report = metrics.evaluate(outputs, split.y, config.dist, n_bins=cfg["bins"])
    text = metrics.report_to_json(report) if cfg["format"] == "json" else metrics.report_to_csv(report)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        name = "report.json" if cfg["format"] == "json" else "report.csv"
        (out / name).write_text(text)
        _echo_config(out, "evaluate", cfg)
        print(f"wrote {out / name}")
    else:
        print(text)
    return 0


PREDICT_DEFAULTS = {
    "checkpoint": None,
    "bundle": None,
    "split": "test",
    "out": None,
    "raw_units": False,
}


def cmd_predict(args) -> int:
    cfg = _merge(PREDICT_DEFAULTS, args)
    config, params, windowed, split, dataset, _ = _load_for_inference(cfg)
    outputs = forward_batch(split.windows, params, config)
    stats = windowed.stats

    records = []
    for i in range(len(outputs)):
        item = outputs.item(i)
        result = inference.forecast(item, config.dist, timestamp=float(split.timestamps[i]))
        rec = inference.forecast_record(result, item.weights)
        if stats.get("target_mean") is not None:
            sd, m = stats["target_std"], stats["target_mean"]
            for key in ("mean", "q10", "q30", "q50", "q70", "q90"):
                rec[key] = rec[key] * sd + m
            for key in ("aleatoric", "mixture", "total"):
                rec[key] = rec[key] * sd * sd
        if cfg["raw_units"] and dataset.seasonal is not None:
            offset = float(dataset.seasonal.values[dataset.seasonal.slot_of(np.asarray([rec["timestamp"]]))[0]])
            for key in ("mean", "q10", "q30", "q50", "q70", "q90"):
                rec[key] = rec[key] + offset
        records.append(rec)

    lines = "\n".join(json.dumps(r) for r in records)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions.jsonl").write_text(lines + "\n")
        _echo_config(out, "predict", cfg)
        print(f"wrote {len(records)} forecasts to {out / 'predictions.jsonl'}")
    else:
        print(lines)
    return 0


VERIFY_DEFAULTS = {"seed": 0, "trials": 20, "bound_trials": 200}


def cmd_verify(args) -> int:
    cfg = _merge(VERIFY_DEFAULTS, args)
    rng = np.random.default_rng(cfg["seed"])
    worst_grad, worst_identity, bound_violations = 0.0, 0.0, 0

    for kind in (DistKind.NORMAL, DistKind.LOGNORMAL):
        config = ModelConfig(
            n_sources=2, input_dims=[3, 2], lookback=4, hidden_size=4, logit_hidden=3,
            dist=kind, seed=int(rng.integers(2**31)),
        )
        params = init_params(config)
        windows = [rng.normal(size=(2, config.lookback, d)) for d in config.input_dims]
        y = rng.normal(size=2) if kind is DistKind.NORMAL else np.exp(rng.normal(size=2))

        def loss_fn(tape, leaves, _w=windows, _y=y, _cfg=config, _params=params):
            mirror = _params.copy()
            for name, _ in mirror.named():
                mirror.set(name, leaves[name])
            gout = build_graph(tape, mirror, _w, _cfg)
            return training.graph_mixture_nll(gout, _y, _cfg.dist)

        flat = dict(params.named())
        worst_grad = max(worst_grad, grad_core.check_gradients(loss_fn, flat, step=1e-5))

        for _ in range(cfg["trials"]):
            trial_cfg = ModelConfig(
                n_sources=2, input_dims=[3, 2], lookback=4, hidden_size=4, logit_hidden=3,
                dist=kind, seed=int(rng.integers(2**31)),
            )
            p = init_params(trial_cfg)
            w = [rng.normal(size=(1, trial_cfg.lookback, d)) for d in trial_cfg.input_dims]
            yy = rng.normal(size=1) if kind is DistKind.NORMAL else np.exp(rng.normal(size=1))
            worst_identity = max(worst_identity, training.check_posterior_gradient_identity(p, trial_cfg, w, yy))

        for _ in range(cfg["bound_trials"]):
            w = [rng.normal(size=(1, config.lookback, d)) for d in config.input_dims]
            yy = float(rng.normal()) if kind is DistKind.NORMAL else float(np.exp(rng.normal()))
            try:
                training.check_equal_weight_bound(params, config, w, yy)
            except ValueError:
                bound_violations += 1

    print(f"gradient check max relative error: {worst_grad:.3e} (tolerance 1e-4)")
    print(f"posterior-gradient identity max discrepancy: {worst_identity:.3e} (tolerance 1e-8)")
    print(f"equal-weight bound violations: {bound_violations} of {2 * cfg['bound_trials']}")
    ok = worst_grad < 1e-4 and worst_identity < 1e-8 and bound_violations == 0
    if not ok:
        raise ArithmeticError("verification tolerances exceeded")
    print("all verification checks passed")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mixcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")

    p = sub.add_parser("synth", help="generate a synthetic regime-switching bundle")
    add_common(p)
    p.add_argument("--sources", type=int, help="number of data sources (>= 2)")
    p.add_argument("--length", type=int, help="series length")
    p.add_argument("--seed", type=int)
    p.add_argument("--dist", choices=["normal", "lognormal"])
    p.add_argument("--lookback", type=int)
    p.add_argument("--regime-persistence", dest="regime_persistence", type=float)
    p.add_argument("-o", "--out", dest="out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="build a market bundle from trades/LOB CSVs")
    add_common(p)
    p.add_argument("--market", nargs=3, action="append", metavar=("NAME", "TRADES_CSV", "LOB_CSV"))
    p.add_argument("--interval", type=int)
    p.add_argument("--target-market", dest="target_market", type=int)
    p.add_argument("--deseasonalize", dest="deseasonalize", action="store_true")
    p.add_argument("--no-deseasonalize", dest="deseasonalize", action="store_false")
    p.add_argument("--tick", type=float)
    p.add_argument("-o", "--out", dest="out")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train on a bundle with phased learning")
    add_common(p)
    p.add_argument("--bundle")
    p.add_argument("--lookback", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--head-hidden", dest="head_hidden")
    p.add_argument("--logit-hidden", dest="logit_hidden", type=int)
    p.add_argument("--dist", choices=["normal", "lognormal"])
    p.add_argument("--ar-source", dest="ar_source", help="source index for the target-history column, or 'none'")
    p.add_argument("--sigma2-min", dest="sigma2_min", type=float)
    p.add_argument("--impartial-epochs", dest="impartial_epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--decay-rate", dest="decay_rate", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", dest="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric report for a checkpoint on a bundle split")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--bundle")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--bins", type=int)
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("-o", "--out", dest="out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="JSONL forecasts for a checkpoint on a bundle split")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--bundle")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--raw-units", dest="raw_units", action="store_true")
    p.add_argument("-o", "--out", dest="out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="run gradient and bound identity suites")
    add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--bound-trials", dest="bound_trials", type=int)
    p.set_defaults(func=cmd_verify)

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.dest not in ("help", "func", "command"):
                action.default = argparse.SUPPRESS

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
