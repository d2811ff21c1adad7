import hashlib
import json

import numpy as np
import pytest

from mixcast.cli import main
from mixcast.dataio import load_bundle


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


def synth_args(out, seed=0, length=1000, sources=3):
    return ["synth", "--sources", sources, "--length", length, "--seed", seed, "-o", out]


def train_args(bundle, out, **kw):
    args = [
        "train", "--bundle", bundle, "-o", out,
        "--lookback", 4, "--hidden", 4, "--logit-hidden", 3,
        "--epochs", kw.pop("epochs", 2), "--impartial-epochs", kw.pop("impartial", 1),
        "--batch-size", 256, "--seed", kw.pop("seed", 0), "--ar-source", "none",
    ]
    for k, v in kw.items():
        args += [f"--{k}", v]
    return args


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "bundle"
    assert run(*synth_args(out)) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, bundle):
    out = tmp_path_factory.mktemp("run") / "train"
    assert run(*train_args(bundle, out)) == 0
    return out


def test_synth_writes_bundle(bundle):
    assert (bundle / "meta.json").exists()
    assert all((bundle / f"source_{i}.csv").exists() for i in range(3))
    assert (bundle / "ground_truth.csv").exists()
    assert (bundle / "run_config.json").exists()


def test_synth_deterministic_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*synth_args(a, seed=5)) == 0
    assert run(*synth_args(b, seed=5)) == 0
    for name in ["source_0.csv", "source_1.csv", "source_2.csv", "target.csv", "ground_truth.csv"]:
        assert file_hash(a / name) == file_hash(b / name)


def test_synth_rejects_single_source(tmp_path, capsys):
    assert run(*synth_args(tmp_path / "x", sources=1)) == 1
    assert "sources" in capsys.readouterr().err


def test_usage_error_exit_code():
    assert run("synth", "--no-such-flag") == 1


def test_missing_bundle_is_data_error(tmp_path):
    assert run(*train_args(tmp_path / "nope", tmp_path / "out")) == 2


def test_train_outputs_and_determinism(bundle, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*train_args(bundle, a, seed=3)) == 0
    assert run(*train_args(bundle, b, seed=3)) == 0
    assert file_hash(a / "checkpoint.json") == file_hash(b / "checkpoint.json")
    assert file_hash(a / "diagnostics.csv") == file_hash(b / "diagnostics.csv")

    lines = (a / "diagnostics.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,phase,loss,rmse_src_0")
    assert len(lines) == 3


def test_train_phase_boundary_flag(bundle, tmp_path):
    direct = tmp_path / "direct"
    assert run(*train_args(bundle, direct, impartial=0, seed=3)) == 0
    phased_rows = (tmp_path / ".." / "a" / "diagnostics.csv").resolve()
    rows = (direct / "diagnostics.csv").read_text().strip().splitlines()
    assert rows[1].split(",")[1] == "collective"


def test_train_rejects_lognormal_on_signed_targets(bundle, tmp_path, capsys):
    code = run(*train_args(bundle, tmp_path / "ln", dist="lognormal"))
    assert code == 1
    assert "positive" in capsys.readouterr().err


def test_evaluate_report(trained, bundle, tmp_path, capsys):
    assert run("evaluate", "--checkpoint", trained / "checkpoint.json", "--bundle", bundle, "--split", "test") == 0
    report = json.loads(capsys.readouterr().out)
    for key in ("rmse", "mae", "nllm", "qlm", "ql_by_alpha", "unc_bins"):
        assert key in report
    assert len(report["ql_by_alpha"]) == 5

    out = tmp_path / "eval"
    assert run(
        "evaluate", "--checkpoint", trained / "checkpoint.json", "--bundle", bundle,
        "--split", "test", "--format", "csv", "-o", out,
    ) == 0
    assert (out / "report.csv").read_text().startswith("rmse,mae,nllm,qlm")


def test_evaluate_idempotent(trained, bundle, capsys):
    args = ("evaluate", "--checkpoint", trained / "checkpoint.json", "--bundle", bundle, "--split", "val")
    assert run(*args) == 0
    first = capsys.readouterr().out
    assert run(*args) == 0
    second = capsys.readouterr().out
    assert first == second


def test_predict_jsonl_schema(trained, bundle, tmp_path):
    out = tmp_path / "pred"
    assert run(
        "predict", "--checkpoint", trained / "checkpoint.json", "--bundle", bundle, "--split", "test", "-o", out
    ) == 0
    lines = (out / "predictions.jsonl").read_text().strip().splitlines()

    dataset, _ = load_bundle(bundle)
    n_test = dataset.length - int(0.8 * dataset.length)
    assert len(lines) == n_test

    rec = json.loads(lines[0])
    assert set(rec) == {"timestamp", "mean", "aleatoric", "mixture", "total", "q10", "q30", "q50", "q70", "q90", "weights"}
    assert len(rec["weights"]) == 3
    assert sum(rec["weights"]) == pytest.approx(1.0, abs=1e-9)
    assert rec["q10"] <= rec["q50"] <= rec["q90"]


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"length": 1200, "seed": 9}))
    out = tmp_path / "bundle"
    assert run("synth", "--config", cfg, "--sources", 2, "--length", 1500, "-o", out) == 0
    echoed = json.loads((out / "run_config.json").read_text())
    assert echoed["length"] == 1500  # flag wins over file
    assert echoed["seed"] == 9  # file wins over default
    dataset, _ = load_bundle(out)
    assert dataset.length == 1500


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lenght": 1200}))
    assert run("synth", "--config", cfg, "-o", tmp_path / "x") == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_verify_command(capsys):
    assert run("verify", "--trials", 3, "--bound-trials", 20) == 0
    out = capsys.readouterr().out
    assert "gradient check" in out
    assert "identity" in out
    assert "all verification checks passed" in out


def test_featurize_two_market_fixture(tmp_path):
    rng = np.random.default_rng(0)
    for market in ("m0", "m1"):
        lines = ["timestamp,price,size,side"]
        t = 0.0
        while t < 3000:
            t += float(rng.uniform(5, 30))
            side = "buy" if rng.random() < 0.5 else "sell"
            lines.append(f"{t},100.0,{rng.uniform(0.1, 1.0)},{side}")
        (tmp_path / f"{market}_trades.csv").write_text("\n".join(lines) + "\n")
        lines = ["timestamp,level,side,price,size"]
        t = 0.0
        while t < 3000:
            lines.append(f"{t},0,bid,99.5,{rng.uniform(1, 3)}")
            lines.append(f"{t},0,ask,100.5,{rng.uniform(1, 3)}")
            t += float(rng.uniform(30, 60))
        (tmp_path / f"{market}_lob.csv").write_text("\n".join(lines) + "\n")

    out300 = tmp_path / "b300"
    assert run(
        "featurize",
        "--market", "m0", tmp_path / "m0_trades.csv", tmp_path / "m0_lob.csv",
        "--market", "m1", tmp_path / "m1_trades.csv", tmp_path / "m1_lob.csv",
        "--interval", 300, "--no-deseasonalize", "-o", out300,
    ) == 0
    dataset, _ = load_bundle(out300)
    assert dataset.dims == [6, 13, 6, 13]

    out60 = tmp_path / "b60"
    assert run(
        "featurize",
        "--market", "m0", tmp_path / "m0_trades.csv", tmp_path / "m0_lob.csv",
        "--interval", 60, "--no-deseasonalize", "-o", out60,
    ) == 0
    fine, _ = load_bundle(out60)
    assert fine.length == pytest.approx(5 * dataset.length, rel=0.1)

    out_season = tmp_path / "bseason"
    assert run(
        "featurize",
        "--market", "m0", tmp_path / "m0_trades.csv", tmp_path / "m0_lob.csv",
        "--interval", 300, "--deseasonalize", "-o", out_season,
    ) == 0
    meta = json.loads((out_season / "meta.json").read_text())
    assert meta["seasonal"] is not None


def test_featurize_malformed_row_is_data_error(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("timestamp,price,size,side\n1.0,100.0,0.5,buy\nbroken\n")
    (tmp_path / "l.csv").write_text("timestamp,level,side,price,size\n1.0,0,bid,99.5,1.0\n1.0,0,ask,100.5,1.0\n")
    code = run("featurize", "--market", "m0", tmp_path / "t.csv", tmp_path / "l.csv", "-o", tmp_path / "out")
    assert code == 2
    assert ":3" in capsys.readouterr().err
