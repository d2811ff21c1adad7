"""Evaluation suite: RMSE/MAE, mean NLL, normalized quantile losses, and
uncertainty-conditioned error analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import inference
from .distributions import DistKind
from .model import BatchOutput
from .training import mixture_nll

QL_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass
class UncertaintyBin:
    q_lo: float
    q_hi: float
    count: int
    rmse: float


@dataclass
class EvalReport:
    rmse: float
    mae: float
    nllm: float
    qlm: float
    ql_by_alpha: dict[float, float]
    unc_bins: list[UncertaintyBin] = field(default_factory=list)
    unc_spearman: float | None = None
    unc_degenerate: bool = False


def _check_pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def nllm(outputs, y, kind: DistKind) -> float:
    """Mean negative log mixture density over instances."""
    return mixture_nll(outputs, y, kind)


def quantile_loss(y, yhat_alpha, alpha: float) -> float:
    """Pinball loss at one level, doubled and normalized by sum |y|."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {alpha}")
    y, yhat_alpha = _check_pair(y, yhat_alpha)
    denom = float(np.sum(np.abs(y)))
    if denom == 0.0:
        raise ValueError("quantile loss undefined for all-zero targets")
    diff = y - yhat_alpha
    num = 2.0 * np.sum(alpha * np.maximum(diff, 0.0) + (1.0 - alpha) * np.maximum(-diff, 0.0))
    return float(num / denom)


def qlm(y, quantile_preds: dict[float, np.ndarray]) -> float:
    """Mean quantile loss over the five standard levels."""
    missing = [a for a in QL_LEVELS if a not in quantile_preds]
    if missing:
        raise ValueError(f"missing quantile levels {missing}")
    return float(np.mean([quantile_loss(y, quantile_preds[a], a) for a in QL_LEVELS]))


def uncertainty_conditioned_errors(
    y, yhat, uncertainty, n_bins: int = 5
) -> tuple[list[UncertaintyBin], float | None, bool]:
    """Group instances by empirical uncertainty quantile and report per-bin RMSE.

    Ties on a bin edge go to the lower bin. Returns (bins, spearman rank
    correlation between bin index and bin RMSE over non-empty bins, degenerate
    flag set when everything collapses into one bin).
    """
    y, yhat = _check_pair(y, yhat)
    u = np.asarray(uncertainty, dtype=np.float64)
    if u.shape != y.shape:
        raise ValueError(f"uncertainty length {u.shape} != targets {y.shape}")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if y.size < n_bins:
        raise ValueError(f"{y.size} instances cannot fill {n_bins} bins")

    edges = np.quantile(u, [i / n_bins for i in range(1, n_bins)])
    idx = np.searchsorted(edges, u, side="left")
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        err = float(np.sqrt(np.mean((y[mask] - yhat[mask]) ** 2))) if count else float("nan")
        bins.append(UncertaintyBin(q_lo=b / n_bins, q_hi=(b + 1) / n_bins, count=count, rmse=err))

    occupied = [b for b in range(n_bins) if bins[b].count > 0]
    degenerate = len(occupied) <= 1
    spearman = None
    if not degenerate:
        rho = spearmanr(occupied, [bins[b].rmse for b in occupied]).statistic
        spearman = None if np.isnan(rho) else float(rho)
    return bins, spearman, degenerate


def point_predictions(outputs: BatchOutput, kind: DistKind) -> np.ndarray:
    """Mixture predictive means, vectorized over a batch."""
    if kind is DistKind.NORMAL:
        means = outputs.mu
    else:
        means = np.exp(outputs.mu + 0.5 * outputs.sigma2)
    return np.sum(outputs.weights * means, axis=1)


def uncertainty_scores(outputs: BatchOutput, kind: DistKind) -> np.ndarray:
    """Total predictive variance (aleatoric + mixture), vectorized."""
    if kind is DistKind.NORMAL:
        means, variances = outputs.mu, outputs.sigma2
    else:
        means = np.exp(outputs.mu + 0.5 * outputs.sigma2)
        variances = np.expm1(outputs.sigma2) * np.exp(2.0 * outputs.mu + outputs.sigma2)
    overall = np.sum(outputs.weights * means, axis=1)
    aleatoric = np.sum(outputs.weights * variances, axis=1)
    mixture = np.maximum(np.sum(outputs.weights * means * means, axis=1) - overall**2, 0.0)
    return aleatoric + mixture


def quantile_predictions(outputs: BatchOutput, kind: DistKind, alphas=QL_LEVELS) -> dict[float, np.ndarray]:
    """Per-instance quantiles at each requested level (root-finding per instance)."""
    n = len(outputs)
    preds = {float(a): np.empty(n) for a in alphas}
    for i in range(n):
        item = outputs.item(i)
        for a in alphas:
            preds[float(a)][i] = inference.quantile(item, kind, a)
    return preds


def evaluate(outputs: BatchOutput, y, kind: DistKind, n_bins: int = 5) -> EvalReport:
    """Full report over a split: point metrics, NLLm, QLm, uncertainty bins."""
    y = np.asarray(y, dtype=np.float64)
    yhat = point_predictions(outputs, kind)
    qpreds = quantile_predictions(outputs, kind)
    ql = {a: quantile_loss(y, qpreds[a], a) for a in QL_LEVELS}
    u = uncertainty_scores(outputs, kind)
    bins, rho, degenerate = uncertainty_conditioned_errors(y, yhat, u, n_bins=n_bins)
    return EvalReport(
        rmse=rmse(y, yhat),
        mae=mae(y, yhat),
        nllm=nllm(outputs, y, kind),
        qlm=qlm(y, qpreds),
        ql_by_alpha=ql,
        unc_bins=bins,
        unc_spearman=rho,
        unc_degenerate=degenerate,
    )


def report_to_json(report: EvalReport) -> str:
    blob = {
        "rmse": report.rmse,
        "mae": report.mae,
        "nllm": report.nllm,
        "qlm": report.qlm,
        "ql_by_alpha": {repr(a): v for a, v in sorted(report.ql_by_alpha.items())},
        "unc_bins": [
            {"q_lo": b.q_lo, "q_hi": b.q_hi, "count": b.count, "rmse": b.rmse} for b in report.unc_bins
        ],
        "unc_spearman": report.unc_spearman,
        "unc_degenerate": report.unc_degenerate,
    }
    return json.dumps(blob, indent=1)


def report_to_csv(report: EvalReport) -> str:
    header = ["rmse", "mae", "nllm", "qlm"]
    row = [report.rmse, report.mae, report.nllm, report.qlm]
    for a in sorted(report.ql_by_alpha):
        header.append(f"ql_{a}")
        row.append(report.ql_by_alpha[a])
    for i, b in enumerate(report.unc_bins):
        header += [f"bin{i}_count", f"bin{i}_rmse"]
        row += [b.count, b.rmse]
    header += ["unc_spearman", "unc_degenerate"]
    row += [report.unc_spearman, report.unc_degenerate]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerow(row)
    return buf.getvalue()
