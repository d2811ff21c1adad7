"""Losses, posterior weights, gradient-identity checks, and the phased trainer.

Training runs in two stages: an impartial phase that minimizes the
equal-weighted per-source negative log-likelihood (an upper bound of the
mixture loss up to a weight-dependent constant) while the weight net stays
frozen, then a collective phase that minimizes the full mixture loss over all
parameters. The posterior-weighted closed forms of the mixture-loss gradients
are implemented independently and checked against autodiff.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import grad_core as gc
from .distributions import LOG_2PI, DistKind
from .model import (
    BatchOutput,
    GraphOutput,
    MixtureOutput,
    ModelConfig,
    ModelParams,
    build_graph,
    init_params,
    params_to_leaves,
)


class TrainingDiverged(ArithmeticError):
    """Non-finite loss encountered; carries the last usable checkpoint."""

    def __init__(self, message: str, params: ModelParams, diagnostics: "TrainDiagnostics | None"):
        super().__init__(message)
        self.params = params
        self.diagnostics = diagnostics


@dataclass
class PhasedSchedule:
    impartial_epochs: int = 10
    total_epochs: int = 60
    step_size: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    lr_decay_rate: float = 0.85
    lr_decay_every: int = 10
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.impartial_epochs <= self.total_epochs:
            raise ValueError("need 0 <= impartial_epochs <= total_epochs")
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ValueError("total_epochs and batch_size must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.step_size * self.lr_decay_rate ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return {
            "impartial_epochs": self.impartial_epochs,
            "total_epochs": self.total_epochs,
            "step_size": self.step_size,
            "optimizer": self.optimizer,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "batch_size": self.batch_size,
            "lr_decay_rate": self.lr_decay_rate,
            "lr_decay_every": self.lr_decay_every,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
        }


@dataclass
class TrainDiagnostics:
    """Per-epoch training-set trajectory: loss, per-source RMSE, mean posterior."""

    loss: np.ndarray  # (E,)
    source_rmse: np.ndarray  # (E, S)
    mean_posterior: np.ndarray  # (E, S)
    val_nll: np.ndarray  # (E,)
    phase_boundary: int
    best_epoch: int = -1

    def to_csv(self, path):
        n_src = self.source_rmse.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "phase", "loss"]
                + [f"rmse_src_{s}" for s in range(n_src)]
                + [f"pi_src_{s}" for s in range(n_src)]
            )
            for e in range(len(self.loss)):
                phase = "impartial" if e < self.phase_boundary else "collective"
                writer.writerow(
                    [e, phase, repr(float(self.loss[e]))]
                    + [repr(float(v)) for v in self.source_rmse[e]]
                    + [repr(float(v)) for v in self.mean_posterior[e]]
                )


# ---------------------------------------------------------------------------
# numeric losses and posteriors


def _as_arrays(outputs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(outputs, BatchOutput):
        return outputs.weights, outputs.mu, outputs.sigma2
    if isinstance(outputs, MixtureOutput):
        outputs = [outputs]
    w = np.stack([o.weights for o in outputs])
    mu = np.array([[p.mu for p in o.dist_params] for o in outputs])
    s2 = np.array([[p.sigma2 for p in o.dist_params] for o in outputs])
    return w, mu, s2


def _component_log_pdf(mu: np.ndarray, sigma2: np.ndarray, y: np.ndarray, kind: DistKind) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if kind is DistKind.NORMAL:
        return -0.5 * (LOG_2PI + np.log(sigma2)) - (y - mu) ** 2 / (2.0 * sigma2)
    if np.any(y <= 0.0):
        bad = int(np.argmax(y.ravel() <= 0.0))
        raise ValueError(f"log-normal target must be > 0 (instance {bad}: y={y.ravel()[bad]})")
    ly = np.log(y)
    return -0.5 * (LOG_2PI + np.log(sigma2)) - ly - (ly - mu) ** 2 / (2.0 * sigma2)


def log_mixture_density(outputs, targets, kind: DistKind) -> np.ndarray:
    """Per-instance log of the weighted mixture density, in log space throughout."""
    w, mu, s2 = _as_arrays(outputs)
    lp = _component_log_pdf(mu, s2, targets, kind)
    with np.errstate(divide="ignore"):
        lw = np.log(w)
    return logsumexp(lw + lp, axis=1)


def mixture_nll(outputs, targets, kind: DistKind) -> float:
    """Mean negative log mixture density over the batch."""
    ld = log_mixture_density(outputs, targets, kind)
    if ld.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(ld)):
        bad = int(np.argmax(~np.isfinite(ld)))
        raise ValueError(f"non-finite mixture log-density at instance {bad}")
    return float(-ld.mean())


def impartial_loss(outputs, targets, kind: DistKind) -> float:
    """Equal-weighted per-source NLL; the weight net contributes nothing here."""
    _, mu, s2 = _as_arrays(outputs)
    lp = _component_log_pdf(mu, s2, targets, kind)
    if lp.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(lp)):
        bad = int(np.argmax(~np.isfinite(lp).all(axis=1)))
        raise ValueError(f"non-finite per-source log-density at instance {bad}")
    return float(-lp.mean())


def posterior_weights(output: MixtureOutput, y: float, kind: DistKind) -> np.ndarray:
    """P(source | observed target): density-reweighted mixture weights."""
    return posterior_weights_batch(output, np.asarray([y], dtype=np.float64), kind)[0]


def posterior_weights_batch(outputs, targets, kind: DistKind) -> np.ndarray:
    w, mu, s2 = _as_arrays(outputs)
    lp = _component_log_pdf(mu, s2, targets, kind)
    with np.errstate(divide="ignore"):
        lj = np.log(w) + lp
    norm = logsumexp(lj, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        bad = int(np.argmax(~np.isfinite(norm.ravel())))
        raise ValueError(f"all component densities underflowed at instance {bad}")
    return np.exp(lj - norm)


# ---------------------------------------------------------------------------
# graph-side losses (autodiff path)


def graph_component_log_pdf(gout: GraphOutput, targets: np.ndarray, kind: DistKind) -> gc.Tensor:
    """(B, S) tensor of per-source log densities at the targets."""
    tape = gout.mu.tape
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    half_log_s2 = gc.log(gout.sigma2) * 0.5
    if kind is DistKind.NORMAL:
        yc = tape.const(y)
        quad = gc.square(yc - gout.mu) / (gout.sigma2 * 2.0)
        return (half_log_s2 + quad + 0.5 * LOG_2PI) * -1.0
    if np.any(y <= 0.0):
        bad = int(np.argmax(y.ravel() <= 0.0))
        raise ValueError(f"log-normal target must be > 0 (instance {bad}: y={y.ravel()[bad]})")
    ly = np.log(y)
    lyc = tape.const(ly)
    quad = gc.square(lyc - gout.mu) / (gout.sigma2 * 2.0)
    return (half_log_s2 + quad + lyc + 0.5 * LOG_2PI) * -1.0


def graph_mixture_nll(gout: GraphOutput, targets: np.ndarray, kind: DistKind) -> gc.Tensor:
    lp = graph_component_log_pdf(gout, targets, kind)
    per_instance = gc.log_sum_exp(gout.log_weights + lp, axis=1)
    return gc.mean(per_instance) * -1.0


def graph_impartial_nll(gout: GraphOutput, targets: np.ndarray, kind: DistKind) -> gc.Tensor:
    lp = graph_component_log_pdf(gout, targets, kind)
    return gc.mean(lp) * -1.0


def _graph_batch_output(gout: GraphOutput) -> BatchOutput:
    return BatchOutput(
        weights=np.exp(gout.log_weights.data),
        mu=gout.mu.data.copy(),
        sigma2=gout.sigma2.data.copy(),
        reps=[r.data.copy() for r in gout.reps],
    )


# ---------------------------------------------------------------------------
# closed-form gradient identities


def _grad_map(tape: gc.Tape, leaves: ModelParams, root: gc.Tensor) -> dict[str, np.ndarray]:
    grads = tape.backward(root)
    out = {}
    for name, leaf in leaves.named():
        g = grads.get(leaf.nid)
        out[name] = np.zeros_like(leaf.data) if g is None else g
    return out


def check_posterior_gradient_identity(
    params: ModelParams, config: ModelConfig, windows: list[np.ndarray], targets: np.ndarray
) -> float:
    """Compare autodiff gradients of the mixture loss against their
    posterior-weighted closed form; returns the max relative gap.

    The closed form scales each source's own NLL gradient by the posterior
    weight and, for encoder parameters, adds the posterior-averaged gradient
    of the log mixture weights.
    """
    kind = config.dist
    targets = np.asarray(targets, dtype=np.float64)

    t1 = gc.Tape()
    lv1 = params_to_leaves(t1, params)
    g1 = build_graph(t1, lv1, windows, config)
    direct = _grad_map(t1, lv1, graph_mixture_nll(g1, targets, kind))
    post = posterior_weights_batch(_graph_batch_output(g1), targets, kind)

    # per-source NLL weighted by (constant) posteriors: grads give pi*g terms
    t2 = gc.Tape()
    lv2 = params_to_leaves(t2, params)
    g2 = build_graph(t2, lv2, windows, config)
    lp2 = graph_component_log_pdf(g2, targets, kind)
    weighted_nll = gc.mean(gc.sum_(t2.const(post) * lp2, axis=1)) * -1.0
    pred_grads = _grad_map(t2, lv2, weighted_nll)

    # posterior-weighted log mixture weights: grads give the coupling term
    t3 = gc.Tape()
    lv3 = params_to_leaves(t3, params)
    g3 = build_graph(t3, lv3, windows, config)
    weighted_lw = gc.mean(gc.sum_(t3.const(post) * g3.log_weights, axis=1)) * -1.0
    weight_grads = _grad_map(t3, lv3, weighted_lw)

    worst = 0.0
    for name in params.names_for("omega"):
        gap = np.abs(direct[name] - pred_grads[name]) / np.maximum(1.0, np.abs(direct[name]))
        worst = max(worst, float(gap.max()))
    for name in params.names_for("eta"):
        closed = pred_grads[name] + weight_grads[name]
        gap = np.abs(direct[name] - closed) / np.maximum(1.0, np.abs(direct[name]))
        worst = max(worst, float(gap.max()))
    return worst


def check_equal_weight_bound(
    params: ModelParams, config: ModelConfig, windows: list[np.ndarray], target: float
) -> tuple[float, float]:
    """Single-instance mixture loss and its equal-weight upper bound.

    bound = mean over sources of -log p_s  -  log(S * min_s w_s); raises if
    the bound is violated beyond 1e-9.
    """
    from .model import forward_batch

    out = forward_batch(windows, params, config)
    y = np.asarray([target], dtype=np.float64)
    loss = mixture_nll(out, y, config.dist)
    lp = _component_log_pdf(out.mu, out.sigma2, y, config.dist)[0]
    a_star = float(out.weights[0].min())
    bound = float(-lp.mean() - math.log(config.n_sources * a_star))
    if loss > bound + 1e-9:
        raise ValueError(f"mixture loss {loss} exceeds equal-weight bound {bound}")
    return loss, bound


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, schedule: PhasedSchedule):
        del schedule

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            params.set(name, params.get(name) - lr * g)


class Adam:
    def __init__(self, schedule: PhasedSchedule):
        self.b1 = schedule.adam_beta1
        self.b2 = schedule.adam_beta2
        self.eps = schedule.adam_eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.b1**t)
            v_hat = v / (1.0 - self.b2**t)
            params.set(name, params.get(name) - lr * m_hat / (np.sqrt(v_hat) + self.eps))


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale


# ---------------------------------------------------------------------------
# trainer


def _chunked_outputs(split, params: ModelParams, config: ModelConfig, chunk: int = 2048):
    from .model import forward_batch

    n = len(split.y)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        yield lo, hi, forward_batch([w[lo:hi] for w in split.windows], params, config)


def evaluate_nll(split, params: ModelParams, config: ModelConfig) -> float:
    total, n = 0.0, len(split.y)
    for lo, hi, out in _chunked_outputs(split, params, config):
        total += mixture_nll(out, split.y[lo:hi], config.dist) * (hi - lo)
    return total / n


def source_wise_rmse(params: ModelParams, split, config: ModelConfig) -> np.ndarray:
    """Per-source RMSE between targets and that source's own predictive mean."""
    sq = np.zeros(config.n_sources)
    n = len(split.y)
    for lo, hi, out in _chunked_outputs(split, params, config):
        means = _source_means(out, config.dist)
        sq += ((split.y[lo:hi, None] - means) ** 2).sum(axis=0)
    return np.sqrt(sq / n)


def _source_means(out: BatchOutput, kind: DistKind) -> np.ndarray:
    if kind is DistKind.NORMAL:
        return out.mu
    return np.exp(out.mu + 0.5 * out.sigma2)


def _epoch_stats(split, params: ModelParams, config: ModelConfig):
    n = len(split.y)
    loss_sum = 0.0
    sq = np.zeros(config.n_sources)
    post_sum = np.zeros(config.n_sources)
    for lo, hi, out in _chunked_outputs(split, params, config):
        y = split.y[lo:hi]
        ld = log_mixture_density(out, y, config.dist)
        loss_sum += float(-ld.sum())
        sq += ((y[:, None] - _source_means(out, config.dist)) ** 2).sum(axis=0)
        post_sum += posterior_weights_batch(out, y, config.dist).sum(axis=0)
    return loss_sum / n, np.sqrt(sq / n), post_sum / n


def train(data, config: ModelConfig, schedule: PhasedSchedule) -> tuple[ModelParams, TrainDiagnostics]:
    """Phased training over windowed splits; returns the best-validation
    checkpoint and the full training-set trajectory.

    Epochs before the phase boundary minimize the equal-weighted per-source
    NLL and leave the weight net untouched; the rest minimize the mixture
    loss over all parameters.
    """
    params = init_params(config)
    opt = Adam(schedule) if schedule.optimizer == "adam" else Sgd(schedule)
    rng = np.random.default_rng(schedule.seed)
    kind = config.dist
    n = len(data.train.y)
    if n == 0:
        raise ValueError("empty training split")
    if kind is DistKind.LOGNORMAL and (np.any(data.train.y <= 0) or np.any(data.val.y <= 0)):
        raise ValueError("log-normal mode requires strictly positive targets")

    epochs = schedule.total_epochs
    diag = TrainDiagnostics(
        loss=np.zeros(epochs),
        source_rmse=np.zeros((epochs, config.n_sources)),
        mean_posterior=np.zeros((epochs, config.n_sources)),
        val_nll=np.zeros(epochs),
        phase_boundary=schedule.impartial_epochs,
    )
    best_nll = math.inf
    best_params = params.copy()
    best_epoch = -1

    active_impartial = params.names_for("eta") + params.names_for("omega")
    active_all = active_impartial + params.names_for("theta")

    for epoch in range(epochs):
        impartial = epoch < schedule.impartial_epochs
        active = active_impartial if impartial else active_all
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            tape = gc.Tape()
            leaves = params_to_leaves(tape, params)
            gout = build_graph(tape, leaves, [w[idx] for w in data.train.windows], config)
            yb = data.train.y[idx]
            loss = graph_impartial_nll(gout, yb, kind) if impartial else graph_mixture_nll(gout, yb, kind)
            if not np.isfinite(loss.data):
                diag_cut = _truncate_diagnostics(diag, epoch)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; returning best checkpoint (epoch {best_epoch})",
                    best_params,
                    diag_cut,
                )
            node_grads = tape.backward(loss)
            leaf_by_name = dict(leaves.named())
            grads = {}
            for name in active:
                g = node_grads.get(leaf_by_name[name].nid)
                grads[name] = np.zeros_like(params.get(name)) if g is None else g
            if schedule.grad_clip is not None:
                _clip_gradients(grads, schedule.grad_clip)
            opt.step(params, grads, lr)

        diag.loss[epoch], diag.source_rmse[epoch], diag.mean_posterior[epoch] = _epoch_stats(
            data.train, params, config
        )
        diag.val_nll[epoch] = evaluate_nll(data.val, params, config) if len(data.val.y) else diag.loss[epoch]
        if diag.val_nll[epoch] < best_nll:
            best_nll = diag.val_nll[epoch]
            best_params = params.copy()
            best_epoch = epoch

    diag.best_epoch = best_epoch
    return best_params, diag


def _truncate_diagnostics(diag: TrainDiagnostics, epochs_done: int) -> TrainDiagnostics:
    return TrainDiagnostics(
        loss=diag.loss[:epochs_done].copy(),
        source_rmse=diag.source_rmse[:epochs_done].copy(),
        mean_posterior=diag.mean_posterior[:epochs_done].copy(),
        val_nll=diag.val_nll[:epochs_done].copy(),
        phase_boundary=min(diag.phase_boundary, epochs_done),
        best_epoch=diag.best_epoch,
    )
