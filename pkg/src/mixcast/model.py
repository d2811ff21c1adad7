"""Adaptive mixture architecture: per-source LSTM encoders, per-source
distribution heads, and a softmax weight net over per-source logits.

Parameters are plain float64 numpy arrays; every forward pass builds a fresh
``grad_core.Tape`` graph, so the same code path serves inference and training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad_core as gc
from .distributions import DistKind, DistParams

CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    n_sources: int
    input_dims: list[int]
    lookback: int
    hidden_size: int = 16
    encoder_layers: int = 1
    head_hidden: list[int] = field(default_factory=list)
    logit_hidden: int = 8
    dist: DistKind = DistKind.NORMAL
    sigma2_min: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if len(self.input_dims) != self.n_sources:
            raise ValueError(f"input_dims has {len(self.input_dims)} entries for {self.n_sources} sources")
        if any(d < 1 for d in self.input_dims):
            raise ValueError("all input dims must be >= 1")
        if self.lookback < 1 or self.hidden_size < 1 or self.encoder_layers < 1:
            raise ValueError("lookback, hidden_size, encoder_layers must be >= 1")
        if isinstance(self.dist, str):
            self.dist = DistKind(self.dist)

    def to_dict(self) -> dict:
        return {
            "n_sources": self.n_sources,
            "input_dims": list(self.input_dims),
            "lookback": self.lookback,
            "hidden_size": self.hidden_size,
            "encoder_layers": self.encoder_layers,
            "head_hidden": list(self.head_hidden),
            "logit_hidden": self.logit_hidden,
            "dist": self.dist.value,
            "sigma2_min": self.sigma2_min,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "dist": DistKind(d["dist"])})


@dataclass
class ModelParams:
    """Trainable arrays: eta (encoders), omega (heads), theta (weight logits),
    one dict per source each."""

    eta: list[dict[str, np.ndarray]]
    omega: list[dict[str, np.ndarray]]
    theta: list[dict[str, np.ndarray]]

    def named(self):
        """Flat (name, array) pairs in a fixed deterministic order."""
        for group, dicts in (("eta", self.eta), ("omega", self.omega), ("theta", self.theta)):
            for s, d in enumerate(dicts):
                for key, arr in d.items():
                    yield f"{group}{s}.{key}", arr

    def get(self, name: str) -> np.ndarray:
        group_s, key = name.split(".", 1)
        group, s = group_s.rstrip("0123456789"), int(group_s.lstrip("etaomgh"))
        return getattr(self, group)[s][key]

    def set(self, name: str, value: np.ndarray):
        group_s, key = name.split(".", 1)
        group, s = group_s.rstrip("0123456789"), int(group_s.lstrip("etaomgh"))
        getattr(self, group)[s][key] = value

    def copy(self) -> "ModelParams":
        return ModelParams(
            eta=[{k: v.copy() for k, v in d.items()} for d in self.eta],
            omega=[{k: v.copy() for k, v in d.items()} for d in self.omega],
            theta=[{k: v.copy() for k, v in d.items()} for d in self.theta],
        )

    def names_for(self, group: str, source: int | None = None) -> list[str]:
        dicts = getattr(self, group)
        sources = range(len(dicts)) if source is None else [source]
        return [f"{group}{s}.{k}" for s in sources for k in dicts[s]]


@dataclass
class MixtureOutput:
    """Per-instance mixture state: weights, per-source laws, per-source reps."""

    weights: np.ndarray
    dist_params: list[DistParams]
    reps: list[np.ndarray]


@dataclass
class BatchOutput:
    """Column-stacked mixture state for N instances."""

    weights: np.ndarray  # (N, S)
    mu: np.ndarray  # (N, S)
    sigma2: np.ndarray  # (N, S)
    reps: list[np.ndarray]  # per source (N, H)

    def __len__(self) -> int:
        return self.weights.shape[0]

    def item(self, i: int) -> MixtureOutput:
        s = self.weights.shape[1]
        return MixtureOutput(
            weights=self.weights[i].copy(),
            dist_params=[DistParams(float(self.mu[i, k]), float(self.sigma2[i, k])) for k in range(s)],
            reps=[r[i].copy() for r in self.reps],
        )


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-a, a, size=shape)


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(config.seed)
    h = config.hidden_size
    eta, omega, theta = [], [], []
    for s in range(config.n_sources):
        enc = {}
        in_dim = config.input_dims[s]
        for layer in range(config.encoder_layers):
            d = in_dim if layer == 0 else h
            fan = d + h
            enc[f"l{layer}.wx"] = _uniform(rng, (d, 4 * h), fan)
            enc[f"l{layer}.wh"] = _uniform(rng, (h, 4 * h), fan)
            enc[f"l{layer}.b"] = _uniform(rng, (4 * h,), fan)
        eta.append(enc)

        hd = {}
        prev = h
        for j, width in enumerate(config.head_hidden):
            hd[f"l{j}.w"] = _uniform(rng, (prev, width), prev)
            hd[f"l{j}.b"] = _uniform(rng, (width,), prev)
            prev = width
        hd["out.w"] = _uniform(rng, (prev, 2), prev)
        hd["out.b"] = _uniform(rng, (2,), prev)
        omega.append(hd)

        lg = {
            "l0.w": _uniform(rng, (h, config.logit_hidden), h),
            "l0.b": _uniform(rng, (config.logit_hidden,), h),
            "out.w": _uniform(rng, (config.logit_hidden, 1), config.logit_hidden),
            "out.b": _uniform(rng, (1,), config.logit_hidden),
        }
        theta.append(lg)
    return ModelParams(eta=eta, omega=omega, theta=theta)


def params_to_leaves(tape: gc.Tape, params: ModelParams) -> ModelParams:
    """Mirror of params with tape leaves in place of arrays."""
    return ModelParams(
        eta=[{k: tape.leaf(v) for k, v in d.items()} for d in params.eta],
        omega=[{k: tape.leaf(v) for k, v in d.items()} for d in params.omega],
        theta=[{k: tape.leaf(v) for k, v in d.items()} for d in params.theta],
    )


@dataclass
class GraphOutput:
    """Graph-side mixture state; tensors live on the builder's tape."""

    log_weights: gc.Tensor  # (B, S)
    mu: gc.Tensor  # (B, S)
    sigma2: gc.Tensor  # (B, S)
    reps: list[gc.Tensor]  # per source (B, H)


def _lstm_stack(tape: gc.Tape, window: np.ndarray, enc: dict, hidden: int, layers: int) -> gc.Tensor:
    b, length, _ = window.shape
    h4 = 4 * hidden
    seq = [tape.const(window[:, t, :]) for t in range(length)]
    for layer in range(layers):
        wx, wh, bias = enc[f"l{layer}.wx"], enc[f"l{layer}.wh"], enc[f"l{layer}.b"]
        h = tape.const(np.zeros((b, hidden)))
        c = tape.const(np.zeros((b, hidden)))
        outs = []
        for x in seq:
            z = gc.matmul(x, wx) + gc.matmul(h, wh) + bias
            gi = gc.sigmoid(gc.slice_(z, 0, hidden, axis=1))
            gf = gc.sigmoid(gc.slice_(z, hidden, 2 * hidden, axis=1))
            gg = gc.tanh(gc.slice_(z, 2 * hidden, 3 * hidden, axis=1))
            go = gc.sigmoid(gc.slice_(z, 3 * hidden, h4, axis=1))
            c = gf * c + gi * gg
            h = go * gc.tanh(c)
            outs.append(h)
        seq = outs
    return seq[-1]


def _dense_head(rep: gc.Tensor, head: dict, sigma2_min: float) -> tuple[gc.Tensor, gc.Tensor]:
    x = rep
    j = 0
    while f"l{j}.w" in head:
        x = gc.tanh(gc.matmul(x, head[f"l{j}.w"]) + head[f"l{j}.b"])
        j += 1
    out = gc.matmul(x, head["out.w"]) + head["out.b"]
    mu = gc.slice_(out, 0, 1, axis=1)
    sigma2 = gc.softplus(gc.slice_(out, 1, 2, axis=1)) + sigma2_min
    return mu, sigma2


def _logit_net(rep: gc.Tensor, lg: dict) -> gc.Tensor:
    hidden = gc.tanh(gc.matmul(rep, lg["l0.w"]) + lg["l0.b"])
    return gc.matmul(hidden, lg["out.w"]) + lg["out.b"]


def build_graph(tape: gc.Tape, leaves: ModelParams, windows: list[np.ndarray], config: ModelConfig) -> GraphOutput:
    """Run the full mixture forward on a batch of window arrays (B, L, d_s)."""
    if len(windows) != config.n_sources:
        raise ValueError(f"expected {config.n_sources} source windows, got {len(windows)}")
    reps, mus, sig2s, logits = [], [], [], []
    for s, window in enumerate(windows):
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 3 or window.shape[1] != config.lookback or window.shape[2] != config.input_dims[s]:
            raise ValueError(
                f"source {s}: window shape {window.shape} incompatible with "
                f"(B, {config.lookback}, {config.input_dims[s]})"
            )
        rep = _lstm_stack(tape, window, leaves.eta[s], config.hidden_size, config.encoder_layers)
        mu, sigma2 = _dense_head(rep, leaves.omega[s], config.sigma2_min)
        reps.append(rep)
        mus.append(mu)
        sig2s.append(sigma2)
        logits.append(_logit_net(rep, leaves.theta[s]))
    logit_mat = gc.concat(logits, axis=1)  # (B, S)
    log_weights = logit_mat - gc.log_sum_exp(logit_mat, axis=1, keepdims=True)
    return GraphOutput(
        log_weights=log_weights,
        mu=gc.concat(mus, axis=1),
        sigma2=gc.concat(sig2s, axis=1),
        reps=reps,
    )


def _lstm_stack_arrays(window: np.ndarray, enc: dict, hidden: int, layers: int) -> np.ndarray:
    b, length, _ = window.shape
    seq = [window[:, t, :] for t in range(length)]
    for layer in range(layers):
        wx, wh, bias = enc[f"l{layer}.wx"], enc[f"l{layer}.wh"], enc[f"l{layer}.b"]
        h = np.zeros((b, hidden))
        c = np.zeros((b, hidden))
        outs = []
        for x in seq:
            z = (x @ wx + h @ wh) + bias
            gi = gc._sigmoid(z[:, 0:hidden])
            gf = gc._sigmoid(z[:, hidden : 2 * hidden])
            gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
            go = gc._sigmoid(z[:, 3 * hidden : 4 * hidden])
            c = gf * c + gi * gg
            h = go * np.tanh(c)
            outs.append(h)
        seq = outs
    return seq[-1]


def _dense_head_arrays(rep: np.ndarray, head: dict, sigma2_min: float) -> tuple[np.ndarray, np.ndarray]:
    x = rep
    j = 0
    while f"l{j}.w" in head:
        x = np.tanh(x @ head[f"l{j}.w"] + head[f"l{j}.b"])
        j += 1
    out = x @ head["out.w"] + head["out.b"]
    return out[:, 0:1], np.logaddexp(0.0, out[:, 1:2]) + sigma2_min


def _logit_net_arrays(rep: np.ndarray, lg: dict) -> np.ndarray:
    hidden = np.tanh(rep @ lg["l0.w"] + lg["l0.b"])
    return hidden @ lg["out.w"] + lg["out.b"]


def forward_batch(windows: list[np.ndarray], params: ModelParams, config: ModelConfig) -> BatchOutput:
    """Numeric batched forward; pure function of (windows, params).

    Runs the same arithmetic as the taped graph (bit-identical results)
    without recording anything, so gradient-free evaluation stays cheap.
    """
    if len(windows) != config.n_sources:
        raise ValueError(f"expected {config.n_sources} source windows, got {len(windows)}")
    reps, mus, sig2s, logits = [], [], [], []
    for s, window in enumerate(windows):
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 3 or window.shape[1] != config.lookback or window.shape[2] != config.input_dims[s]:
            raise ValueError(
                f"source {s}: window shape {window.shape} incompatible with "
                f"(B, {config.lookback}, {config.input_dims[s]})"
            )
        rep = _lstm_stack_arrays(window, params.eta[s], config.hidden_size, config.encoder_layers)
        mu, sigma2 = _dense_head_arrays(rep, params.omega[s], config.sigma2_min)
        reps.append(rep)
        mus.append(mu)
        sig2s.append(sigma2)
        logits.append(_logit_net_arrays(rep, params.theta[s]))
    logit_mat = np.concatenate(logits, axis=1)
    m = logit_mat.max(axis=1, keepdims=True)
    log_weights = logit_mat - (m + np.log(np.exp(logit_mat - m).sum(axis=1, keepdims=True)))
    return BatchOutput(
        weights=np.exp(log_weights),
        mu=np.concatenate(mus, axis=1),
        sigma2=np.concatenate(sig2s, axis=1),
        reps=reps,
    )


def forward(instance, params: ModelParams, config: ModelConfig) -> MixtureOutput:
    """Single-instance forward. `instance` provides per-source (L, d_s) windows."""
    windows = [w[np.newaxis, :, :] for w in instance.windows]
    return forward_batch(windows, params, config).item(0)


def encode(source_window: np.ndarray, eta_s: dict) -> np.ndarray:
    """Last hidden state of the source's LSTM stack for one (L, d_s) window."""
    window = np.asarray(source_window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"expected (L, d) window, got shape {window.shape}")
    d_in, h4 = eta_s["l0.wx"].shape
    if window.shape[1] != d_in:
        raise ValueError(f"window feature dim {window.shape[1]} != encoder input dim {d_in}")
    layers = sum(1 for k in eta_s if k.endswith(".wx"))
    return _lstm_stack_arrays(window[np.newaxis], eta_s, h4 // 4, layers)[0].copy()


def head(rep: np.ndarray, omega_s: dict, sigma2_min: float = 1e-8) -> DistParams:
    """Map a representation vector to (mu, sigma2) with a softplus variance floor."""
    mu, sigma2 = _dense_head_arrays(np.asarray(rep, dtype=np.float64)[np.newaxis, :], omega_s, sigma2_min)
    return DistParams(float(mu[0, 0]), float(sigma2[0, 0]))


def mixture_weights(reps: list[np.ndarray], theta: list[dict]) -> np.ndarray:
    """Softmax over per-source logits; each logit sees only its own source's rep."""
    if len(reps) != len(theta):
        raise ValueError(f"{len(reps)} reps for {len(theta)} logit nets")
    logits = [
        _logit_net_arrays(np.asarray(rep, dtype=np.float64)[np.newaxis, :], lg)
        for rep, lg in zip(reps, theta)
    ]
    mat = np.concatenate(logits, axis=1)
    m = mat.max(axis=1, keepdims=True)
    lw = mat - (m + np.log(np.exp(mat - m).sum(axis=1, keepdims=True)))
    return np.exp(lw[0])


def save_checkpoint(path, config: ModelConfig, params: ModelParams, extra: dict | None = None):
    """Versioned JSON checkpoint; floats serialize via repr, so round trips are exact."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()} for name, arr in params.named()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(blob, indent=1))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
    config = ModelConfig.from_dict(blob["config"])
    params = init_params(config)
    for name, _ in params.named():
        entry = blob["params"][name]
        params.set(name, np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"]))
    return config, params, blob.get("extra", {})
