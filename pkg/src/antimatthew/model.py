"""Logistic classifier h_theta with analytic loss and soft-bias gradients.

The classifier sees the general features followed by indicator columns for
protected values ``1..M-1``. Parameters flatten layer by layer, each layer's
weight matrix in row-major order followed by its bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ClientDataset

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7
METRICS = ("TPSD", "APSD")


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    arch: str = "linear"
    n_groups: int = 2
    use_protected: bool = True

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden(self) -> int:
        return self.layers[0][0].shape[0] if len(self.layers) == 2 else 0

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ModelError(f"expected {self.size} parameters, got {theta.shape}")
        layers, pos = [], 0
        for W, b in self.layers:
            Wn = theta[pos:pos + W.size].reshape(W.shape)
            pos += W.size
            bn = theta[pos:pos + b.size].copy()
            pos += b.size
            layers.append((Wn.copy(), bn))
        return ModelParams(layers, self.arch, self.n_groups, self.use_protected)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat())


def input_dim(feature_dim: int, n_groups: int, use_protected: bool = True) -> int:
    return feature_dim + (max(n_groups - 1, 0) if use_protected else 0)


def init_params(feature_dim: int, n_groups: int = 2, hidden: int = 0, seed: int = 0,
                scale: float = 0.01, use_protected: bool = True) -> ModelParams:
    """Uniform(-scale, scale) initialisation; ``hidden > 0`` adds one tanh layer."""
    rng = np.random.default_rng(seed)
    d = input_dim(feature_dim, n_groups, use_protected)
    shapes = [(hidden, d), (1, hidden)] if hidden else [(1, d)]
    layers = [(rng.uniform(-scale, scale, size=s), rng.uniform(-scale, scale, size=s[0]))
              for s in shapes]
    arch = f"one-hidden({hidden})" if hidden else "linear"
    return ModelParams(layers, arch, n_groups, use_protected)


def design(params: ModelParams, ds: ClientDataset) -> np.ndarray:
    extra = max(params.n_groups - 1, 0) if params.use_protected else 0
    if ds.feature_dim + extra != params.in_dim:
        raise ModelError(f"dataset has {ds.feature_dim} features (+{extra} group columns), "
                         f"model expects {params.in_dim}")
    if not extra:
        return ds.x
    onehot = (ds.a[:, None] == np.arange(1, params.n_groups)[None, :]).astype(float)
    return np.hstack([ds.x, onehot])


def _forward(params: ModelParams, Z: np.ndarray):
    """Return logits and the hidden activations (None for the linear model)."""
    if len(params.layers) == 1:
        W, b = params.layers[0]
        return Z @ W[0] + b[0], None
    (W1, b1), (W2, b2) = params.layers
    H = np.tanh(Z @ W1.T + b1)
    return H @ W2[0] + b2[0], H


def _logit_jacobian(params: ModelParams, Z: np.ndarray, H) -> np.ndarray:
    """Per-sample gradient of the logit w.r.t. the flat parameters (n x |theta|)."""
    n = Z.shape[0]
    if H is None:
        return np.hstack([Z, np.ones((n, 1))])
    (W1, _), (W2, _) = params.layers
    dH = (1.0 - H ** 2) * W2[0][None, :]          # n x h
    dW1 = (dH[:, :, None] * Z[:, None, :]).reshape(n, -1)
    return np.hstack([dW1, dH, H, np.ones((n, 1))])


@dataclass
class PredictionBatch:
    probabilities: np.ndarray
    labels: np.ndarray


def predict(params: ModelParams, ds: ClientDataset) -> PredictionBatch:
    z, _ = _forward(params, design(params, ds))
    p = np.clip(expit(z), P_MIN, P_MAX)
    return PredictionBatch(p, (p >= 0.5).astype(int))


def bce_from_probs(p: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def bce_loss(params: ModelParams, ds: ClientDataset) -> float:
    return bce_from_probs(predict(params, ds).probabilities, ds.y)


def loss_gradient(params: ModelParams, ds: ClientDataset) -> np.ndarray:
    """Gradient of the mean binary cross entropy (d loss / d logit = p - y)."""
    Z = design(params, ds)
    z, H = _forward(params, Z)
    r = expit(z) - ds.y
    return _logit_jacobian(params, Z, H).T @ r / len(ds)


def _group_masks(ds: ClientDataset, n_groups: int, metric: str):
    if metric not in METRICS:
        raise ModelError(f"unknown bias metric {metric!r}")
    masks = []
    for g in range(max(n_groups, 1)):
        m = ds.a == g
        if metric == "TPSD":
            m = m & (ds.y == 1)
        if m.any():
            masks.append(m)
    return masks


def _soft_rates(p: np.ndarray, ds: ClientDataset, masks, metric: str):
    # per-sample soft "hit" and its derivative w.r.t. p
    if metric == "TPSD":
        hit, dhit = p, np.ones_like(p)
    else:
        hit = ds.y * p + (1 - ds.y) * (1 - p)
        dhit = 2.0 * ds.y - 1.0
    rates = np.array([hit[m].mean() for m in masks])
    return rates, dhit


def std_of_rates(rates: np.ndarray) -> float:
    if len(rates) < 2:
        return 0.0
    return float(np.sqrt(np.mean((rates - rates.mean()) ** 2)))


def soft_bias(params: ModelParams, ds: ClientDataset, metric: str = "TPSD") -> float:
    """Population std across groups of the soft (mean-probability) group rates.

    Returns 0 when fewer than two groups are eligible.
    """
    masks = _group_masks(ds, params.n_groups, metric)
    if len(masks) < 2:
        return 0.0
    p = predict(params, ds).probabilities
    rates, _ = _soft_rates(p, ds, masks, metric)
    return std_of_rates(rates)


def soft_bias_gradient(params: ModelParams, ds: ClientDataset, metric: str = "TPSD") -> np.ndarray:
    masks = _group_masks(ds, params.n_groups, metric)
    if len(masks) < 2:
        return np.zeros(params.size)
    Z = design(params, ds)
    z, H = _forward(params, Z)
    s = expit(z)
    p = np.clip(s, P_MIN, P_MAX)
    rates, dhit = _soft_rates(p, ds, masks, metric)
    f = std_of_rates(rates)
    if f <= 1e-15:
        return np.zeros(params.size)
    # d f / d rate_i = (rate_i - mean) / (M f); the mean term cancels
    coef = (rates - rates.mean()) / (len(rates) * f)
    w = np.zeros(len(ds))
    for c, m in zip(coef, masks):
        w[m] += c / m.sum()
    w *= dhit * s * (1.0 - s)
    return _logit_jacobian(params, Z, H).T @ w


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = f"# arch={params.arch} in_dim={params.in_dim} hidden={params.hidden} " \
             f"n_groups={params.n_groups} use_protected={int(params.use_protected)} " \
             f"size={params.size}\n"
    body = "\n".join(repr(float(v)) for v in params.flat())
    Path(path).write_text(header + body + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ModelError(f"{path}: missing checkpoint header")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
    in_dim, hidden, n_groups = int(meta["in_dim"]), int(meta["hidden"]), int(meta["n_groups"])
    use_a = meta.get("use_protected", "1") == "1"
    try:
        theta = np.array([float(v) for v in lines[1:] if v.strip()])
    except ValueError as exc:
        raise ModelError(f"{path}: {exc}") from None
    feature_dim = in_dim - (max(n_groups - 1, 0) if use_a else 0)
    template = init_params(feature_dim, n_groups, hidden, seed=0, use_protected=use_a)
    if theta.shape != (template.size,):
        raise ModelError(f"{path}: expected {template.size} values, found {theta.size}")
    return template.with_flat(theta)
