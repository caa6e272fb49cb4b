"""Small dense networks in numpy: forward pass, exact gradients, Adam.

Parameters live in one flat float64 vector.  Layer ``l`` owns a weight
matrix of shape ``(n_out, n_in)`` stored row-major, followed by its bias.
A ``gaussian`` head doubles the width of the final layer: the first half
are means, the second half raw scales ``rho`` mapped to
``sigma = softplus(rho) + 1e-6``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
ACTIVATIONS = ("tanh", "relu")
HEADS = ("point", "gaussian")
LOSSES = ("nll", "l2")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    output_head: str = "point"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if min((self.input_dim, self.output_dim) + self.hidden_layers) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}")

    @property
    def widths(self) -> List[int]:
        head = 2 * self.output_dim if self.output_head == "gaussian" else self.output_dim
        return [self.input_dim, *self.hidden_layers, head]

    def layout(self) -> List[Tuple[slice, slice, Tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) per layer, in order."""
        out = []
        pos = 0
        w = self.widths
        for n_in, n_out in zip(w[:-1], w[1:]):
            ws = slice(pos, pos + n_in * n_out)
            pos += n_in * n_out
            bs = slice(pos, pos + n_out)
            pos += n_out
            out.append((ws, bs, (n_out, n_in)))
        return out

    @property
    def n_params(self) -> int:
        return self.layout()[-1][1].stop

    def last_layer_slice(self) -> slice:
        ws, bs, _ = self.layout()[-1]
        return slice(ws.start, bs.stop)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "output_head": self.output_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=d["input_dim"],
            output_dim=d["output_dim"],
            hidden_layers=tuple(d["hidden_layers"]),
            activation=d["activation"],
            output_head=d["output_head"],
        )


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform (tanh) or He-normal (relu) weights, zero biases."""
    theta = np.zeros(spec.n_params)
    for ws, _, (n_out, n_in) in spec.layout():
        if spec.activation == "relu":
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        else:
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in))
        theta[ws] = w.ravel()
    return theta


def unpack(spec: NetworkSpec, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    if len(theta) != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {len(theta)}")
    return [(theta[ws].reshape(shape), theta[bs]) for ws, bs, shape in spec.layout()]


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(spec: NetworkSpec, z):
    return np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)


def _as_batch(spec: NetworkSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {spec.input_dim}")
    return x, single


def _forward_all(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray):
    """Activations of every layer; the last entry is the raw final-layer output."""
    acts = [x]
    layers = unpack(spec, theta)
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(z if i == len(layers) - 1 else _activate(spec, z))
    return acts


def _split_head(spec: NetworkSpec, out: np.ndarray):
    k = spec.output_dim
    return out[:, :k], softplus(out[:, k:]) + SIGMA_FLOOR


def forward(spec: NetworkSpec, theta: np.ndarray, x):
    """Network output for one feature vector or a batch (rows).

    Point heads return ``y_hat``; gaussian heads return ``(mu, sigma)``.
    """
    x, single = _as_batch(spec, x)
    out = _forward_all(spec, theta, x)[-1]
    if spec.output_head == "gaussian":
        mu, sigma = _split_head(spec, out)
        return (mu[0], sigma[0]) if single else (mu, sigma)
    return out[0] if single else out


def hidden_features(spec: NetworkSpec, theta: np.ndarray, x) -> np.ndarray:
    """Input to the final linear layer (the raw input when there are no hidden layers)."""
    x, _ = _as_batch(spec, x)
    return _forward_all(spec, theta, x)[-2]


def gaussian_nll(mu, sigma, y):
    """sum_m log(sigma_m) + (y_m - mu_m)^2 / (2 sigma_m^2), summed over the last axis."""
    mu, sigma, y = (np.asarray(a, dtype=float) for a in (mu, sigma, y))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return np.sum(np.log(sigma) + (y - mu) ** 2 / (2.0 * sigma**2), axis=-1)


def l2_loss(y_hat, y):
    """Half the squared error, summed over the last axis (unit-noise Gaussian NLL)."""
    r = np.asarray(y_hat, dtype=float) - np.asarray(y, dtype=float)
    return 0.5 * np.sum(r * r, axis=-1)


def _check_loss(spec: NetworkSpec, loss: str):
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if (loss == "nll") != (spec.output_head == "gaussian"):
        raise ValueError(f"loss {loss!r} does not match a {spec.output_head} head")


def loss_and_grad(
    spec: NetworkSpec,
    theta: np.ndarray,
    x,
    y,
    loss: str = "l2",
    weight_decay: float = 0.0,
    data_term: bool = True,
) -> Tuple[float, np.ndarray]:
    """Mean batch loss plus ``weight_decay * |theta|^2``, and its exact gradient."""
    _check_loss(spec, loss)
    x, _ = _as_batch(spec, x)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    if y.shape != (len(x), spec.output_dim):
        raise ValueError(f"targets must have shape {(len(x), spec.output_dim)}")
    n = len(x)
    value = weight_decay * float(theta @ theta)
    g = 2.0 * weight_decay * theta
    if not data_term:
        return value, g

    acts = _forward_all(spec, theta, x)
    out = acts[-1]
    if loss == "l2":
        r = out - y
        value += 0.5 * float(np.sum(r * r)) / n
        delta = r / n
    else:
        k = spec.output_dim
        mu, rho = out[:, :k], out[:, k:]
        sigma = softplus(rho) + SIGMA_FLOOR
        r = mu - y
        value += float(np.sum(np.log(sigma) + r * r / (2.0 * sigma**2))) / n
        d_mu = r / sigma**2
        d_sigma = 1.0 / sigma - r * r / sigma**3
        delta = np.concatenate([d_mu, d_sigma * _sigmoid(rho)], axis=1) / n

    layers = unpack(spec, theta)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_in = acts[i]
        grads.append((delta.T @ a_in, delta.sum(axis=0)))
        if i > 0:
            da = delta @ w
            if spec.activation == "tanh":
                delta = da * (1.0 - a_in * a_in)
            else:
                delta = da * (a_in > 0.0)
    for (ws, bs, _), (gw, gb) in zip(spec.layout(), reversed(grads)):
        g[ws] += gw.ravel()
        g[bs] += gb
    return value, g


def grad(spec: NetworkSpec, theta, x, y, loss: str = "l2", weight_decay: float = 0.0, data_term: bool = True):
    return loss_and_grad(spec, theta, x, y, loss, weight_decay, data_term)[1]


def train(
    spec: NetworkSpec,
    x,
    y,
    cfg: TrainConfig,
    loss: str = "l2",
    init: np.ndarray = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Adam over shuffled mini-batches; returns ``(theta, per-epoch mean loss)``."""
    _check_loss(spec, loss)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(spec, rng) if init is None else np.array(init, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = cfg.beta1, cfg.beta2
    step = 0
    trace = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                value, g = loss_and_grad(spec, theta, x[idx], y[idx], loss, cfg.weight_decay)
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite loss ({value}) at epoch {epoch}, batch {n_batches}; "
                    f"try a smaller learning rate or check input scaling"
                )
            step += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            total += value
            n_batches += 1
        trace[epoch] = total / n_batches
    return theta, trace


def last_layer_ggn_diag(spec: NetworkSpec, theta: np.ndarray, x) -> np.ndarray:
    """Diagonal of J^T J over the final layer's parameters, summed over ``x``.

    Ordered like the parameter vector: weights row-major, then biases.
    """
    if spec.output_head != "point":
        raise ValueError("last-layer GGN is defined for point-head networks")
    h = hidden_features(spec, theta, x)
    w_diag = np.tile(np.sum(h * h, axis=0), (spec.output_dim, 1))
    b_diag = np.full(spec.output_dim, float(len(h)))
    return np.concatenate([w_diag.ravel(), b_diag])
