"""Generative models from a flight's context vector to its ground track.

Every model consumes the raw (unstandardised) context vector produced by
:func:`sectorflow.data.encode_context`: ``[lat0, lon0, entry_fl,
wp1_lat, wp1_lon, ..., wpW_lat, wpW_lon]``.  The first two entries anchor
every generated track; the last two are always the final filed waypoint.

Three kinds are provided:

* ``linear``: straight line to the final waypoint with isotropic jitter.
* ``deep_ensemble``: gaussian-head networks trained on NLL, pooled into one
  independent normal per control-point coordinate.
* ``bnn_laplace``: a point-head MAP network whose final linear layer gets a
  diagonal Laplace posterior; samples share one weight draw across outputs.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, Sequence

import numpy as np

from . import nn
from .data import Standardizer
from .trackfit import PiecewiseTrack, DegenerateTrackError

log = logging.getLogger(__name__)

DEFAULT_JITTER_DEG = 0.05
DEFAULT_SAMPLES = 10
DEFAULT_ENSEMBLE_SIZE = 5
DEFAULT_PRIOR_PRECISION = 1.0

KINDS = ("linear", "deep_ensemble", "bnn_laplace")


def finalize_track(entry_point, y) -> PiecewiseTrack:
    """Prepend the entry point to the flattened control points ``y`` (lat, lon pairs)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) % 2:
        raise ValueError("target vector must hold (lat, lon) pairs")
    pts = np.vstack([np.asarray(entry_point, dtype=float).reshape(1, 2), y.reshape(-1, 2)])
    if np.all(pts == pts[0]):
        raise DegenerateTrackError("generated control points all coincide with the entry point")
    return PiecewiseTrack.from_control_points(pts)


def _entry(xi) -> np.ndarray:
    return np.asarray(xi, dtype=float)[:2]


def linear_sample(xi, n: int, sigma_jitter: float = DEFAULT_JITTER_DEG, seed=None) -> List[PiecewiseTrack]:
    """Straight tracks from the entry point to the jittered final waypoint."""
    xi = np.asarray(xi, dtype=float)
    if len(xi) < 5:
        raise ValueError("context carries no flight-plan waypoints")
    rng = np.random.default_rng(seed)
    exits = xi[-2:] + rng.normal(0.0, sigma_jitter, size=(n, 2))
    return [finalize_track(xi[:2], e) for e in exits]


# ---------------------------------------------------------------- ensembles


@dataclass
class EnsemblePrediction:
    mean: np.ndarray
    var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def combine_members(mus, sigmas) -> EnsemblePrediction:
    """Pool member means/stds (axis 0 = member) into one normal per output."""
    mus = np.asarray(mus, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    mean = mus.mean(axis=0)
    spread = ((mus - mean) ** 2).mean(axis=0)
    within = (sigmas**2).mean(axis=0)
    return EnsemblePrediction(mean, spread + within)


def member_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def de_train(x, y, n_e: int, spec: nn.NetworkSpec, cfg: nn.TrainConfig) -> List[np.ndarray]:
    """Train ``n_e`` gaussian-head members on the same (standardised) data."""
    if n_e < 2:
        raise ValueError("an ensemble needs at least two members")
    if spec.output_head != "gaussian":
        raise ValueError("ensemble members need a gaussian head")
    members = []
    for o in range(n_e):
        member_cfg = nn.TrainConfig(**{**cfg.__dict__, "seed": member_seed(cfg.seed, o)})
        try:
            theta, trace = nn.train(spec, x, y, member_cfg, loss="nll")
        except nn.TrainingError as exc:
            raise nn.TrainingError(f"ensemble member {o}: {exc}") from exc
        log.info("ensemble member %d final loss %.4f", o, trace[-1] if len(trace) else float("nan"))
        members.append(theta)
    return members


def de_predict_std(spec: nn.NetworkSpec, members: Sequence[np.ndarray], x_std) -> EnsemblePrediction:
    outs = [nn.forward(spec, theta, x_std) for theta in members]
    return combine_members([o[0] for o in outs], [o[1] for o in outs])


# ----------------------------------------------------------------- laplace


@dataclass
class LaplacePosterior:
    spec: nn.NetworkSpec
    theta_map: np.ndarray
    last_layer_var: np.ndarray
    prior_precision: float

    def __post_init__(self):
        n_last = self.spec.last_layer_slice()
        if len(self.last_layer_var) != n_last.stop - n_last.start:
            raise ValueError("posterior variances do not match the final layer")
        if np.any(self.last_layer_var <= 0):
            raise ValueError("posterior variances must be positive")

    @property
    def last_layer_mean(self) -> np.ndarray:
        return self.theta_map[self.spec.last_layer_slice()]


def laplace_posterior(spec: nn.NetworkSpec, theta_map, x, prior_precision: float) -> LaplacePosterior:
    ggn = nn.last_layer_ggn_diag(spec, theta_map, x)
    return LaplacePosterior(spec, np.asarray(theta_map), 1.0 / (ggn + prior_precision), prior_precision)


def bnn_fit(x, y, spec: nn.NetworkSpec, cfg: nn.TrainConfig, prior_precision: float = DEFAULT_PRIOR_PRECISION) -> LaplacePosterior:
    """MAP network on squared error, then a diagonal Laplace step on its final layer."""
    if spec.output_head != "point":
        raise ValueError("the Laplace model uses a point-head network")
    if not prior_precision > 0:
        raise ValueError("prior_precision must be positive")
    theta, _ = nn.train(spec, x, y, cfg, loss="l2")
    return laplace_posterior(spec, theta, x, prior_precision)


def bnn_sample(posterior: LaplacePosterior, x_std, n: int, rng: np.random.Generator) -> np.ndarray:
    """Outputs under ``n`` joint draws of the final layer; returns shape (n, output_dim)."""
    spec = posterior.spec
    h = nn.hidden_features(spec, posterior.theta_map, x_std)[0]
    k = spec.output_dim
    draws = posterior.last_layer_mean + np.sqrt(posterior.last_layer_var) * rng.standard_normal(
        (n, len(posterior.last_layer_var))
    )
    w = draws[:, : k * len(h)].reshape(n, k, len(h))
    b = draws[:, k * len(h) :]
    return np.einsum("nki,i->nk", w, h) + b


def bnn_output_cov(posterior: LaplacePosterior, x_std) -> np.ndarray:
    """Analytic output covariance J diag(var) J^T of the final-layer posterior."""
    spec = posterior.spec
    h = nn.hidden_features(spec, posterior.theta_map, x_std)[0]
    k = spec.output_dim
    jac = np.zeros((k, len(posterior.last_layer_var)))
    for m in range(k):
        jac[m, m * len(h) : (m + 1) * len(h)] = h
        jac[m, k * len(h) + m] = 1.0
    return (jac * posterior.last_layer_var) @ jac.T


# ------------------------------------------------------------ model objects


class GenerativeModel:
    kind: str = ""
    degree: int = 0

    def sample_targets(self, xi, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample(self, xi, n: int = DEFAULT_SAMPLES, seed=None) -> List[PiecewiseTrack]:
        """``n`` ground tracks for context ``xi``, each anchored at its entry point."""
        rng = np.random.default_rng(seed)
        ys = self.sample_targets(xi, n, rng)
        return [finalize_track(_entry(xi), y) for y in ys]


class LinearModel(GenerativeModel):
    kind = "linear"

    def __init__(self, degree: int = 3, sigma_jitter: float = DEFAULT_JITTER_DEG):
        self.degree = degree
        self.sigma_jitter = sigma_jitter

    def sample_targets(self, xi, n, rng):
        xi = np.asarray(xi, dtype=float)
        if len(xi) < 5:
            raise ValueError("context carries no flight-plan waypoints")
        return xi[-2:] + rng.normal(0.0, self.sigma_jitter, size=(n, 2))


class DeepEnsembleModel(GenerativeModel):
    kind = "deep_ensemble"

    def __init__(self, spec, members, x_scaler: Standardizer, y_scaler: Standardizer):
        self.spec = spec
        self.members = [np.asarray(m, dtype=float) for m in members]
        self.x_scaler = x_scaler
        self.y_scaler = y_scaler
        self.degree = spec.output_dim // 2

    @classmethod
    def train(cls, x, y, spec, cfg, n_e: int = DEFAULT_ENSEMBLE_SIZE):
        xs, ys = Standardizer.fit(x), Standardizer.fit(y)
        members = de_train(xs.transform(x), ys.transform(y), n_e, spec, cfg)
        return cls(spec, members, xs, ys)

    def predict(self, xi) -> EnsemblePrediction:
        """Pooled mean and std in degrees."""
        p = de_predict_std(self.spec, self.members, self.x_scaler.transform(np.asarray(xi, dtype=float)))
        return EnsemblePrediction(self.y_scaler.inverse(p.mean), p.var * self.y_scaler.scale**2)

    def sample_targets(self, xi, n, rng):
        p = self.predict(xi)
        return p.mean + p.std * rng.standard_normal((n, len(p.mean)))


class LaplaceModel(GenerativeModel):
    kind = "bnn_laplace"

    def __init__(self, posterior: LaplacePosterior, x_scaler: Standardizer, y_scaler: Standardizer):
        self.posterior = posterior
        self.spec = posterior.spec
        self.x_scaler = x_scaler
        self.y_scaler = y_scaler
        self.degree = self.spec.output_dim // 2

    @classmethod
    def train(cls, x, y, spec, cfg, prior_precision: float = DEFAULT_PRIOR_PRECISION):
        xs, ys = Standardizer.fit(x), Standardizer.fit(y)
        post = bnn_fit(xs.transform(x), ys.transform(y), spec, cfg, prior_precision)
        return cls(post, xs, ys)

    def map_prediction(self, xi) -> np.ndarray:
        xs = self.x_scaler.transform(np.asarray(xi, dtype=float))
        return self.y_scaler.inverse(nn.forward(self.spec, self.posterior.theta_map, xs))

    def sample_targets(self, xi, n, rng):
        xs = self.x_scaler.transform(np.asarray(xi, dtype=float))
        return self.y_scaler.inverse(bnn_sample(self.posterior, xs, n, rng))


# ---------------------------------------------------------------- container
#
# Model file layout (all integers little-endian):
#   8 bytes   magic b"SFMODEL\n"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header, sorted keys, separators (",", ":")
#   payload   float64 little-endian arrays, concatenated in header["arrays"] order
#
# The header holds "kind", "degree", "spec" (or null), "scalars" and
# "arrays" (a list of {"name", "shape"}).

MAGIC = b"SFMODEL\n"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _model_payload(model: GenerativeModel):
    scalars = {}
    arrays = []
    spec = None
    if isinstance(model, LinearModel):
        scalars["sigma_jitter"] = float(model.sigma_jitter)
    else:
        spec = model.spec.to_dict()
        arrays += [
            ("x_mean", model.x_scaler.mean),
            ("x_scale", model.x_scaler.scale),
            ("y_mean", model.y_scaler.mean),
            ("y_scale", model.y_scaler.scale),
        ]
        if isinstance(model, DeepEnsembleModel):
            arrays += [(f"member_{i}", m) for i, m in enumerate(model.members)]
        elif isinstance(model, LaplaceModel):
            scalars["prior_precision"] = float(model.posterior.prior_precision)
            arrays += [
                ("theta_map", model.posterior.theta_map),
                ("last_layer_var", model.posterior.last_layer_var),
            ]
        else:
            raise TypeError(f"cannot serialise {type(model).__name__}")
    return spec, scalars, arrays


def write_model(model: GenerativeModel, fh: BinaryIO):
    spec, scalars, arrays = _model_payload(model)
    header = {
        "kind": model.kind,
        "degree": int(model.degree),
        "spec": spec,
        "scalars": scalars,
        "arrays": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
    fh.write(raw)
    for _, a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_model(fh: BinaryIO) -> GenerativeModel:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, hlen = struct.unpack("<IQ", fh.read(12))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    header = json.loads(fh.read(hlen).decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise ModelFormatError(f"truncated payload in array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(float).reshape(entry["shape"])
    kind = header["kind"]
    scalars = header["scalars"]
    if kind == "linear":
        return LinearModel(header["degree"], scalars["sigma_jitter"])
    spec = nn.NetworkSpec.from_dict(header["spec"])
    xs = Standardizer(arrays["x_mean"], arrays["x_scale"])
    ys = Standardizer(arrays["y_mean"], arrays["y_scale"])
    if kind == "deep_ensemble":
        names = sorted((k for k in arrays if k.startswith("member_")), key=lambda k: int(k.split("_")[1]))
        return DeepEnsembleModel(spec, [arrays[k] for k in names], xs, ys)
    if kind == "bnn_laplace":
        post = LaplacePosterior(spec, arrays["theta_map"], arrays["last_layer_var"], scalars["prior_precision"])
        return LaplaceModel(post, xs, ys)
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save_model(model: GenerativeModel, path):
    with open(path, "wb") as fh:
        write_model(model, fh)


def load_model(path) -> GenerativeModel:
    with open(path, "rb") as fh:
        return read_model(fh)
