"""Shared GRU speaker model with per-speaker running output means.

Every speaker instance starts from a zero hidden state and immediately takes
one step on a zero input, so a predicted mean exists before the speaker has
been observed.  The predicted mean after ``j`` observations is the average of
the ``j + 1`` head outputs produced so far.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from uisrnn.errors import (
    CorruptCheckpointError,
    DimensionMismatchError,
    ShapeMismatchError,
    ValidationError,
    VersionMismatchError,
)

GRU_NAMES = ("W_u", "U_u", "b_u", "W_r", "U_r", "b_r", "W_c", "U_c", "b_c")
PARAM_NAMES = tuple(f"gru.{n}" for n in GRU_NAMES) + ("head.W", "head.b")
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int
    hidden_units: int = 200
    head_units: int = 200
    sigma2_init: float = 0.1
    per_dim_sigma2: bool = False

    def __post_init__(self):
        for name in ("embedding_dim", "hidden_units", "head_units"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        if not self.sigma2_init > 0:
            raise ValidationError("sigma2_init must be positive")

    def shapes(self) -> dict:
        D, H = self.embedding_dim, self.hidden_units
        out = {}
        for gate in "urc":
            out[f"gru.W_{gate}"] = (H, D)
            out[f"gru.U_{gate}"] = (H, H)
            out[f"gru.b_{gate}"] = (H,)
        out["head.W"] = (D, H)
        out["head.b"] = (D,)
        return out


@dataclass
class SpeakerModel:
    """GRU parameters, linear output head and observation variance.

    ``sigma2`` is a scalar unless the config asks for one variance per
    embedding dimension.  Training optimizes its logarithm.
    """

    config: ModelConfig
    params: dict
    sigma2: np.ndarray

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(self.params) != set(shapes):
            raise ShapeMismatchError(f"parameter names {sorted(self.params)} != {sorted(shapes)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} has non-finite entries")
            self.params[name] = arr
        self.sigma2 = np.array(self.sigma2, dtype=np.float64)
        expected = (self.config.embedding_dim,) if self.config.per_dim_sigma2 else ()
        if self.sigma2.shape != expected:
            raise ShapeMismatchError(f"sigma2 shape {self.sigma2.shape}, expected {expected}")
        if not np.all(self.sigma2 > 0) or not np.all(np.isfinite(self.sigma2)):
            raise ValidationError("sigma2 must be positive and finite")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SpeakerModel":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(config.hidden_units)
        params = {}
        for name, shape in config.shapes().items():
            params[name] = rng.uniform(-bound, bound, size=shape)
        sigma2 = np.full(config.embedding_dim if config.per_dim_sigma2 else (), config.sigma2_init)
        return cls(config, params, sigma2)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "SpeakerModel":
        params = {name: np.zeros(shape) for name, shape in config.shapes().items()}
        sigma2 = np.full(config.embedding_dim if config.per_dim_sigma2 else (), config.sigma2_init)
        return cls(config, params, sigma2)

    @property
    def dim(self) -> int:
        return self.config.embedding_dim

    @property
    def log_sigma2(self):
        return np.log(self.sigma2)

    def copy(self) -> "SpeakerModel":
        return SpeakerModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.sigma2.copy())

    def with_sigma2(self, sigma2) -> "SpeakerModel":
        m = self.copy()
        m.sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), m.sigma2.shape).copy()
        return m


@dataclass(frozen=True, eq=False)
class SpeakerInstanceState:
    hidden: np.ndarray
    mean_sum: np.ndarray
    steps: int
    observed: int

    def __eq__(self, other):
        if not isinstance(other, SpeakerInstanceState):
            return NotImplemented
        return (
            self.steps == other.steps
            and self.observed == other.observed
            and np.array_equal(self.hidden, other.hidden)
            and np.array_equal(self.mean_sum, other.mean_sum)
        )


# --------------------------------------------------------------------------
# Single-step operations
# --------------------------------------------------------------------------


def gru_step(model: SpeakerModel, hidden, x):
    """One GRU update; works on single vectors or on row-stacked batches."""
    p = model.params
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite GRU input")
    u = expit(x @ p["gru.W_u"].T + hidden @ p["gru.U_u"].T + p["gru.b_u"])
    r = expit(x @ p["gru.W_r"].T + hidden @ p["gru.U_r"].T + p["gru.b_r"])
    c = np.tanh(x @ p["gru.W_c"].T + (r * hidden) @ p["gru.U_c"].T + p["gru.b_c"])
    return (1.0 - u) * hidden + u * c


def head(model: SpeakerModel, hidden):
    return hidden @ model.params["head.W"].T + model.params["head.b"]


def new_instance(model: SpeakerModel) -> SpeakerInstanceState:
    h = gru_step(model, np.zeros(model.config.hidden_units), np.zeros(model.dim))
    return SpeakerInstanceState(hidden=h, mean_sum=head(model, h), steps=1, observed=0)


def observe(model: SpeakerModel, state: SpeakerInstanceState, x) -> SpeakerInstanceState:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DimensionMismatchError(f"observation has shape {x.shape}, model expects ({model.dim},)")
    h = gru_step(model, state.hidden, x)
    return SpeakerInstanceState(h, state.mean_sum + head(model, h), state.steps + 1, state.observed + 1)


def observe_many(model: SpeakerModel, states, xs) -> list:
    """Advance several instances in one batched GRU step."""
    if not states:
        return []
    hidden = np.stack([s.hidden for s in states])
    xs = np.asarray(xs, dtype=np.float64).reshape(len(states), model.dim)
    h = gru_step(model, hidden, xs)
    outs = head(model, h)
    return [
        SpeakerInstanceState(h[i], s.mean_sum + outs[i], s.steps + 1, s.observed + 1)
        for i, s in enumerate(states)
    ]


def predict_mean(state: SpeakerInstanceState) -> np.ndarray:
    return state.mean_sum / state.steps


def gaussian_log_likelihood(x, mu, sigma2) -> float:
    """log N(x; mu, diag(sigma2)); ``sigma2`` is a scalar or per-dimension vector."""
    diff = np.asarray(x, dtype=np.float64) - mu
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), diff.shape[-1:])
    return float(-0.5 * np.sum(LOG_2PI + np.log(sigma2)) - 0.5 * np.sum(diff * diff / sigma2))


def log_likelihood(model: SpeakerModel, x, mu) -> float:
    return gaussian_log_likelihood(x, mu, model.sigma2)


# --------------------------------------------------------------------------
# Batched forward / backward through time (training)
# --------------------------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: np.ndarray  # (L, B, D), step k consumes inputs[k]; inputs[0] = 0
    hidden: np.ndarray  # (L + 1, B, H), hidden[0] = 0
    u: np.ndarray
    r: np.ndarray
    c: np.ndarray
    means: np.ndarray  # (L, B, D), means[j] predicts frame j
    extras: dict = field(default_factory=dict)


def forward_sequences(model: SpeakerModel, frames: np.ndarray) -> ForwardCache:
    """Run instances over a padded batch ``frames`` of shape (B, L, D).

    ``means[j]`` is the predicted mean for frame ``j`` after observing frames
    ``0..j-1``.  Frame ``L-1`` is never fed, so padding after a sequence's end
    cannot affect its valid positions.
    """
    p = model.params
    B, L, D = frames.shape
    H = model.config.hidden_units
    inputs = np.zeros((L, B, D))
    if L > 1:
        inputs[1:] = frames[:, :-1, :].transpose(1, 0, 2)
    hidden = np.zeros((L + 1, B, H))
    u = np.empty((L, B, H))
    r = np.empty((L, B, H))
    c = np.empty((L, B, H))
    # input projections for all steps at once
    xu = inputs @ p["gru.W_u"].T + p["gru.b_u"]
    xr = inputs @ p["gru.W_r"].T + p["gru.b_r"]
    xc = inputs @ p["gru.W_c"].T + p["gru.b_c"]
    for k in range(L):
        h = hidden[k]
        u[k] = expit(xu[k] + h @ p["gru.U_u"].T)
        r[k] = expit(xr[k] + h @ p["gru.U_r"].T)
        c[k] = np.tanh(xc[k] + (r[k] * h) @ p["gru.U_c"].T)
        hidden[k + 1] = (1.0 - u[k]) * h + u[k] * c[k]
    outputs = hidden[1:] @ p["head.W"].T + p["head.b"]
    counts = np.arange(1, L + 1, dtype=np.float64)[:, None, None]
    means = np.cumsum(outputs, axis=0) / counts
    return ForwardCache(inputs, hidden, u, r, c, means)


def backward_sequences(model: SpeakerModel, cache: ForwardCache, d_means: np.ndarray) -> dict:
    """Gradients of a scalar w.r.t. parameters given dloss/dmeans of shape (L, B, D)."""
    p = model.params
    L = d_means.shape[0]
    counts = np.arange(1, L + 1, dtype=np.float64)[:, None, None]
    # mean_j = (1/j) sum_{k<=j} o_k  =>  dO_k = sum_{j>=k} dmean_j / j
    d_out = np.cumsum((d_means / counts)[::-1], axis=0)[::-1]
    hs = cache.hidden[1:]
    grads = {name: np.zeros_like(p[name]) for name in PARAM_NAMES}
    grads["head.W"] = np.einsum("lbd,lbh->dh", d_out, hs)
    grads["head.b"] = d_out.sum(axis=(0, 1))
    d_hidden_from_out = d_out @ p["head.W"]
    Uu, Ur, Uc = p["gru.U_u"], p["gru.U_r"], p["gru.U_c"]
    d_pre_u = np.empty_like(cache.u)
    d_pre_r = np.empty_like(cache.r)
    d_pre_c = np.empty_like(cache.c)
    dh_next = np.zeros_like(cache.hidden[0])
    for k in range(L - 1, -1, -1):
        h_prev = cache.hidden[k]
        u, r, c = cache.u[k], cache.r[k], cache.c[k]
        dh = dh_next + d_hidden_from_out[k]
        du = dh * (c - h_prev)
        dc = dh * u
        dh_prev = dh * (1.0 - u)
        dpc = dc * (1.0 - c * c)
        d_rh = dpc @ Uc
        dh_prev += d_rh * r
        dpr = d_rh * h_prev * r * (1.0 - r)
        dpu = du * u * (1.0 - u)
        dh_prev += dpr @ Ur + dpu @ Uu
        d_pre_u[k], d_pre_r[k], d_pre_c[k] = dpu, dpr, dpc
        dh_next = dh_prev
    x = cache.inputs
    h_prev_all = cache.hidden[:-1]
    for gate, d_pre in (("u", d_pre_u), ("r", d_pre_r), ("c", d_pre_c)):
        grads[f"gru.W_{gate}"] = np.einsum("lbh,lbd->hd", d_pre, x)
        grads[f"gru.b_{gate}"] = d_pre.sum(axis=(0, 1))
    grads["gru.U_u"] = np.einsum("lbh,lbk->hk", d_pre_u, h_prev_all)
    grads["gru.U_r"] = np.einsum("lbh,lbk->hk", d_pre_r, h_prev_all)
    grads["gru.U_c"] = np.einsum("lbh,lbk->hk", d_pre_c, cache.r * h_prev_all)
    return grads


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model: SpeakerModel, priors, path) -> None:
    """Write ``u64 header length | JSON header | raw little-endian f64 blobs``."""
    tensors = {name: model.params[name] for name in PARAM_NAMES}
    tensors["sigma2"] = model.sigma2
    tensors["prior.alpha"] = np.asarray(priors.alpha if priors is not None else np.nan)
    tensors["prior.p0"] = np.asarray(priors.p0 if priors is not None else np.nan)
    table = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table[name] = {"offset": offset, "shape": list(np.shape(arr))}
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(model, priors)``; priors is None when the checkpoint has none."""
    from uisrnn.priors import PriorParams

    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorruptCheckpointError(f"{path}: too short")
    (hlen,) = struct.unpack_from("<Q", raw)
    if 8 + hlen > len(raw):
        raise CorruptCheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        version = header["format_version"]
        config_dict = header["config"]
        table = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig(**config_dict)
    except TypeError as exc:
        raise CorruptCheckpointError(f"{path}: bad config ({exc})") from None
    body = raw[8 + hlen :]
    required = PARAM_NAMES + ("sigma2", "prior.alpha", "prior.p0")
    tensors = {}
    for name in required:
        if name not in table:
            raise CorruptCheckpointError(f"{path}: missing tensor {name}")
        entry = table[name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        if start < 0 or start + 8 * count > len(body):
            raise CorruptCheckpointError(f"{path}: tensor {name} out of range")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
    shapes = config.shapes()
    for name in PARAM_NAMES:
        if tensors[name].shape != shapes[name]:
            raise ShapeMismatchError(f"{path}: {name} has shape {tensors[name].shape}, config implies {shapes[name]}")
    sigma2 = tensors["sigma2"]
    if np.any(sigma2 <= 0):
        raise CorruptCheckpointError(f"{path}: non-positive sigma2")
    model = SpeakerModel(config, {n: tensors[n] for n in PARAM_NAMES}, sigma2)
    alpha, p0 = float(tensors["prior.alpha"]), float(tensors["prior.p0"])
    priors = None if math.isnan(alpha) or math.isnan(p0) else PriorParams(alpha, p0)
    return model, priors
