"""Three-layer ReLU regressor on mean-pooled positional encodings.

Forward and backward passes are written out by hand.  When the encoder is
trainable (learnable Fourier basis or lookup table) the gradient continues
through the pooling into the encoder parameters.

Checkpoint layout (little-endian)::

    magic b"AFCK" | u32 version | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 ndim | ndim x u64 dims | f64 payload (C order)
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .encoding import Encoder, EncoderSpec, FourierEncoder, TableEncoder
from .sampling import RngStream
from .shapes import Dataset, ShapeSample

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
REFERENCE_PARAM_COUNT = 132_353
CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


# -- network ------------------------------------------------------------------


def init_params(dims: int, hidden: int = 256, n_out: int = 2, stream: RngStream | None = None) -> dict:
    """He-normal weights, zero biases."""
    stream = stream or RngStream(0)
    params = {}
    for i, (fan_in, fan_out) in enumerate([(dims, hidden), (hidden, hidden), (hidden, n_out)], start=1):
        w = stream.normals(fan_in * fan_out, 0.0, math.sqrt(2.0 / fan_in))
        params[f"W{i}"] = w.reshape(fan_in, fan_out)
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def param_count(dims: int, hidden: int = 256, n_out: int = 2) -> int:
    return (dims + 1) * hidden + (hidden + 1) * hidden + (hidden + 1) * n_out


def configs_near_count(target: int = REFERENCE_PARAM_COUNT, hidden: int = 256, n_out: int = 2, tol: int = 256):
    """Input widths whose parameter count lies within ``tol`` of ``target``."""
    base = param_count(0, hidden, n_out)
    centre = (target - base) / hidden
    out = []
    for d in range(max(1, math.floor(centre) - 2), math.ceil(centre) + 3):
        c = param_count(d, hidden, n_out)
        if abs(c - target) <= tol:
            out.append((d, c, c - target))
    return out


def forward(params: dict, x: np.ndarray):
    z1 = x @ params["W1"] + params["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["W2"] + params["b2"]
    a2 = np.maximum(z2, 0.0)
    y = a2 @ params["W3"] + params["b3"]
    return y, (x, z1, a1, z2, a2)


def backward(params: dict, cache, grad_out: np.ndarray) -> dict:
    """Gradients for every parameter plus ``"x"``, the gradient w.r.t. the input."""
    x, z1, a1, z2, a2 = cache
    g = {}
    g["W3"] = a2.T @ grad_out
    g["b3"] = grad_out.sum(axis=0)
    dz2 = (grad_out @ params["W3"].T) * (z2 > 0)
    g["W2"] = a1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params["W2"].T) * (z1 > 0)
    g["W1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    g["x"] = dz1 @ params["W1"].T
    return g


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of every entry of ``params`` that has a gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            if k not in grads:
                continue
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)


# -- pooled shape features ----------------------------------------------------


def shape_positions(sample: ShapeSample, encoder: Encoder, unit: float = 1.0) -> np.ndarray:
    """Physical voxel coordinates divided by ``unit``; grid indices for the lookup table."""
    if isinstance(encoder, TableEncoder):
        return sample.shape.indices()
    return sample.coords / unit


def encode_shape(sample: ShapeSample, encoder: Encoder, unit: float = 1.0) -> np.ndarray:
    """Mean of the encodings of all occupied voxels."""
    pos = shape_positions(sample, encoder, unit)
    if len(pos) == 0:
        raise ValueError("shape has no occupied voxels")
    return encoder(pos).mean(axis=0)


class PooledFeatures:
    """Mean-pooled encodings for a fixed list of shapes.

    Frozen encoders are evaluated once; trainable ones are re-evaluated per
    batch and expose :meth:`backward` for the encoder gradient.
    """

    def __init__(self, samples: list[ShapeSample], encoder: Encoder, unit: float = 1.0, trig_dtype=np.float64):
        self.encoder = encoder
        # dtype for sin/cos of a trainable basis; float32 is much faster and fine for SGD
        self.trig_dtype = trig_dtype
        self.positions = [shape_positions(s, encoder, unit) for s in samples]
        if any(len(p) == 0 for p in self.positions):
            raise ValueError("shape has no occupied voxels")
        self.counts = np.array([len(p) for p in self.positions])
        self.trainable = isinstance(encoder, TableEncoder) or (
            isinstance(encoder, FourierEncoder) and encoder.basis.trainable
        )
        self._fixed = None
        if isinstance(encoder, TableEncoder):
            self._flat = [encoder.table.flat_index(p) for p in self.positions]
        if not self.trainable:
            self._fixed = np.stack([encoder(p).mean(axis=0) for p in self.positions])

    def __len__(self) -> int:
        return len(self.positions)

    def forward(self, idx=None):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        if self._fixed is not None:
            return self._fixed[idx], None
        counts = self.counts[idx]
        seg = np.repeat(np.arange(len(idx)), counts)
        if isinstance(self.encoder, TableEncoder):
            flat = np.concatenate([self._flat[i] for i in idx])
            pool = sparse.csr_matrix(
                (1.0 / counts[seg], (seg, flat)), shape=(len(idx), self.encoder.table.size)
            )
            return pool @ self.encoder.table.entries, pool
        pts = np.concatenate([self.positions[i] for i in idx])
        # row-averaging operator: (batch, total points)
        pool = sparse.csr_matrix((1.0 / counts[seg], (seg, np.arange(len(seg)))), shape=(len(idx), len(seg)))
        arg = ((2.0 * math.pi) * (pts @ self.encoder.basis.matrix)).astype(self.trig_dtype, copy=False)
        sin, cos = np.sin(arg), np.cos(arg)
        x = np.concatenate([pool @ sin, pool @ cos], axis=1)
        return x, (pts, sin, cos, pool)

    def backward(self, cache, grad_x: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the trainable encoder parameters."""
        if isinstance(self.encoder, TableEncoder):
            return cache.T @ grad_x
        pts, sin, cos, pool = cache
        F = sin.shape[1]
        d_arg = (pool.T @ grad_x[:, :F]) * cos
        d_arg -= (pool.T @ grad_x[:, F:]) * sin
        return (2.0 * math.pi) * (pts.T @ d_arg)

    def encoder_param(self) -> np.ndarray:
        if isinstance(self.encoder, TableEncoder):
            return self.encoder.table.entries
        return self.encoder.basis.matrix


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    encoder: EncoderSpec
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden: int = 256
    seed: int = 42
    pooling: str = "mean"
    # length that maps to 1.0 in encoder coordinates; None -> dataset field of view
    position_unit: float | None = None

    def __post_init__(self) -> None:
        if isinstance(self.encoder, dict):
            self.encoder = EncoderSpec(**self.encoder)
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and learning_rate > 0")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.position_unit is not None and not self.position_unit > 0:
            raise ValueError("position_unit must be positive")


@dataclass
class Regressor:
    params: dict
    encoder: Encoder
    target_mean: np.ndarray
    target_std: np.ndarray
    position_unit: float = 1.0

    def predict_standardized(self, samples: list[ShapeSample]) -> np.ndarray:
        x, _ = PooledFeatures(samples, self.encoder, self.position_unit).forward()
        return forward(self.params, x)[0]

    def predict(self, samples: list[ShapeSample]) -> np.ndarray:
        return self.predict_standardized(samples) * self.target_std + self.target_mean

    def tensors(self) -> dict:
        out = {k: self.params[k] for k in PARAM_NAMES}
        if isinstance(self.encoder, TableEncoder):
            out["encoder.table"] = self.encoder.table.entries
        elif isinstance(self.encoder, FourierEncoder):
            out["encoder.basis"] = self.encoder.basis.matrix
        out["target_mean"] = self.target_mean
        out["target_std"] = self.target_std
        out["position_unit"] = np.array(self.position_unit)
        return out


@dataclass
class TrainResult:
    model: Regressor
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf


def targets_of(samples: list[ShapeSample]) -> np.ndarray:
    return np.array([s.target.as_array() for s in samples])


def train(dataset: Dataset, cfg: TrainConfig, encoder: Encoder | None = None) -> TrainResult:
    """Adam on standardised-target MSE; returns the best-validation checkpoint."""
    if encoder is None:
        encoder = cfg.encoder.build(3, _anisotropy_vector(dataset), dataset.train[0].shape.grid)
    encoder = copy.deepcopy(encoder)
    root = RngStream(cfg.seed)
    params = init_params(encoder.dims, cfg.hidden, 2, root.split(0))
    shuffle = root.split(1)

    y_train = targets_of(dataset.train)
    mean, std = y_train.mean(axis=0), y_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    yt = (y_train - mean) / std
    yv = (targets_of(dataset.val) - mean) / std

    unit = cfg.position_unit if cfg.position_unit is not None else field_of_view(dataset)
    feats = PooledFeatures(dataset.train, encoder, unit, np.float32)
    val_feats = PooledFeatures(dataset.val, encoder, unit, np.float32)
    trainable = {**params}
    if feats.trainable:
        trainable["encoder"] = feats.encoder_param()
    opt = Adam(cfg.learning_rate)

    model = Regressor(params, encoder, mean, std, unit)
    best = copy.deepcopy(model)
    result = TrainResult(best)
    n = len(feats)
    for epoch in range(1, cfg.epochs + 1):
        order = np.argsort(shuffle.uniforms(n), kind="stable")
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, cache = feats.forward(idx)
            pred, net_cache = forward(params, x)
            loss, grad_out = mse(pred, yt[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            grads = backward(params, net_cache, grad_out)
            if feats.trainable:
                grads["encoder"] = feats.backward(cache, grads["x"])
            opt.step(trainable, grads)
            total += loss * len(idx)
        val_x, _ = val_feats.forward()
        val_mse, _ = mse(forward(params, val_x)[0], yv)
        train_mse = total / n
        result.history.append((epoch, train_mse, val_mse))
        if val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            result.best_epoch = epoch
            best = copy.deepcopy(model)
    result.model = best
    return result


def field_of_view(dataset: Dataset) -> float:
    """Physical edge length of the (isotropic) acquisition grid."""
    return float(dataset.meta.get("field_of_view", 1.0))


def _anisotropy_vector(dataset: Dataset) -> np.ndarray:
    a = np.ones(3)
    a[dataset.meta.get("axis", 0)] = dataset.meta.get("anisotropy", 1)
    return a


# -- evaluation ---------------------------------------------------------------


def r2_score(y_true, y_pred) -> np.ndarray:
    """Per-column coefficient of determination (NaN where targets are constant)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.ndim == 1:
        y_true, y_pred = y_true[:, None], y_pred[:, None]
    ss_res = np.sum((y_true - y_pred) ** 2, axis=0)
    ss_tot = np.sum((y_true - y_true.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), np.nan)


def predict_r2(model: Regressor, samples: list[ShapeSample]) -> np.ndarray:
    """R^2 for (min_fd, max_fd) in raw units."""
    return r2_score(targets_of(samples), model.predict(samples))


# -- persistence --------------------------------------------------------------


def save_checkpoint(path, tensors: dict) -> None:
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    pos = 12
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + ln].decode("utf-8")
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
        pos += 1 + 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path} has {len(data) - pos} trailing bytes")
    return out


def write_history(path, history) -> None:
    lines = ["epoch,train_mse,val_mse"]
    lines += [f"{e},{tr:.17g},{va:.17g}" for e, tr, va in history]
    Path(path).write_text("\n".join(lines) + "\n")
