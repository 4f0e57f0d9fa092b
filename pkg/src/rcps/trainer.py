"""A small pixelwise predictor with hand-derived backpropagation.

The model applies a shared two-layer perceptron to the k x k patch around
each pixel (a k x k convolution followed by a 1 x 1 one, with tanh in
between). It is deliberately tiny: every gradient is written out by hand so
it can be checked against finite differences, and training is single-threaded
and bit-reproducible under a fixed seed.

Head layout of the raw per-pixel outputs:
    residual, gaussian: (prediction, raw_length)  with length = softplus(raw)
    softmax:            num_bins logits
    quantile:           (prediction, q_low, q_high) as absolute quantiles

For tasks with a periodic pixel structure (block-replicated super-resolution
inputs), ``grid_period`` appends a one-hot encoding of each pixel's position
modulo the period to its patch features. A deep convolutional model resolves
that phase through its receptive-field geometry; a two-layer patch model
needs it spelled out.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ImageTensor, PredictionTriple
from .exceptions import ArgumentError, ConfigError, FormatError, ShapeError, TrainingError
from .heuristics import (
    QuantileLevel,
    SoftmaxHead,
    discretize,
    pinball_loss,
    sigmoid,
    softmax_extract,
    softplus,
)

__all__ = [
    "HEAD_KINDS",
    "TrainConfig",
    "PatchModel",
    "Gradients",
    "init_model",
    "forward",
    "backward",
    "train",
    "predict_triple",
    "point_mse",
    "save_model",
    "load_model",
]

HEAD_KINDS = ("residual", "gaussian", "softmax", "quantile")

CHECKPOINT_MAGIC = b"RCPSMDL1"


def head_dim(head_kind: str, num_bins: int | None) -> int:
    if head_kind in ("residual", "gaussian"):
        return 2
    if head_kind == "quantile":
        return 3
    if head_kind == "softmax":
        if num_bins is None or num_bins < 2:
            raise ConfigError("softmax head requires num_bins >= 2")
        return num_bins
    raise ConfigError(f"unknown head kind {head_kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lr_sweep: tuple | None = None

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr_sweep is not None:
            sweep = tuple(float(r) for r in self.lr_sweep)
            if not sweep or any(r <= 0.0 for r in sweep):
                raise ConfigError("lr_sweep must be a non-empty list of positive rates")
            object.__setattr__(self, "lr_sweep", sweep)


@dataclass
class PatchModel:
    patch_size: int
    hidden_width: int
    in_channels: int
    head_kind: str
    weights_in: np.ndarray
    bias_in: np.ndarray
    weights_out: np.ndarray
    bias_out: np.ndarray
    num_bins: int | None = None
    alpha: float = 0.1
    grid_period: int | None = None

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head_kind!r}")
        if self.grid_period is not None and self.grid_period < 2:
            raise ConfigError(f"grid_period must be >= 2, got {self.grid_period}")
        n_feat = self.feature_width
        n_out = head_dim(self.head_kind, self.num_bins)
        shapes = {
            "weights_in": (n_feat, self.hidden_width),
            "bias_in": (self.hidden_width,),
            "weights_out": (self.hidden_width, n_out),
            "bias_out": (n_out,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ShapeError(f"{name} must have shape {want}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ArgumentError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def feature_width(self) -> int:
        base = self.patch_size * self.patch_size * self.in_channels
        if self.grid_period is not None:
            base += 2 * self.grid_period
        return base

    @property
    def head_width(self) -> int:
        return head_dim(self.head_kind, self.num_bins)

    def copy(self) -> "PatchModel":
        return dataclasses.replace(
            self,
            weights_in=self.weights_in.copy(),
            bias_in=self.bias_in.copy(),
            weights_out=self.weights_out.copy(),
            bias_out=self.bias_out.copy(),
        )

    def params(self) -> list[tuple[str, np.ndarray]]:
        return [(n, getattr(self, n)) for n in PARAM_NAMES]


PARAM_NAMES = ("weights_in", "bias_in", "weights_out", "bias_out")


@dataclass
class Gradients:
    weights_in: np.ndarray
    bias_in: np.ndarray
    weights_out: np.ndarray
    bias_out: np.ndarray

    def params(self) -> list[tuple[str, np.ndarray]]:
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(*(factor * getattr(self, n) for n in PARAM_NAMES))

    def add(self, other: "Gradients", factor: float = 1.0) -> None:
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(factor * getattr(other, name))


def init_model(
    patch_size: int,
    hidden_width: int,
    head_kind: str,
    in_channels: int = 1,
    num_bins: int | None = None,
    alpha: float = 0.1,
    seed: int = 0,
    grid_period: int | None = None,
) -> PatchModel:
    """Scale-preserving uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    n_feat = patch_size * patch_size * in_channels
    if grid_period is not None:
        n_feat += 2 * grid_period
    n_out = head_dim(head_kind, num_bins)
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return PatchModel(
        patch_size=patch_size,
        hidden_width=hidden_width,
        in_channels=in_channels,
        head_kind=head_kind,
        weights_in=glorot(n_feat, hidden_width),
        bias_in=np.zeros(hidden_width),
        weights_out=glorot(hidden_width, n_out),
        bias_out=np.zeros(n_out),
        num_bins=num_bins,
        alpha=alpha,
        grid_period=grid_period,
    )


def _patches(model: PatchModel, x: ImageTensor) -> np.ndarray:
    """Reflect-padded k x k patches, flattened to (pixels, features)."""
    data = x.data
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape[2] != model.in_channels:
        raise ShapeError(
            f"input has {data.shape[2]} channels, model expects {model.in_channels}"
        )
    pad = model.patch_size // 2
    padded = np.pad(data, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (model.patch_size, model.patch_size), axis=(0, 1))
    # (M, N, C, k, k) -> (M, N, k, k, C) -> (M*N, k*k*C)
    win = np.moveaxis(win, 2, 4)
    m, n = data.shape[0], data.shape[1]
    feats = np.ascontiguousarray(win).reshape(m * n, -1)
    if model.grid_period is None:
        return feats
    p = model.grid_period
    rows = np.repeat(np.arange(m) % p, n)
    cols = np.tile(np.arange(n) % p, m)
    phase = np.zeros((m * n, 2 * p))
    phase[np.arange(m * n), rows] = 1.0
    phase[np.arange(m * n), p + cols] = 1.0
    return np.concatenate([feats, phase], axis=1)


def forward(model: PatchModel, x: ImageTensor) -> np.ndarray:
    """Raw per-pixel head outputs of shape (M, N, head_width).

    Heads are returned untransformed; length positivity (softplus) is applied
    by the loss and by predict_triple.
    """
    p = _patches(model, x)
    hidden = np.tanh(p @ model.weights_in + model.bias_in)
    out = hidden @ model.weights_out + model.bias_out
    return out.reshape(x.height, x.width, model.head_width)


def _head_loss_grad(model, raw, y):
    """Per-pixel loss vector and gradient w.r.t. the raw head outputs."""
    kind = model.head_kind
    d_out = np.zeros_like(raw)
    if kind in ("residual", "gaussian"):
        f, u_raw = raw[:, 0], raw[:, 1]
        u = softplus(u_raw)
        d = f - y
        if kind == "residual":
            gap = u - np.abs(d)
            loss = d * d + gap * gap
            d_out[:, 0] = 2.0 * d - 2.0 * gap * np.sign(d)
            d_out[:, 1] = 2.0 * gap * sigmoid(u_raw)
        else:
            loss = np.log(u) + d * d / u
            d_out[:, 0] = 2.0 * d / u
            d_out[:, 1] = (1.0 / u - d * d / (u * u)) * sigmoid(u_raw)
        return loss, d_out
    if kind == "softmax":
        target = discretize(y, model.num_bins)
        zmax = raw.max(axis=1)
        e = np.exp(raw - zmax[:, None])
        denom = e.sum(axis=1)
        loss = np.log(denom) + zmax - raw[np.arange(raw.shape[0]), target]
        d_out = e / denom[:, None]
        d_out[np.arange(raw.shape[0]), target] -= 1.0
        return loss, d_out
    # quantile: squared error on the prediction plus the two pinball losses
    level = QuantileLevel(model.alpha)
    f, q_lo, q_hi = raw[:, 0], raw[:, 1], raw[:, 2]
    d = f - y
    lo_loss, lo_grad = pinball_loss(q_lo, y, QuantileLevel(level.lower))
    hi_loss, hi_grad = pinball_loss(q_hi, y, QuantileLevel(level.upper))
    loss = d * d + lo_loss + hi_loss
    d_out[:, 0] = 2.0 * d
    d_out[:, 1] = lo_grad
    d_out[:, 2] = hi_grad
    return loss, d_out


def backward(
    model: PatchModel, x: ImageTensor, y: ImageTensor, loss_kind: str | None = None
) -> tuple[float, Gradients]:
    """Mean per-pixel loss and its exact gradient w.r.t. every weight.

    ``loss_kind`` must match the model's head (each head trains under its own
    loss); it exists so callers can state their intent and get a loud error
    on a mismatch instead of a silently wrong pairing.
    """
    if loss_kind is not None and loss_kind != model.head_kind:
        raise ConfigError(
            f"loss {loss_kind!r} is incompatible with head {model.head_kind!r}"
        )
    if (x.height, x.width) != (y.height, y.width):
        raise ShapeError(
            f"input {x.height}x{x.width} and target {y.height}x{y.width} differ"
        )
    p = _patches(model, x)
    pre = p @ model.weights_in + model.bias_in
    hidden = np.tanh(pre)
    raw = hidden @ model.weights_out + model.bias_out

    loss_px, d_out = _head_loss_grad(model, raw, y.data.reshape(-1))
    n_px = loss_px.size
    loss = float(loss_px.mean())
    d_out = d_out / n_px

    d_hidden = d_out @ model.weights_out.T
    d_pre = d_hidden * (1.0 - hidden * hidden)
    grads = Gradients(
        weights_in=p.T @ d_pre,
        bias_in=d_pre.sum(axis=0),
        weights_out=hidden.T @ d_out,
        bias_out=d_out.sum(axis=0),
    )
    return loss, grads


def _batch_backward(model, items):
    """Pixel-weighted mean loss and gradient over a list of (x, y) images."""
    total_px = 0
    loss_sum = 0.0
    acc = None
    for x, y in items:
        n_px = x.height * x.width
        loss, grads = backward(model, x, y)
        loss_sum += loss * n_px
        if acc is None:
            acc = grads.scaled(float(n_px))
        else:
            acc.add(grads, float(n_px))
        total_px += n_px
    return loss_sum / total_px, acc.scaled(1.0 / total_px)


class _Adam:
    def __init__(self, model, config):
        self.cfg = config
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in model.params()}
        self.v = {n: np.zeros_like(p) for n, p in model.params()}

    def step(self, model, grads):
        c = self.cfg
        self.t += 1
        for name, g in grads.params():
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = m / (1.0 - c.beta1**self.t)
            v_hat = v / (1.0 - c.beta2**self.t)
            getattr(model, name).__isub__(
                c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)
            )


class _Sgd:
    def __init__(self, model, config):
        self.cfg = config

    def step(self, model, grads):
        for name, g in grads.params():
            getattr(model, name).__isub__(self.cfg.learning_rate * g)


def _train_single(dataset, model_init, config, history=None):
    model = model_init.copy()
    opt = (_Adam if config.optimizer == "adam" else _Sgd)(model, config)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            loss, grads = _batch_backward(model, batch)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"batch {n_batches + 1} (lr={config.learning_rate})"
                )
            opt.step(model, grads)
            epoch_loss += loss
            n_batches += 1
        if history is not None:
            history.append(epoch_loss / n_batches)
    return model


def train(
    dataset,
    model_init: PatchModel,
    config: TrainConfig,
    val=None,
    history: list | None = None,
) -> PatchModel:
    """Train under the head's loss; optionally sweep learning rates.

    With ``lr_sweep`` set, each rate trains from the same initial weights and
    the model whose point prediction has the lowest validation MSE wins (ties
    go to the earlier rate); ``val`` is required in that case. ``history``,
    when given, collects per-epoch mean training losses (the winning sweep's
    on a sweep).
    """
    if len(dataset) == 0:
        raise ArgumentError("training dataset is empty")
    if not config.lr_sweep:
        return _train_single(dataset, model_init, config, history)
    if val is None or len(val) == 0:
        raise ConfigError("lr_sweep requires a validation set")
    best = None
    for rate in config.lr_sweep:
        cfg = dataclasses.replace(config, learning_rate=rate, lr_sweep=None)
        hist = []
        model = _train_single(dataset, model_init, cfg, hist)
        score = point_mse(model, val)
        if best is None or score < best[0]:
            best = (score, model, hist)
    if history is not None:
        history.extend(best[2])
    return best[1]


def predict_triple(model: PatchModel, x: ImageTensor) -> PredictionTriple:
    """Head-specific extraction of (prediction, lower length, upper length)."""
    raw = forward(model, x)
    if model.head_kind in ("residual", "gaussian"):
        length = ImageTensor(softplus(raw[:, :, 1]), standardized=True)
        return PredictionTriple(
            prediction=ImageTensor(raw[:, :, 0], standardized=True),
            lower_length=length,
            upper_length=length,
        )
    if model.head_kind == "softmax":
        head = SoftmaxHead(model.num_bins, raw)
        return softmax_extract(head, QuantileLevel(model.alpha))
    f = raw[:, :, 0]
    return PredictionTriple(
        prediction=ImageTensor(f, standardized=True),
        lower_length=ImageTensor(np.maximum(0.0, f - raw[:, :, 1]), standardized=True),
        upper_length=ImageTensor(np.maximum(0.0, raw[:, :, 2] - f), standardized=True),
    )


def point_mse(model: PatchModel, items) -> float:
    """Pooled mean squared error of the point prediction over (x, y) pairs."""
    se = 0.0
    n = 0
    for x, y in items:
        f = predict_triple(model, x).prediction.data
        se += float(((f - y.data) ** 2).sum())
        n += f.size
    return se / n


def save_model(model: PatchModel, path, train_config: TrainConfig | None = None) -> None:
    """Write the checkpoint container: magic, length-prefixed JSON header,
    then raw little-endian float64 blocks in header order."""
    header = {
        "format_version": 1,
        "patch_size": model.patch_size,
        "hidden_width": model.hidden_width,
        "in_channels": model.in_channels,
        "head_kind": model.head_kind,
        "num_bins": model.num_bins,
        "alpha": model.alpha,
        "grid_period": model.grid_period,
        "blocks": [
            {"name": name, "shape": list(arr.shape)} for name, arr in model.params()
        ],
        "train_config": dataclasses.asdict(train_config) if train_config else None,
    }
    if header["train_config"] and header["train_config"]["lr_sweep"] is not None:
        header["train_config"]["lr_sweep"] = list(header["train_config"]["lr_sweep"])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in model.params():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> PatchModel:
    """Read a checkpoint written by save_model, validating structure as it goes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic {data[:8]!r}, expected {CHECKPOINT_MAGIC!r}",
            offset=0,
        )
    if len(data) < 16:
        raise FormatError("checkpoint truncated before header length", offset=8)
    (header_len,) = struct.unpack("<Q", data[8:16])
    header_end = 16 + header_len
    if len(data) < header_end:
        raise FormatError(
            f"checkpoint truncated inside header: need {header_len} bytes",
            offset=16,
        )
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", offset=16)

    arrays = {}
    offset = header_end
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        n_bytes = int(np.prod(shape)) * 8
        if len(data) < offset + n_bytes:
            raise FormatError(
                f"checkpoint truncated in block {block['name']!r}: expected "
                f"{n_bytes} bytes, got {len(data) - offset}",
                offset=offset,
            )
        arrays[block["name"]] = np.frombuffer(
            data, dtype="<f8", count=int(np.prod(shape)), offset=offset
        ).reshape(shape).copy()
        offset += n_bytes
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint missing weight blocks {missing}")
    return PatchModel(
        patch_size=int(header["patch_size"]),
        hidden_width=int(header["hidden_width"]),
        in_channels=int(header["in_channels"]),
        head_kind=str(header["head_kind"]),
        weights_in=arrays["weights_in"],
        bias_in=arrays["bias_in"],
        weights_out=arrays["weights_out"],
        bias_out=arrays["bias_out"],
        num_bins=None if header["num_bins"] is None else int(header["num_bins"]),
        alpha=float(header["alpha"]),
        grid_period=(
            None if header.get("grid_period") is None else int(header["grid_period"])
        ),
    )
