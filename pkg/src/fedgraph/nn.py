"""Minimal float64 neural network: dense and 2-D conv layers, backprop, SGD.

Conv layers use NHWC activations, stride 1 and "same" zero padding; weights
are stored as ``(kernel_h, kernel_w, c_in, c_out)``. Dense weights are
``(n_in, n_out)``. A dense layer following a conv layer flattens its input.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from fedgraph.errors import CheckpointError, ConfigError, NumericError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "identity", "softmax")
CE_EPS = 1e-12
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...]
    activation: str = "identity"

    def __post_init__(self):
        if self.kind == "conv2d":
            if len(self.dims) != 4:
                raise ConfigError("conv2d needs (kernel_h, kernel_w, c_in, c_out)")
            kh, kw = self.dims[:2]
            if kh % 2 == 0 or kw % 2 == 0:
                raise ConfigError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
        elif self.kind == "dense":
            if len(self.dims) != 2:
                raise ConfigError("dense needs (n_in, n_out)")
        else:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if any(int(d) < 1 for d in self.dims):
            raise ConfigError(f"{self.kind} layer has a zero dimension: {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @classmethod
    def conv2d(cls, kernel_h, kernel_w, c_in, c_out, activation="relu"):
        return cls("conv2d", (kernel_h, kernel_w, c_in, c_out), activation)

    @classmethod
    def dense(cls, n_in, n_out, activation="relu"):
        return cls("dense", (n_in, n_out), activation)

    @property
    def fan_in_out(self) -> tuple[int, int]:
        if self.kind == "conv2d":
            kh, kw, ci, co = self.dims
            return kh * kw * ci, kh * kw * co
        return self.dims

    @property
    def channels(self) -> tuple[int, int]:
        """(inputs, outputs) as seen by graph mapping."""
        if self.kind == "conv2d":
            return self.dims[2], self.dims[3]
        return self.dims

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return tuple(self.dims)

    @property
    def bias_shape(self) -> tuple[int]:
        return (self.dims[-1],)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.shape != self.spec.weight_shape:
            raise ConfigError(
                f"weight shape {self.weight.shape} != spec {self.spec.weight_shape}"
            )
        if self.bias.shape != self.spec.bias_shape:
            raise ConfigError(f"bias shape {self.bias.shape} != spec {self.spec.bias_shape}")


@dataclass(frozen=True)
class ModelParams:
    """Ordered, immutable layer parameters. Also used for gradients and deltas."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("model has no layers")

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.layers)

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self) -> Iterable[np.ndarray]:
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def check_congruent(self, other: "ModelParams") -> None:
        if self.specs != other.specs:
            raise ConfigError("models are not congruent (layer specs differ)")

    def map(self, fn: Callable[..., np.ndarray], *others: "ModelParams") -> "ModelParams":
        """Apply ``fn`` array-wise across this model and congruent ``others``."""
        for o in others:
            self.check_congruent(o)
        out = []
        for i, layer in enumerate(self.layers):
            w = fn(layer.weight, *(o.layers[i].weight for o in others))
            b = fn(layer.bias, *(o.layers[i].bias for o in others))
            out.append(Layer(layer.spec, w, b))
        return ModelParams(tuple(out))

    def __add__(self, other):
        return self.map(np.add, other)

    def __sub__(self, other):
        return self.map(np.subtract, other)

    def __mul__(self, scalar: float):
        return self.map(lambda a: a * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def __abs__(self):
        return self.map(np.abs)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equal(self, other: "ModelParams") -> bool:
        """Bit-exact equality of specs and values."""
        if self.specs != other.specs:
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ConfigError(
                f"batch has {len(self.inputs)} inputs but {len(self.targets)} targets"
            )

    def __len__(self):
        return len(self.inputs)


def check_architecture(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Validate shape flow through ``specs``; return the per-sample output shape."""
    shape = tuple(input_shape)
    for j, spec in enumerate(specs):
        if spec.kind == "conv2d":
            if len(shape) != 3 or shape[2] != spec.dims[2]:
                raise ConfigError(
                    f"layer {j}: conv2d expects (H, W, {spec.dims[2]}) input, got {shape}"
                )
            shape = (shape[0], shape[1], spec.dims[3])
        else:
            flat = int(np.prod(shape))
            if flat != spec.dims[0]:
                raise ConfigError(f"layer {j}: dense expects {spec.dims[0]} inputs, got {flat}")
            shape = (spec.dims[1],)
        if spec.activation == "softmax" and j != len(specs) - 1:
            raise ConfigError(f"layer {j}: softmax is only allowed on the final layer")
    return shape


def init_model(specs: Sequence[LayerSpec], seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        fan_in, fan_out = spec.fan_in_out
        s = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, size=spec.weight_shape)
        layers.append(Layer(spec, w, np.zeros(spec.bias_shape)))
    return ModelParams(tuple(layers))


def zeros_like(model: ModelParams) -> ModelParams:
    return model.map(np.zeros_like)


# ---------------------------------------------------------------- activations


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "softmax":
        return _softmax(z)
    return z


def _activation_backward(kind, z, a, grad_a):
    if kind == "relu":
        return grad_a * (z > 0)
    if kind == "sigmoid":
        return grad_a * a * (1.0 - a)
    if kind == "softmax":
        return a * (grad_a - (grad_a * a).sum(axis=-1, keepdims=True))
    return grad_a


# ---------------------------------------------------------------- layer maths


def _conv_patches(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (N, H, W, C, kh, kw)
    return np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))


def _conv_forward(x, w, b):
    patches = _conv_patches(x, w.shape[0], w.shape[1])
    return np.einsum("nyxcij,ijco->nyxo", patches, w, optimize=True) + b


def _conv_backward(x, w, grad_z):
    kh, kw = w.shape[:2]
    patches = _conv_patches(x, kh, kw)
    grad_w = np.einsum("nyxcij,nyxo->ijco", patches, grad_z, optimize=True)
    grad_b = grad_z.sum(axis=(0, 1, 2))
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    grad_xp = np.zeros((n, h + 2 * ph, wd + 2 * pw, x.shape[3]))
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i:i + h, j:j + wd, :] += grad_z @ w[i, j].T
    return grad_w, grad_b, grad_xp[:, ph:ph + h, pw:pw + wd, :]


def _forward_cache(model: ModelParams, inputs: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    try:
        check_architecture(model.specs, x.shape[1:])
    except ConfigError as exc:
        raise ConfigError(f"input shape {x.shape[1:]} does not fit model: {exc}") from None
    cache = []
    for layer in model.layers:
        spec = layer.spec
        in_shape = x.shape
        if spec.kind == "conv2d":
            z = _conv_forward(x, layer.weight, layer.bias)
        else:
            x = x.reshape(len(x), -1)
            z = x @ layer.weight + layer.bias
        a = _activate(spec.activation, z)
        cache.append((x, z, a, in_shape))
        x = a
    return x, cache


def forward(model: ModelParams, batch: Batch | np.ndarray) -> np.ndarray:
    """Predictions, one row per sample."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    out, _ = _forward_cache(model, inputs)
    return out


# ---------------------------------------------------------------- losses


def _is_segmentation(model: ModelParams) -> bool:
    return model.layers[-1].spec.kind == "conv2d"


def _cross_entropy(probs, targets):
    n = len(probs)
    picked = probs[np.arange(n), targets]
    clipped = np.maximum(picked, CE_EPS)
    loss = -np.log(clipped).mean()
    grad = np.zeros_like(probs)
    grad[np.arange(n), targets] = np.where(picked > CE_EPS, -1.0 / (n * clipped), 0.0)
    return loss, grad


def _soft_dice(probs, masks):
    # probs (N, H, W, 1), masks (N, H, W); mean over samples of 1 - dice
    p = probs[..., 0].reshape(len(probs), -1)
    t = masks.reshape(len(masks), -1).astype(np.float64)
    inter = (p * t).sum(axis=1)
    denom = p.sum(axis=1) + t.sum(axis=1) + DICE_SMOOTH
    dice = (2.0 * inter + DICE_SMOOTH) / denom
    loss = float(np.mean(1.0 - dice))
    # d dice / d p = (2 t denom - (2 inter + s)) / denom^2
    g = (2.0 * t * denom[:, None] - (2.0 * inter + DICE_SMOOTH)[:, None]) / denom[:, None] ** 2
    grad = (-g / len(p)).reshape(probs.shape[:-1])[..., None]
    return loss, grad


def loss_value(model: ModelParams, batch: Batch) -> float:
    return loss_and_grad(model, batch, need_grad=False)[0]


def loss_and_grad(model: ModelParams, batch: Batch, need_grad: bool = True):
    """Mean loss over the batch and its gradient as a ModelParams.

    Cross-entropy when the network ends in a dense softmax layer, soft Dice
    (1 - Dice) when it ends in a single-channel conv layer.
    """
    out, cache = _forward_cache(model, batch.inputs)
    if _is_segmentation(model):
        loss, grad_a = _soft_dice(out, np.asarray(batch.targets))
    else:
        if model.layers[-1].spec.activation != "softmax":
            raise ConfigError("classification networks must end in a softmax layer")
        loss, grad_a = _cross_entropy(out, np.asarray(batch.targets, dtype=np.int64))
    loss = float(loss)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    if not need_grad:
        return loss, None

    grads = []
    for layer, (x, z, a, in_shape) in zip(reversed(model.layers), reversed(cache)):
        grad_z = _activation_backward(layer.spec.activation, z, a, grad_a)
        if layer.spec.kind == "conv2d":
            gw, gb, grad_x = _conv_backward(x, layer.weight, grad_z)
        else:
            gw = x.T @ grad_z
            gb = grad_z.sum(axis=0)
            grad_x = grad_z @ layer.weight.T
        grads.append(Layer(layer.spec, gw, gb))
        grad_a = grad_x.reshape(in_shape)
    return loss, ModelParams(tuple(grads[::-1]))


def sgd_step(model: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    return model.map(lambda w, g: w - lr * g, grads)


def param_l1_distance(a: ModelParams, b: ModelParams) -> float:
    """Sum of absolute element-wise differences over all layers."""
    a.check_congruent(b)
    return float(sum(np.abs(x - y).sum() for x, y in zip(a.arrays(), b.arrays())))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ModelParams
    final_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def batch_rng(seed: int, client: int, round_idx: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, client, round_idx, epoch]))


def local_train(
    inputs: np.ndarray,
    targets: np.ndarray,
    start: ModelParams,
    epochs: int,
    lr: float,
    batch_size: int = 16,
    *,
    seed: int = 0,
    client: int = 0,
    round_idx: int = 0,
) -> TrainResult:
    """Run ``epochs`` shuffled passes of mini-batch SGD from ``start``.

    The shuffle for each epoch is drawn from ``(seed, client, round_idx, epoch)``
    so results never depend on which worker runs the client.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if len(inputs) == 0:
        raise ConfigError(f"client {client} has no training samples")
    model = start
    epoch_losses = []
    n = len(inputs)
    for epoch in range(epochs):
        order = batch_rng(seed, client, round_idx, epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            try:
                loss, grads = loss_and_grad(model, Batch(inputs[idx], targets[idx]))
            except NumericError as exc:
                raise NumericError(
                    f"{exc} (round {round_idx}, client {client}, epoch {epoch})"
                ) from None
            total += loss * len(idx)
            if lr != 0:
                model = sgd_step(model, grads, lr)
        epoch_losses.append(total / n)
    return TrainResult(model, epoch_losses[-1], epoch_losses)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FGCK"
CKPT_VERSION = 1
_KIND_TAGS = {"conv2d": 0, "dense": 1}
_ACT_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}


def dumps_checkpoint(model: ModelParams) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.layers))]
    for layer in model.layers:
        spec = layer.spec
        parts.append(struct.pack("<BB", _KIND_TAGS[spec.kind], _ACT_TAGS[spec.activation]))
        parts.append(struct.pack(f"<{len(spec.dims)}I", *spec.dims))
        parts.append(layer.weight.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def loads_checkpoint(data: bytes) -> ModelParams:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise CheckpointError("checkpoint is truncated (incomplete header)")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    layers = []
    try:
        for _ in range(n_layers):
            kind_tag, act_tag = struct.unpack_from("<BB", data, pos)
            pos += 2
            kind = kinds[kind_tag]
            n_dims = 4 if kind == "conv2d" else 2
            dims = struct.unpack_from(f"<{n_dims}I", data, pos)
            pos += 4 * n_dims
            spec = LayerSpec(kind, tuple(dims), ACTIVATIONS[act_tag])
            arrays = []
            for shape in (spec.weight_shape, spec.bias_shape):
                count = int(np.prod(shape))
                if pos + 8 * count > len(data):
                    raise CheckpointError("checkpoint is truncated")
                arrays.append(np.frombuffer(data, "<f8", count, pos).reshape(shape))
                pos += 8 * count
            layers.append(Layer(spec, *arrays))
    except (struct.error, KeyError, IndexError, ConfigError) as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last layer")
    return ModelParams(tuple(layers))


def save_checkpoint(model: ModelParams, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(model))
    tmp.replace(path)


def load_checkpoint(path) -> ModelParams:
    return loads_checkpoint(Path(path).read_bytes())
