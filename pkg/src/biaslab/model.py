"""Small convolutional classifier, SGD training loop and classification metrics."""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "Conv2d",
    "ReLU",
    "MaxPool2x2",
    "Flatten",
    "Dense",
    "Sequential",
    "TinyCnn",
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "NumericalError",
    "cross_entropy",
    "train",
    "evaluate",
    "predict_proba",
    "report_from_confusion",
    "save_checkpoint",
    "load_checkpoint",
]

# Counts probabilities clamped to 1e-12 inside cross_entropy.
warning_counts = {"cross_entropy_clamped": 0}


class NumericalError(FloatingPointError):
    """Training diverged; carries the location of the failure."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    param_names = ()

    def __call__(self, x: Tensor, params: dict) -> Tensor:  # pragma: no cover
        raise NotImplementedError


@dataclass
class Conv2d(Layer):
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3

    @property
    def param_names(self):
        return (f"{self.name}.weight", f"{self.name}.bias")

    def init(self, rng):
        fan_in = self.in_channels * self.kernel**2
        fan_out = self.out_channels * self.kernel**2
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, (self.out_channels, self.in_channels, self.kernel, self.kernel))
        return {self.param_names[0]: w, self.param_names[1]: np.zeros(self.out_channels)}

    def __call__(self, x, params):
        w, b = (params[n] for n in self.param_names)
        return ad.conv2d(x, w, b)


@dataclass
class Dense(Layer):
    name: str
    in_features: int
    out_features: int

    @property
    def param_names(self):
        return (f"{self.name}.weight", f"{self.name}.bias")

    def init(self, rng):
        bound = math.sqrt(6.0 / (self.in_features + self.out_features))
        w = rng.uniform(-bound, bound, (self.in_features, self.out_features))
        return {self.param_names[0]: w, self.param_names[1]: np.zeros(self.out_features)}

    def __call__(self, x, params):
        w, b = (params[n] for n in self.param_names)
        n = x.shape[0]
        bias = ad.broadcast_to(ad.reshape(b, (1, self.out_features)), (n, self.out_features))
        return ad.add(ad.matmul(x, w), bias)


@dataclass
class ReLU(Layer):
    name: str = "relu"

    def __call__(self, x, params):
        return ad.relu(x)


@dataclass
class MaxPool2x2(Layer):
    name: str = "pool"

    def __call__(self, x, params):
        return ad.maxpool2x2(x)


@dataclass
class Flatten(Layer):
    name: str = "flatten"

    def __call__(self, x, params):
        return ad.flatten(x)


class Sequential:
    """A chain of layers with a flat dictionary of named parameter arrays.

    ``forward`` accepts an optional mapping of parameter tensors so the
    caller can substitute tape leaves when gradients are needed.
    """

    def __init__(self, layers: Sequence[Layer], params: dict[str, np.ndarray], num_classes: int):
        self.layers = list(layers)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.num_classes = num_classes

    def copy(self) -> "Sequential":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.layers = list(self.layers)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def _inputs(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
        return x

    def forward(self, x, params: dict | None = None, capture: Sequence[str] = ()) -> Tensor:
        """Logits for a batch (N, H, W) / (N, 1, H, W), or a single (H, W) image."""
        out, _ = self.forward_with_activations(x, params, capture)
        return out

    def forward_with_activations(self, x, params=None, capture: Sequence[str] = ()):
        params = self.params if params is None else params
        h = self._inputs(x)
        acts = {}
        for layer in self.layers:
            h = layer(h, params)
            if layer.name in capture:
                acts[layer.name] = h
        return h, acts

    __call__ = forward


class TinyCnn(Sequential):
    """conv(1->8) relu pool conv(8->16) relu pool flatten dense(32) relu dense(m)."""

    def __init__(self, side: int = 32, num_classes: int = 2, seed: int = 0, hidden: int = 32):
        if side % 4:
            raise ValueError(f"image side must be divisible by 4, got {side}")
        layers = [
            Conv2d("conv1", 1, 8),
            ReLU("relu1"),
            MaxPool2x2("pool1"),
            Conv2d("conv2", 8, 16),
            ReLU("relu2"),
            MaxPool2x2("pool2"),
            Flatten("flatten"),
            Dense("fc1", 16 * (side // 4) ** 2, hidden),
            ReLU("relu3"),
            Dense("fc2", hidden, num_classes),
        ]
        rng = np.random.default_rng(seed)
        params = {}
        for layer in layers:
            if hasattr(layer, "init"):
                params.update(layer.init(rng))
        super().__init__(layers, params, num_classes)
        self.side = side


# ---------------------------------------------------------------------------
# loss / training
# ---------------------------------------------------------------------------


def cross_entropy(probabilities, labels) -> Tensor:
    """Mean categorical cross-entropy of probability rows against one-hot rows.

    Probabilities below 1e-12 are clamped; each clamp at a true class is
    counted in ``warning_counts["cross_entropy_clamped"]``.
    """
    p = ad.as_tensor(probabilities)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if p.ndim != 2 or y.shape != p.shape:
        raise ad.ShapeError(f"cross_entropy: incompatible shapes {p.shape} and {y.shape}")
    if p.shape[0] < 1:
        raise ValueError("cross_entropy: empty batch")
    clamped = int(np.sum((p.data < 1e-12) & (y > 0)))
    if clamped:
        warning_counts["cross_entropy_clamped"] += clamped
        log.warning("cross_entropy: clamped %d zero probabilities", clamped)
    logp = ad.log(ad.clip_min(p, 1e-12))
    return ad.mul(ad.tsum(ad.mul(logp, y)), -1.0 / p.shape[0])


def one_hot(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    lr_decay: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: Sequential
    loss_history: list[float]
    updates: int


def batch_schedule(n: int, cfg: TrainConfig):
    """Yield (epoch, batch_index, lr, indices) for a seeded SGD run."""
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            yield epoch, b, lr, order[start : start + cfg.batch_size]
        lr *= cfg.lr_decay


def augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1, np.uint64)[0] >> 1)


def augment_batch(images, ids, augment, seed, epoch):
    if augment is None:
        return images
    return np.stack([augment(img, augment_seed(seed, epoch, int(i))) for img, i in zip(images, ids)])


def sgd_step(model: Sequential, loss_fn: Callable[[dict], Tensor], lr: float) -> float:
    with Tape() as tape:
        leaves = {k: tape.variable(v) for k, v in model.params.items()}
        loss = loss_fn(leaves)
        names = list(leaves)
        grads = ad.backward(loss, [leaves[k] for k in names])
    value = loss.item()
    for k, g in zip(names, grads):
        model.params[k] = model.params[k] - lr * g.data
    return value


def classification_loss(model, images, labels):
    y = one_hot(labels, model.num_classes)

    def loss_fn(params):
        return cross_entropy(ad.softmax(model.forward(images, params)), y)

    return loss_fn


def _arrays(data):
    if isinstance(data, tuple):
        images, labels = data
    else:
        images, labels = data.images, data.labels
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=int)


def train(model: Sequential, data, cfg: TrainConfig, augment=None) -> TrainResult:
    """Plain SGD with per-epoch multiplicative learning-rate decay.

    ``data`` is an ``(images, labels)`` pair or has those attributes; ``augment(image, seed)``
    is applied to each sample independently every epoch when given.
    The input model is left untouched; a trained copy is returned.
    """
    images, labels = _arrays(data)
    if len(images) == 0:
        raise ValueError("train: empty dataset")
    if len({img.shape for img in images}) != 1:
        raise ValueError("train: images differ in shape")
    model = model.copy()
    history, epoch_losses, updates = [], [], 0
    current = 0
    for epoch, b, lr, idx in batch_schedule(len(images), cfg):
        if epoch != current:
            history.append(float(np.mean(epoch_losses)))
            epoch_losses, current = [], epoch
        batch = augment_batch(images[idx], idx, augment, cfg.seed, epoch)
        try:
            value = sgd_step(model, classification_loss(model, batch, labels[idx]), lr)
        except FloatingPointError as exc:
            raise NumericalError(f"training diverged at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
        if not math.isfinite(value):
            raise NumericalError(f"training diverged at epoch {epoch}, batch {b}", epoch, b)
        epoch_losses.append(value)
        updates += 1
    history.append(float(np.mean(epoch_losses)))
    return TrainResult(model, history, updates)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_proba(model: Sequential, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    out = []
    with ad.no_record():
        for start in range(0, len(images), batch_size):
            out.append(ad.softmax(model.forward(images[start : start + batch_size])).data)
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out)


@dataclass
class EvalReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    accuracy: float
    confusion: list[list[int]]  # confusion[true][predicted]

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
        }


def _ratio(a, b):
    return float(a) / float(b) if b else 0.0


def report_from_confusion(confusion) -> EvalReport:
    c = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(c)
    precision = [_ratio(tp[k], c[:, k].sum()) for k in range(len(c))]
    recall = [_ratio(tp[k], c[k, :].sum()) for k in range(len(c))]
    f1 = [_ratio(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return EvalReport(precision, recall, f1, _ratio(tp.sum(), c.sum()), c.tolist())


def confusion_matrix(labels, predictions, m: int) -> np.ndarray:
    c = np.zeros((m, m), dtype=np.int64)
    np.add.at(c, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return c


def evaluate(model: Sequential, data, threads: int = 1) -> EvalReport:
    """Argmax-decision precision/recall/F1 per class.

    Ties between classes resolve to the lower class index.
    """
    images, labels = _arrays(data)
    if labels.size and labels.max() >= model.num_classes:
        raise ValueError("evaluate: label exceeds model class count")
    m = model.num_classes

    def shard(idx):
        return confusion_matrix(labels[idx], predict_proba(model, images[idx]).argmax(axis=1), m)

    shards = np.array_split(np.arange(len(images)), max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(shard, shards))
    else:
        parts = [shard(s) for s in shards]
    return report_from_confusion(sum(parts, np.zeros((m, m), dtype=np.int64)))


# ---------------------------------------------------------------------------
# checkpoints: "DBL1", uint32 record count, then per record
# uint32 name length, utf-8 name, uint32 ndim, uint64 dims, float64 data (LE)
# ---------------------------------------------------------------------------

MAGIC = b"DBL1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Sequential, path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing data at byte {pos}")
    return params


def load_checkpoint(path, side: int = 32, num_classes: int | None = None) -> TinyCnn:
    params = read_checkpoint(path)
    m = num_classes or params["fc2.bias"].shape[0]
    model = TinyCnn(side=side, num_classes=m)
    if set(params) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match TinyCnn")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise CheckpointError(f"{path}: shape mismatch for {k}: {v.shape}")
    model.params = params
    return model
