"""Desk-scale local training: datasets, a dense classifier and SGD.

Parameter matrices follow the model ordering used everywhere else: for each
layer a weight of shape ``(out, in)`` followed by its bias.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelParams, ParamMatrix, ShapeError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels outside [0, K)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def split(self, test_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Deterministic head/tail split (callers shuffle beforehand)."""
        n_test = int(round(len(self) * test_fraction))
        cut = len(self) - n_test
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    loss: str = "softmax_xent"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError("need at least an input and an output width")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss != "softmax_xent":
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def layers(self) -> int:
        return len(self.widths) - 1

    @property
    def num_matrices(self) -> int:
        return 2 * self.layers

    def shapes(self) -> list[tuple[int, ...]]:
        out = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            out += [(fan_out, fan_in), (fan_out,)]
        return out

    def check(self, model: ModelParams) -> None:
        if model.shapes != self.shapes():
            raise ShapeError(f"model shapes {model.shapes} do not match {self.shapes()}")

    def init(self, rng: np.random.Generator) -> ModelParams:
        """Uniform in +-1/sqrt(fan_in) for weights and biases alike."""
        mats = []
        j = 1
        for layer, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:]), start=1):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            mats.append(ParamMatrix(j, w.shape, w.ravel(), "weight", f"fc{layer}.weight"))
            mats.append(ParamMatrix(j + 1, b.shape, b, "bias", f"fc{layer}.bias"))
            j += 2
        return ModelParams(tuple(mats))


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


def _layers(model: ModelParams):
    arrays = model.arrays()
    return list(zip(arrays[0::2], arrays[1::2]))


def forward(spec: MlpSpec, model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs."""
    act, _ = _ACTIVATIONS[spec.activation]
    h = np.atleast_2d(x)
    layers = _layers(model)
    for k, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if k < len(layers) - 1:
            h = act(h)
    return h


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(spec: MlpSpec, model: ModelParams, x, y) -> float:
    logp = _log_softmax(forward(spec, model, x))
    y = np.atleast_1d(y)
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_gradients(spec: MlpSpec, model: ModelParams, x, y) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its exact gradient, one array per matrix."""
    act, dact = _ACTIVATIONS[spec.activation]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(y)
    layers = _layers(model)
    inputs, pre, post = [], [], []
    h = x
    for k, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = act(z) if k < len(layers) - 1 else z
        post.append(h)
    logp = _log_softmax(h)
    n = x.shape[0]
    value = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads = [delta.T @ inputs[k], delta.sum(axis=0)] + grads
        if k:
            delta = (delta @ w) * dact(pre[k - 1], post[k - 1])
    return value, grads


def local_train(
    spec: MlpSpec,
    model: ModelParams,
    part: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> tuple[ModelParams, int]:
    """Mini-batch SGD; returns the updated parameters and t = |part|."""
    spec.check(model)
    if epochs <= 0 or len(part) == 0:
        return model, len(part)
    params = model.arrays()
    current = model
    for _ in range(epochs):
        order = rng.permutation(len(part))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            value, grads = loss_and_gradients(spec, current, part.x[idx], part.y[idx])
            if not np.isfinite(value):
                raise TrainingError("loss diverged")
            params = [p - lr * g for p, g in zip(params, grads)]
            current = model.replace(params)
    return current, len(part)


def evaluate(spec: MlpSpec, model: ModelParams, test: Dataset) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class)."""
    spec.check(model)
    if len(test) == 0:
        return 0.0
    pred = np.argmax(forward(spec, model, test.x), axis=1)
    return float(np.mean(pred == test.y))


def partition(data: Dataset, C: int, rng: np.random.Generator) -> list[Dataset]:
    """Shuffle, then deal into C disjoint parts whose sizes differ by <= 1."""
    if C < 1 or C > len(data):
        raise ValueError(f"cannot split {len(data)} samples among {C} clients")
    order = rng.permutation(len(data))
    return [data.subset(chunk) for chunk in np.array_split(order, C)]


# -- data sources ------------------------------------------------------------------------

_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def synthetic_digits(n: int, rng: np.random.Generator, noise: float = 0.25, side: int = 8) -> Dataset:
    """8x8 renderings of 5x7 digit glyphs with random offset, contrast and noise."""
    templates = np.array([[[c == "1" for c in row] for row in _GLYPHS[d]] for d in range(10)], dtype=np.float64)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, side, side))
    dy = rng.integers(0, side - 7 + 1, size=n)
    dx = rng.integers(0, side - 5 + 1, size=n)
    contrast = rng.uniform(0.6, 1.0, size=n)
    for k in range(n):
        images[k, dy[k] : dy[k] + 7, dx[k] : dx[k] + 5] = templates[labels[k]] * contrast[k]
    dropout = rng.random(images.shape) < 0.1
    images = np.where(dropout, 0.0, images)
    images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images.reshape(n, -1), labels, 10)


def gaussian_blobs(n: int, dim: int, classes: int, rng: np.random.Generator, spread: float = 1.0) -> Dataset:
    centers = rng.normal(0.0, 3.0, size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(x, labels, classes)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path) -> np.ndarray:
    """Read an unsigned-byte IDX array (big-endian dimensions)."""
    path = Path(path)
    with _open(path) as f:
        head = f.read(4)
        if len(head) != 4:
            raise ValueError(f"{path}: truncated IDX header")
        zero, dtype, ndim = struct.unpack(">HBB", head)
        if zero != 0 or dtype != 0x08:
            raise ValueError(f"{path}: only unsigned-byte IDX files are supported")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        count = int(np.prod(dims))
        data = np.frombuffer(f.read(count), dtype=np.uint8)
    if data.size != count:
        raise ValueError(f"{path}: expected {count} bytes of data, got {data.size}")
    return data.reshape(dims)


def load_idx_dataset(images: str | Path, labels: str | Path, limit: int | None = None) -> Dataset:
    """Images scaled to [0, 1] and flattened, paired with their labels."""
    for path, magic in ((images, IDX_IMAGES_MAGIC), (labels, IDX_LABELS_MAGIC)):
        with _open(Path(path)) as f:
            got = struct.unpack(">I", f.read(4))[0]
        if got != magic:
            raise ValueError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    x = read_idx(images).astype(np.float64) / 255.0
    y = read_idx(labels).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("image and label counts differ")
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return Dataset(x.reshape(x.shape[0], -1), y, int(max(10, y.max() + 1)))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def stack(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), parts[0].num_classes)
