"""Target networks: a width-scalable CWNet-family classifier.

The architecture is conv32-conv32-pool / conv64-conv64-pool / fc200-fc200 /
softmax head (all 3x3 kernels, 2x2 pooling) at scale 1; ``width_scale``
shrinks filter and unit counts so the same network runs at desk scale. An
input-standardization layer (frozen per-channel z-score affine) sits in
front of the first convolution; dropout between the fourth convolution and
its ReLU is config-gated and inactive outside training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import LabeledDataset, make_batches
from .errors import ConfigurationError, FormatError, NumericError, ShapeError
from .tensor import Tensor, load_tensor, no_grad, save_tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate < 0 or self.batch_size <= 0:
            raise ConfigurationError(f"invalid training config {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")


class _Context:
    __slots__ = ("training", "rng")

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.training = training
        self.rng = rng


class Standardize:
    """Frozen per-channel affine (x - mean) / std applied to network input."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.std = np.ones(channels)

    def set(self, mean, std) -> None:
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        if (self.std <= 0).any():
            raise ConfigurationError("standardization std must be positive")

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        inv = 1.0 / self.std
        scale = Tensor(inv.reshape(-1, 1, 1))
        shift = Tensor((-self.mean * inv).reshape(-1, 1, 1))
        return T.add(T.mul(x, scale), shift)

    @property
    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"kind": "standardize", "mean": list(self.mean), "std": list(self.std)}


class Conv:
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, padding: int = 1):
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel, kernel)))
        self.bias = Tensor(np.zeros(out_channels))
        self.padding = padding

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        out = T.conv2d(x, self.weight, stride=1, padding=self.padding)
        return T.add(out, T.reshape(self.bias, (-1, 1, 1)))

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def describe(self) -> dict:
        o, c, kh, kw = self.weight.shape
        return {"kind": "conv", "filters": o, "in_channels": c, "kernel": kh, "padding": self.padding}


class ReLU:
    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        return T.relu(x)

    @property
    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"kind": "relu"}


class MaxPool:
    def __init__(self, window: int = 2):
        self.window = window

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        return T.maxpool2d(x, self.window)

    @property
    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"kind": "maxpool", "window": self.window}


class Dropout:
    """Active only while training and enabled; identity otherwise."""

    def __init__(self, rate: float, enabled: bool):
        self.rate = rate
        self.enabled = enabled

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        if self.enabled and ctx.training and ctx.rng is not None and self.rate > 0:
            return T.dropout(x, self.rate, ctx.rng)
        return x

    @property
    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"kind": "dropout", "rate": self.rate, "enabled": self.enabled}


class Flatten:
    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))

    @property
    def params(self) -> list[Tensor]:
        return []

    def describe(self) -> dict:
        return {"kind": "flatten"}


class Dense:
    def __init__(self, in_features: int, out_features: int, head: bool = False):
        self.weight = Tensor(np.zeros((in_features, out_features)))
        self.bias = Tensor(np.zeros(out_features))
        self.head = head

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def describe(self) -> dict:
        i, o = self.weight.shape
        return {"kind": "softmax_head" if self.head else "dense", "units": o, "in_features": i}


class Network:
    """Ordered layers with a consistent shape chain from input to logits."""

    def __init__(self, layers: list, input_shape: tuple[int, int, int], num_classes: int,
                 width_scale: float = 1.0):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.width_scale = width_scale
        self.seed: int | None = None
        self.mode: str = "untrained-random"

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def standardize(self) -> Standardize:
        return self.layers[0]

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expected = self.input_shape
        got = x.shape[-3:]
        if got != expected:
            raise ShapeError(f"input shape {got} does not match network input {expected}")
        ctx = _Context(training=training, rng=rng)
        out = x
        for layer in self.layers:
            out = layer.forward(out, ctx)
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag

    def set_input_standardization(self, ds: LabeledDataset) -> None:
        """Fit the frozen z-score layer on a preprocessed training set."""
        arr = ds.images.array
        mean = arr.mean(axis=(0, 2, 3))
        std = arr.std(axis=(0, 2, 3))
        std = np.where(std < 1e-8, 1.0, std)
        self.standardize.set(mean, std)


def _scaled(count: int, width_scale: float) -> int:
    return max(1, round(count * width_scale))


def build_cwnet(input_shape: tuple[int, int, int], num_classes: int = 10,
                width_scale: float = 1.0, dropout_enabled: bool = False,
                dropout_rate: float = 0.5) -> Network:
    """CWNet at the given spatial scale; filter/unit counts scale with width_scale.

    The spatial extent must survive two 2x2 pools (divisible by 4); the first
    fully connected layer's fan-in follows from the shape chain.
    """
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ShapeError(f"input extent {h}x{w} must be divisible by 4 (two 2x2 pools)")
    c1 = c2 = _scaled(32, width_scale)
    c3 = c4 = _scaled(64, width_scale)
    f1 = f2 = _scaled(200, width_scale)
    feat = c4 * (h // 4) * (w // 4)
    layers = [
        Standardize(c),
        Conv(c, c1), ReLU(),
        Conv(c1, c2), ReLU(),
        MaxPool(2),
        Conv(c2, c3), ReLU(),
        Conv(c3, c4), Dropout(dropout_rate, dropout_enabled), ReLU(),
        MaxPool(2),
        Flatten(),
        Dense(feat, f1), ReLU(),
        Dense(f1, f2), ReLU(),
        Dense(f2, num_classes, head=True),
    ]
    return Network(layers, input_shape, num_classes, width_scale)


def init_weights(net: Network, seed: int, mode: str = "trained-init") -> Network:
    """Fan-in-scaled uniform init (bound sqrt(1/fan_in)), zero biases.

    Both the to-be-trained and untrained-random conditions use the same
    initializer; ``mode`` only tags the network.
    """
    if mode not in ("trained-init", "untrained-random"):
        raise ConfigurationError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng([int(seed), 0x11A7])
    for layer in net.layers:
        if isinstance(layer, Conv):
            o, ci, kh, kw = layer.weight.shape
            bound = (1.0 / (ci * kh * kw)) ** 0.5
            layer.weight.array[...] = rng.uniform(-bound, bound, layer.weight.shape)
            layer.bias.array[...] = 0.0
        elif isinstance(layer, Dense):
            fan_in = layer.weight.shape[0]
            bound = (1.0 / fan_in) ** 0.5
            layer.weight.array[...] = rng.uniform(-bound, bound, layer.weight.shape)
            layer.bias.array[...] = 0.0
    net.seed = int(seed)
    net.mode = mode
    return net


def train_sgd(net: Network, ds: LabeledDataset, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Classical-momentum SGD (v <- m v + g; theta <- theta - lr v).

    Returns the trained network and the per-epoch mean training loss.
    """
    if ds.images.shape[1:] != net.input_shape:
        raise ShapeError(
            f"dataset shape {ds.images.shape[1:]} does not match network input {net.input_shape}"
        )
    params = net.params
    net.set_requires_grad(True)
    velocity = [np.zeros_like(p.array) for p in params]
    dropout_rng = np.random.default_rng([cfg.seed, 0xD0])
    history: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_losses: list[float] = []
        for batch_index, batch in enumerate(make_batches(ds, cfg.batch_size, cfg.seed, epoch)):
            x = Tensor(ds.images.array[batch])
            labels = ds.labels[batch]
            loss = T.softmax_cross_entropy(net.forward(x, training=True, rng=dropout_rng), labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training diverged at epoch {epoch}, batch {batch_index}")
            T.backward(loss)
            for p, v in zip(params, velocity):
                grad = p.grad if p.grad is not None else 0.0
                v *= cfg.momentum
                v += grad
                p.array -= cfg.learning_rate * v
                p.zero_grad()
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    net.set_requires_grad(False)
    return net, history


def predict_batch(net: Network, images) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions (ties: lowest class index) and raw logits."""
    with no_grad():
        logits = net.forward(images).array
    return logits.argmax(axis=1), logits


def accuracy(net: Network, ds: LabeledDataset, mapping=None, batch_size: int = 200) -> float:
    """Fraction of samples predicted as their (optionally mapped) label."""
    targets = ds.labels
    if mapping is not None:
        lut = np.asarray(getattr(mapping, "map", mapping), dtype=np.int64)
        targets = lut[ds.labels]
    hits = 0
    for start in range(0, len(ds), batch_size):
        stop = min(start + batch_size, len(ds))
        pred, _ = predict_batch(net, ds.images.array[start:stop])
        hits += int((pred == targets[start:stop]).sum())
    return hits / len(ds)


# -- checkpointing ------------------------------------------------------------------


def save_model(net: Network, directory) -> None:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    param_files = []
    for i, p in enumerate(net.params):
        fname = f"p{i:03d}.tnsr"
        save_tensor(p, directory / "params" / fname)
        param_files.append(fname)
    manifest = {
        "format": "reprolab-model-v1",
        "kind": "cwnet",
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "width_scale": net.width_scale,
        "seed": net.seed,
        "mode": net.mode,
        "layers": [layer.describe() for layer in net.layers],
        "params": param_files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_model(directory) -> Network:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "reprolab-model-v1":
        raise FormatError(f"{directory}: not a model checkpoint")
    dropout = next(l for l in manifest["layers"] if l["kind"] == "dropout")
    net = build_cwnet(
        tuple(manifest["input_shape"]),
        num_classes=manifest["num_classes"],
        width_scale=manifest["width_scale"],
        dropout_enabled=dropout["enabled"],
        dropout_rate=dropout["rate"],
    )
    std = next(l for l in manifest["layers"] if l["kind"] == "standardize")
    net.standardize.set(std["mean"], std["std"])
    net.seed = manifest.get("seed")
    net.mode = manifest.get("mode", "untrained-random")
    params = net.params
    if len(params) != len(manifest["params"]):
        raise FormatError(f"{directory}: expected {len(params)} parameter files")
    for p, fname in zip(params, manifest["params"]):
        loaded = load_tensor(directory / "params" / fname)
        if loaded.shape != p.shape:
            raise FormatError(f"{directory}/{fname}: shape {loaded.shape}, expected {p.shape}")
        p.array[...] = loaded.array
    return net
