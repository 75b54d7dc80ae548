"""Minimal dense/convolutional network on float64 with exact input gradients.

Layers are plain objects holding numpy parameter arrays. All public operations
are pure: a forward or gradient call never mutates the network, and every
source of randomness is an explicit seed. Batches are leading-axis stacks of
instances whose trailing shape equals ``Network.input_shape``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingError

__all__ = [
    "Dense",
    "Conv2D",
    "ReLU",
    "MaxPool2x2",
    "Flatten",
    "Softmax",
    "Network",
    "TrainConfig",
    "TrainReport",
    "forward",
    "forward_batch",
    "input_gradient",
    "input_gradient_batch",
    "guided_input_gradient",
    "backprop_output_gradient",
    "train",
    "save_network",
    "load_network",
    "fc_network",
    "conv_network",
]


def _as_f64(a):
    return np.asarray(a, dtype=np.float64)


class Dense:
    """Affine layer: y = x @ W.T + b, weight shape (out, in)."""

    kind = "dense"

    def __init__(self, weight, bias):
        weight = _as_f64(weight)
        bias = _as_f64(bias)
        if weight.ndim != 2 or bias.ndim != 1:
            raise DimensionError("dense expects 2-D weight and 1-D bias")
        if weight.shape[0] != bias.shape[0]:
            raise DimensionError(
                f"dense weight rows {weight.shape[0]} != bias length {bias.shape[0]}"
            )
        self.weight = weight
        self.bias = bias

    def output_shape(self, in_shape):
        if in_shape != (self.weight.shape[1],):
            raise DimensionError(f"dense expects input {(self.weight.shape[1],)}, got {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        if x.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"dense expects {self.weight.shape[1]} inputs, got {x.shape[1]}"
            )
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, gy, guided=False):
        gx = gy @ self.weight
        grads = {"weight": gy.T @ cache, "bias": gy.sum(axis=0)}
        return gx, grads

    def param_arrays(self):
        return {"weight": self.weight, "bias": self.bias}


class Conv2D:
    """2-D convolution, stride 1, valid padding. Kernels shape (oc, ic, kh, kw)."""

    kind = "conv2d"

    def __init__(self, kernels, bias):
        kernels = _as_f64(kernels)
        bias = _as_f64(bias)
        if kernels.ndim != 4 or bias.ndim != 1:
            raise DimensionError("conv2d expects 4-D kernels and 1-D bias")
        if kernels.shape[0] != bias.shape[0]:
            raise DimensionError(
                f"conv2d kernel count {kernels.shape[0]} != bias length {bias.shape[0]}"
            )
        self.kernels = kernels
        self.bias = bias

    def output_shape(self, in_shape):
        oc, ic, kh, kw = self.kernels.shape
        if len(in_shape) != 3 or in_shape[0] != ic:
            raise DimensionError(f"conv2d expects (channels={ic}, h, w), got {in_shape}")
        _, h, w = in_shape
        if h < kh or w < kw:
            raise DimensionError("conv2d input smaller than kernel")
        return (oc, h - kh + 1, w - kw + 1)

    def forward(self, x):
        oc, ic, kh, kw = self.kernels.shape
        n, xc, h, w = x.shape
        if xc != ic:
            raise DimensionError(f"conv2d expects {ic} channels, got {xc}")
        oh, ow = h - kh + 1, w - kw + 1
        y = np.zeros((n, oc, oh, ow))
        for a in range(kh):
            for b in range(kw):
                patch = x[:, :, a : a + oh, b : b + ow]
                y += np.einsum("nihw,oi->nohw", patch, self.kernels[:, :, a, b])
        y += self.bias[None, :, None, None]
        return y, x

    def backward(self, cache, gy, guided=False):
        oc, ic, kh, kw = self.kernels.shape
        n, _, oh, ow = gy.shape
        gx = np.zeros_like(cache)
        gk = np.zeros_like(self.kernels)
        for a in range(kh):
            for b in range(kw):
                patch = cache[:, :, a : a + oh, b : b + ow]
                gx[:, :, a : a + oh, b : b + ow] += np.einsum(
                    "nohw,oi->nihw", gy, self.kernels[:, :, a, b]
                )
                gk[:, :, a, b] = np.einsum("nohw,nihw->oi", gy, patch)
        grads = {"kernels": gk, "bias": gy.sum(axis=(0, 2, 3))}
        return gx, grads

    def param_arrays(self):
        return {"kernels": self.kernels, "bias": self.bias}


class ReLU:
    """Elementwise max(x, 0); subgradient at exactly 0 is 0."""

    kind = "relu"

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, gy, guided=False):
        gx = gy * (cache > 0)
        if guided:
            gx = gx * (gy > 0)
        return gx, None

    def param_arrays(self):
        return {}


class MaxPool2x2:
    """Non-overlapping 2x2 max pooling; spatial extents must be even."""

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise DimensionError(f"maxpool2x2 needs even (c, h, w), got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError("maxpool2x2 needs even spatial extents")
        oh, ow = h // 2, w // 2
        windows = (
            x.reshape(n, c, oh, 2, ow, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh, ow, 4)
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, gy, guided=False):
        (n, c, h, w), idx = cache
        oh, ow = h // 2, w // 2
        gwin = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, oh, ow, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return gx, None

    def param_arrays(self):
        return {}


class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, gy, guided=False):
        return gy.reshape(cache), None

    def param_arrays(self):
        return {}


class Softmax:
    """Evaluation-only normalization; never part of a trained stack."""

    kind = "softmax"

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return softmax(x), None

    def backward(self, cache, gy, guided=False):
        raise NotImplementedError("softmax layer is evaluation-only")

    def param_arrays(self):
        return {}


def softmax(z):
    """Numerically stable softmax over the last axis."""
    z = _as_f64(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Network:
    """Ordered layer stack mapping ``input_shape`` instances to class logits."""

    layers: list
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.class_count,):
            raise DimensionError(
                f"stack produces {shape}, expected ({self.class_count},) logits"
            )

    def freeze(self):
        """Mark all parameter arrays read-only; returns self."""
        for layer in self.layers:
            for arr in layer.param_arrays().values():
                arr.flags.writeable = False
        return self

    def clone(self):
        """Deep copy with writable parameters (clones of frozen nets are trainable)."""
        dup = copy.deepcopy(self)
        for layer in dup.layers:
            for arr in layer.param_arrays().values():
                arr.flags.writeable = True
        return dup


def _check_batch(net, xs):
    xs = _as_f64(xs)
    if xs.shape[1:] != net.input_shape:
        raise DimensionError(
            f"batch instances have shape {xs.shape[1:]}, expected {net.input_shape}"
        )
    return xs


def forward_batch(net, xs):
    """Logits for a batch, shape (n, class_count)."""
    x = _check_batch(net, xs)
    for layer in net.layers:
        x, _ = layer.forward(x)
    return x


def forward(net, x):
    """Logits for a single instance of ``net.input_shape``."""
    x = _as_f64(x)
    if x.shape != net.input_shape:
        raise DimensionError(f"input shape {x.shape}, expected {net.input_shape}")
    return forward_batch(net, x[None])[0]


def _forward_with_caches(net, xs):
    caches = []
    x = xs
    for layer in net.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def backprop_output_gradient(net, xs, gy, guided=False, want_params=False):
    """Backpropagate an arbitrary logits gradient ``gy`` to the input batch.

    Returns (logits, input_gradients) or, with ``want_params``, additionally a
    per-layer list of parameter-gradient dicts summed over the batch.
    """
    xs = _check_batch(net, xs)
    logits, caches = _forward_with_caches(net, xs)
    param_grads = [None] * len(net.layers)
    g = _as_f64(gy)
    for i in range(len(net.layers) - 1, -1, -1):
        g, grads = net.layers[i].backward(caches[i], g, guided=guided)
        param_grads[i] = grads
    if want_params:
        return logits, g, param_grads
    return logits, g


def _class_gradient_batch(net, xs, class_index, guided=False):
    xs = _check_batch(net, xs)
    if not 0 <= class_index < net.class_count:
        raise IndexError(f"class {class_index} out of range [0, {net.class_count})")
    gy = np.zeros((xs.shape[0], net.class_count))
    gy[:, class_index] = 1.0
    _, gx = backprop_output_gradient(net, xs, gy, guided=guided)
    return gx


def input_gradient_batch(net, xs, class_index):
    """d logits[class] / d input for every instance in the batch."""
    return _class_gradient_batch(net, xs, class_index, guided=False)


def input_gradient(net, x, class_index):
    """d logits[class] / d x, same shape as x."""
    return input_gradient_batch(net, _as_f64(x)[None], class_index)[0]


def guided_input_gradient(net, x, class_index):
    """Like input_gradient, but each ReLU also zeroes negative incoming signal."""
    return _class_gradient_batch(net, _as_f64(x)[None], class_index, guided=True)[0]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    loss_history: list = field(default_factory=list)


def _accuracy(net, xs, ys):
    if len(xs) == 0:
        return float("nan")
    preds = forward_batch(net, xs).argmax(axis=1)
    return float(np.mean(preds == ys))


def train(net, data, cfg):
    """Train a copy of ``net`` with cross-entropy; returns (frozen net, report).

    Deterministic given ``cfg.seed``: batch order and nothing else is random.
    Raises TrainingError with the epoch index if the loss becomes non-finite.
    """
    if any(layer.kind == "softmax" for layer in net.layers):
        raise ValueError("softmax layer must not appear in a trained stack")
    train_x = data.x[data.train_idx]
    train_y = data.y[data.train_idx]
    if len(train_x) == 0:
        raise ValueError("empty training split")
    if train_y.min() < 0 or train_y.max() >= net.class_count:
        raise ValueError("labels out of range for the network's class count")

    model = net.clone()
    rng = np.random.default_rng(cfg.seed)
    params = [layer.param_arrays() for layer in model.layers]
    adam_m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    adam_v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    adam_t = 0

    losses = []
    n = len(train_x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                logits, caches = _forward_with_caches(model, xb)
                probs = softmax(logits)
                picked = probs[np.arange(len(idx)), yb]
                loss = -np.mean(np.log(np.maximum(picked, 1e-300)))
            if not np.isfinite(loss):
                raise TrainingError("training loss became non-finite", epoch)
            epoch_loss += loss * len(idx)
            glogits = probs.copy()
            glogits[np.arange(len(idx)), yb] -= 1.0
            glogits /= len(idx)
            g = glogits
            grads = [None] * len(model.layers)
            for i in range(len(model.layers) - 1, -1, -1):
                g, grads[i] = model.layers[i].backward(caches[i], g)
            if cfg.optimizer == "adam":
                adam_t += 1
                b1, b2, eps = 0.9, 0.999, 1e-8
                for p, m, v, gr in zip(params, adam_m, adam_v, grads):
                    if not gr:
                        continue
                    for key in p:
                        m[key] = b1 * m[key] + (1 - b1) * gr[key]
                        v[key] = b2 * v[key] + (1 - b2) * gr[key] ** 2
                        mhat = m[key] / (1 - b1**adam_t)
                        vhat = v[key] / (1 - b2**adam_t)
                        p[key] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
            else:
                for p, gr in zip(params, grads):
                    if not gr:
                        continue
                    for key in p:
                        p[key] -= cfg.learning_rate * gr[key]
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise TrainingError("training loss became non-finite", epoch)
        losses.append(float(epoch_loss))

    report = TrainReport(
        train_accuracy=_accuracy(model, train_x, train_y),
        test_accuracy=_accuracy(model, data.x[data.test_idx], data.y[data.test_idx]),
        final_loss=losses[-1] if losses else float("nan"),
        loss_history=losses,
    )
    return model.freeze(), report


# --- initialization -------------------------------------------------------

def _uniform_init(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def fc_network(input_shape, hidden, class_count, seed=0):
    """Fully connected ReLU stack; flattens non-vector inputs first."""
    input_shape = tuple(input_shape)
    rng = np.random.default_rng(seed)
    layers = []
    if len(input_shape) > 1:
        layers.append(Flatten())
        width = int(np.prod(input_shape))
    else:
        width = input_shape[0]
    for h in hidden:
        layers.append(Dense(_uniform_init(rng, (h, width), width), _uniform_init(rng, (h,), width)))
        layers.append(ReLU())
        width = h
    layers.append(
        Dense(_uniform_init(rng, (class_count, width), width), _uniform_init(rng, (class_count,), width))
    )
    return Network(layers, input_shape, class_count)


def conv_network(input_shape, class_count, seed=0, filters=8, kernel=3, hidden=32):
    """Small conv stack: conv -> relu -> pool -> flatten -> dense -> relu -> dense."""
    input_shape = tuple(input_shape)
    if len(input_shape) != 3:
        raise DimensionError(f"conv_network expects (c, h, w) input, got {input_shape}")
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    fan_in = c * kernel * kernel
    layers = [
        Conv2D(
            _uniform_init(rng, (filters, c, kernel, kernel), fan_in),
            _uniform_init(rng, (filters,), fan_in),
        ),
        ReLU(),
    ]
    oh, ow = h - kernel + 1, w - kernel + 1
    if oh % 2 == 0 and ow % 2 == 0:
        layers.append(MaxPool2x2())
        oh, ow = oh // 2, ow // 2
    layers.append(Flatten())
    width = filters * oh * ow
    layers.append(Dense(_uniform_init(rng, (hidden, width), width), _uniform_init(rng, (hidden,), width)))
    layers.append(ReLU())
    layers.append(
        Dense(_uniform_init(rng, (class_count, hidden), hidden), _uniform_init(rng, (class_count,), hidden))
    )
    return Network(layers, input_shape, class_count)


# --- persistence ----------------------------------------------------------

FORMAT_TAG = "igbaselines-net-v1"


def save_network(net, path):
    """Write a network as an .npz archive; round-trip is bit-exact.

    Layout: a JSON manifest under key ``manifest`` (format tag, input shape,
    class count, ordered layer kinds) plus one float64 array per parameter
    named ``layer{i}_{param}``.
    """
    manifest = {
        "format": FORMAT_TAG,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": [layer.kind for layer in net.layers],
    }
    arrays = {"manifest": np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)}
    for i, layer in enumerate(net.layers):
        for name, arr in layer.param_arrays().items():
            arrays[f"layer{i}_{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path):
    with np.load(path) as archive:
        manifest = json.loads(archive["manifest"].tobytes().decode())
        if manifest.get("format") != FORMAT_TAG:
            raise ValueError(f"unrecognized model format {manifest.get('format')!r}")
        layers = []
        for i, kind in enumerate(manifest["layers"]):
            if kind == "dense":
                layers.append(Dense(archive[f"layer{i}_weight"], archive[f"layer{i}_bias"]))
            elif kind == "conv2d":
                layers.append(Conv2D(archive[f"layer{i}_kernels"], archive[f"layer{i}_bias"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool2x2":
                layers.append(MaxPool2x2())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
    net = Network(layers, tuple(manifest["input_shape"]), manifest["class_count"])
    return net.freeze()
