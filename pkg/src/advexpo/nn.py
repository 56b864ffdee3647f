"""Minimal reverse-mode differentiable CNN classifiers.

Everything here is numpy. Layers expose forward(x) -> (out, cache) and
backward(cache, dout) -> (dx, param_grads); no state is written during
forward, so a trained model can be shared read-only across concurrent
attack workers. Parameters are stored float32 (the on-disk format), all
arithmetic runs in float64, and gradients reach the input image exactly,
which is what lets attack objectives chain through the fusion operators.

Three small architectures are provided for cross-model transfer studies:
  a: two 3x3 conv blocks, then a dense head
  b: three conv blocks with mixed kernel sizes (5x5 then 3x3), dense head
  c: two depthwise-separable blocks (depthwise 3x3 + pointwise 1x1),
     dense head
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .image import DimensionError, as_image


class ModelFormatError(ValueError):
    """Corrupt or incompatible model file."""


def _sliding_windows(x, kh, kw):
    """Zero-padded same-size (B, H, W, C, kh, kw) windows of (B, H, W, C)."""
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="constant")
    return np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))


def _fold_windows(dcols, out_hw, kh, kw):
    """Transpose of _sliding_windows: scatter (B,H,W,C,kh,kw) back to (B,H,W,C)."""
    b, h, w, c = dcols.shape[:4]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    acc = np.zeros((b, h + 2 * ph, w + 2 * pw, c))
    for i in range(kh):
        for j in range(kw):
            acc[:, i : i + h, j : j + w, :] += dcols[:, :, :, :, i, j]
    return acc[:, ph : ph + out_hw[0], pw : pw + out_hw[1], :]


class Conv2d:
    """Same-padding stride-1 convolution, He-initialized."""

    def __init__(self, kh, kw, c_in, c_out, rng):
        std = np.sqrt(2.0 / (kh * kw * c_in))
        self.weight = (rng.standard_normal((kh, kw, c_in, c_out)) * std).astype(
            np.float32
        )
        self.bias = np.zeros(c_out, dtype=np.float32)

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        kh, kw, c_in, c_out = self.weight.shape
        windows = _sliding_windows(x, kh, kw)
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c_in)
        wmat = self.weight.astype(np.float64).reshape(kh * kw * c_in, c_out)
        out = cols @ wmat + self.bias.astype(np.float64)
        b, h, w = x.shape[:3]
        return out.reshape(b, h, w, c_out), (x.shape, cols, wmat)

    def backward(self, cache, dout):
        x_shape, cols, wmat = cache
        kh, kw, c_in, c_out = self.weight.shape
        dmat = dout.reshape(-1, c_out)
        dw = (cols.T @ dmat).reshape(kh, kw, c_in, c_out)
        db = dmat.sum(axis=0)
        dcols = (dmat @ wmat.T).reshape(
            x_shape[0], x_shape[1], x_shape[2], kh, kw, c_in
        )
        dx = _fold_windows(dcols.transpose(0, 1, 2, 5, 3, 4), x_shape[1:3], kh, kw)
        return dx, [dw, db]


class DepthwiseConv2d:
    """Per-channel same-padding convolution (no cross-channel mixing)."""

    def __init__(self, kh, kw, channels, rng):
        std = np.sqrt(2.0 / (kh * kw))
        self.weight = (rng.standard_normal((kh, kw, channels)) * std).astype(
            np.float32
        )
        self.bias = np.zeros(channels, dtype=np.float32)

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        kh, kw, _ = self.weight.shape
        windows = _sliding_windows(x, kh, kw)
        w64 = self.weight.astype(np.float64)
        out = np.einsum("bhwckl,klc->bhwc", windows, w64, optimize=True)
        out += self.bias.astype(np.float64)
        return out, (x.shape, windows)

    def backward(self, cache, dout):
        x_shape, windows = cache
        kh, kw, _ = self.weight.shape
        dw = np.einsum("bhwckl,bhwc->klc", windows, dout, optimize=True)
        db = dout.sum(axis=(0, 1, 2))
        w64 = self.weight.astype(np.float64)
        dcols = dout[:, :, :, :, None, None] * w64.transpose(2, 0, 1)[None, None, None]
        dx = _fold_windows(dcols, x_shape[1:3], kh, kw)
        return dx, [dw, db]


class ReLU:
    params = []

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, dout):
        return np.where(cache, dout, 0.0), []


class MaxPool2x2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties resolve to the first position in window scan order, so the
    gradient routes to exactly one input per window.
    """

    params = []

    def forward(self, x):
        b, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        xc = x[:, : 2 * h2, : 2 * w2, :]
        tiles = (
            xc.reshape(b, h2, 2, w2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, h2, w2, c, 4)
        )
        idx = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, dout):
        x_shape, idx = cache
        b, h, w, c = x_shape
        h2, w2 = h // 2, w // 2
        dtiles = np.zeros((b, h2, w2, c, 4))
        np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, : 2 * h2, : 2 * w2, :] = (
            dtiles.reshape(b, h2, w2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, 2 * h2, 2 * w2, c)
        )
        return dx, []


class GlobalAvgPool:
    params = []

    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, cache, dout):
        b, h, w, c = cache
        return np.broadcast_to(dout[:, None, None, :], cache) / (h * w), []


class Dense:
    def __init__(self, n_in, n_out, rng):
        std = np.sqrt(2.0 / n_in)
        self.weight = (rng.standard_normal((n_in, n_out)) * std).astype(np.float32)
        self.bias = np.zeros(n_out, dtype=np.float32)

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        w64 = self.weight.astype(np.float64)
        return x @ w64 + self.bias.astype(np.float64), (x, w64)

    def backward(self, cache, dout):
        x, w64 = cache
        return dout @ w64.T, [x.T @ dout, dout.sum(axis=0)]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean -log p_y with the log-sum-exp shift; returns (loss, dlogits)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


class Classifier:
    """An ordered layer stack ending in a dense head; softmax on output."""

    def __init__(self, arch_id, input_shape, num_classes, layers):
        self.arch_id = arch_id
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.layers = layers

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> "Classifier":
        clone = build_classifier(self.arch_id, self.input_shape, self.num_classes, 0)
        for dst, src in zip(clone.params, self.params):
            dst[...] = src
        return clone


def _arch_a(c_in, num_classes, rng):
    return [
        Conv2d(3, 3, c_in, 8, rng),
        ReLU(),
        MaxPool2x2(),
        Conv2d(3, 3, 8, 16, rng),
        ReLU(),
        MaxPool2x2(),
        GlobalAvgPool(),
        Dense(16, num_classes, rng),
    ]


def _arch_b(c_in, num_classes, rng):
    return [
        Conv2d(5, 5, c_in, 8, rng),
        ReLU(),
        MaxPool2x2(),
        Conv2d(3, 3, 8, 16, rng),
        ReLU(),
        MaxPool2x2(),
        Conv2d(3, 3, 16, 24, rng),
        ReLU(),
        MaxPool2x2(),
        GlobalAvgPool(),
        Dense(24, num_classes, rng),
    ]


def _arch_c(c_in, num_classes, rng):
    return [
        DepthwiseConv2d(3, 3, c_in, rng),
        Conv2d(1, 1, c_in, 8, rng),
        ReLU(),
        MaxPool2x2(),
        DepthwiseConv2d(3, 3, 8, rng),
        Conv2d(1, 1, 8, 16, rng),
        ReLU(),
        MaxPool2x2(),
        GlobalAvgPool(),
        Dense(16, num_classes, rng),
    ]


_ARCHS = {"a": _arch_a, "b": _arch_b, "c": _arch_c}


def build_classifier(arch_id, input_shape, num_classes, seed) -> Classifier:
    if arch_id not in _ARCHS:
        raise ValueError(f"unknown architecture {arch_id!r}; have {sorted(_ARCHS)}")
    h, w, c = input_shape
    rng = np.random.default_rng(seed)
    layers = _ARCHS[arch_id](c, num_classes, rng)
    return Classifier(arch_id, (h, w, c), num_classes, layers)


def _forward_logits(model, x):
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def _backward_input(model, caches, dlogits):
    grad = dlogits
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grad, _ = layer.backward(cache, grad)
    return grad


def forward_batch(model, images) -> np.ndarray:
    """Class probabilities, shape (B, num_classes); rows sum to one."""
    x = np.asarray(images, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(
            f"input shape {x.shape[1:]} != model input {model.input_shape}"
        )
    logits, _ = _forward_logits(model, x)
    return softmax(logits)


def forward(model, img) -> np.ndarray:
    """Probabilities for a single (H, W, C) image."""
    img = as_image(img)
    return forward_batch(model, img[None])[0]


def predict(model, img) -> int:
    return int(np.argmax(forward(model, img)))


def predict_batch(model, images) -> np.ndarray:
    return np.argmax(forward_batch(model, images), axis=1)


def loss_grad_probs(model, img, label):
    """Cross-entropy loss, its gradient w.r.t. the input image, and probs."""
    img = as_image(img)
    if img.shape != model.input_shape:
        raise DimensionError(f"input {img.shape} != model input {model.input_shape}")
    if not 0 <= label < model.num_classes:
        raise ValueError(f"label {label} out of range")
    logits, caches = _forward_logits(model, img[None])
    loss, dlogits = cross_entropy(logits, np.array([label]))
    grad = _backward_input(model, caches, dlogits)
    return float(loss), grad[0], softmax(logits)[0]


def loss_and_input_gradient(model, img, label):
    """-log p_label and its exact gradient at every input pixel."""
    loss, grad, _ = loss_grad_probs(model, img, label)
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"bad training config {self}")


def train(model, samples, cfg: TrainConfig) -> Classifier:
    """SGD with momentum over shuffled mini-batches; input is not mutated.

    Deterministic: the same (model, samples, cfg) always produces bitwise
    identical parameters.
    """
    if not samples:
        raise ValueError("empty training set")
    trained = model.copy()
    x_all = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    y_all = np.array([s.label for s in samples])
    if x_all.shape[1:] != model.input_shape:
        raise DimensionError(
            f"data shape {x_all.shape[1:]} != model input {model.input_shape}"
        )
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in trained.params]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            logits, caches = _forward_logits(trained, x_all[batch])
            _, dlogits = cross_entropy(logits, y_all[batch])
            grads = []
            grad = dlogits
            for layer, cache in zip(reversed(trained.layers), reversed(caches)):
                grad, pgrads = layer.backward(cache, grad)
                grads = pgrads + grads
            for p, v, g in zip(trained.params, velocity, grads):
                v *= cfg.momentum
                v += g.astype(np.float32)
                p -= cfg.learning_rate * v
    return trained


def evaluate_accuracy(model, samples) -> float:
    x = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    y = np.array([s.label for s in samples])
    return float(np.mean(predict_batch(model, x) == y))


# Model file: little-endian header then raw float32 parameter blobs.
#   magic    4s  b"AXPM"
#   version  u32 1
#   arch     8s  architecture id, ascii, space padded
#   height, width, channels, classes  u32 x4
#   n_arrays u32
#   per array: ndim u32 then ndim u32 dims
#   then each array as float32, C-order, in model parameter order.
_MAGIC = b"AXPM"
_VERSION = 1


def save_model(model, path) -> None:
    arch = model.arch_id.encode("ascii").ljust(8)[:8]
    h, w, c = model.input_shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(arch)
        fh.write(struct.pack("<IIIII", h, w, c, model.num_classes, len(model.params)))
        for p in model.params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> Classifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:4] != _MAGIC:
            raise ModelFormatError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != _VERSION:
            raise ModelFormatError(f"{path}: unsupported version {version}")
        arch = blob[8:16].decode("ascii").strip()
        h, w, c, classes, n_arrays = struct.unpack_from("<IIIII", blob, 16)
        if arch not in _ARCHS:
            raise ModelFormatError(f"{path}: unknown architecture {arch!r}")
        offset = 36
        shapes = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            shapes.append(dims)
        model = build_classifier(arch, (h, w, c), classes, seed=0)
        if len(shapes) != len(model.params):
            raise ModelFormatError(f"{path}: parameter count mismatch for {arch!r}")
        for p, shape in zip(model.params, shapes):
            if p.shape != shape:
                raise ModelFormatError(
                    f"{path}: header/architecture mismatch: {shape} vs {p.shape}"
                )
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            if arr.size != count:
                raise ModelFormatError(f"{path}: truncated parameter blob")
            offset += 4 * count
            p[...] = arr.reshape(shape)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: truncated or corrupt model file") from exc
    return model
