"""Differentiable building blocks with explicit forward and backward passes.

Activations are laid out channels-last: ``(..., h, w, t, c)``.  Any leading
axes are treated as a batch, so the same code serves single clips and
minibatches.  Convolutions are valid (no padding), stride 1, and computed as
cross-correlation; pooling windows are disjoint and trailing remainders are
dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(rng)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- parameterised layers ---------------------------------------------------


@dataclass
class Conv3DLayer:
    kernels: np.ndarray  # kh x kw x kt x c_in x c_out
    bias: np.ndarray
    name: str = "conv"

    @classmethod
    def create(cls, kernel_size, in_channels, out_channels, rng=None, name="conv", dtype=np.float64, init="glorot"):
        kh, kw, kt = kernel_size
        shape = (kh, kw, kt, in_channels, out_channels)
        if init == "zeros" or rng is None:
            kernels = np.zeros(shape, dtype=dtype)
        else:
            receptive = kh * kw * kt
            kernels = glorot_uniform(rng, shape, receptive * in_channels, receptive * out_channels, dtype)
        return cls(kernels, np.zeros(out_channels, dtype=dtype), name)

    @property
    def kernel_size(self) -> tuple[int, int, int]:
        return tuple(self.kernels.shape[:3])

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[3]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[4]

    def params(self) -> dict[str, np.ndarray]:
        return {"kernel": self.kernels, "bias": self.bias}

    def num_parameters(self) -> int:
        return self.kernels.size + self.bias.size

    def output_shape(self, in_shape):
        h, w, t, c = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        kh, kw, kt = self.kernel_size
        if h < kh or w < kw or t < kt:
            raise ShapeError(f"{self.name}: input {(h, w, t)} smaller than kernel {(kh, kw, kt)}")
        return (h - kh + 1, w - kw + 1, t - kt + 1, self.out_channels)


@dataclass
class FCLayer:
    weights: np.ndarray  # out x in
    bias: np.ndarray
    name: str = "fc"

    @classmethod
    def create(cls, in_features, out_features, rng=None, name="fc", dtype=np.float64, init="glorot"):
        shape = (out_features, in_features)
        if init == "zeros" or rng is None:
            weights = np.zeros(shape, dtype=dtype)
        else:
            weights = glorot_uniform(rng, shape, in_features, out_features, dtype)
        return cls(weights, np.zeros(out_features, dtype=dtype), name)

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weights, "bias": self.bias}

    def num_parameters(self) -> int:
        return self.weights.size + self.bias.size

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expected input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)


# -- parameter-free layers ----------------------------------------------------


@dataclass
class MaxPool3DLayer:
    receptive_field: tuple[int, int, int] = (2, 2, 1)
    name: str = "pool"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def num_parameters(self) -> int:
        return 0

    def output_shape(self, in_shape):
        h, w, t, c = in_shape
        ph, pw, pt = self.receptive_field
        if h < ph or w < pw or t < pt:
            raise ShapeError(f"{self.name}: input {(h, w, t)} smaller than pool {(ph, pw, pt)}")
        return (h // ph, w // pw, t // pt, c)


@dataclass
class DropoutLayer:
    rate: float = 0.4
    name: str = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def num_parameters(self) -> int:
        return 0

    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass
class ReLULayer:
    name: str = "relu"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def num_parameters(self) -> int:
        return 0

    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass
class FlattenLayer:
    name: str = "flatten"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def num_parameters(self) -> int:
        return 0

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


# -- convolution ----------------------------------------------------------------


def _conv_geometry(layer: Conv3DLayer, x: np.ndarray):
    if x.ndim < 4:
        raise ShapeError(f"{layer.name}: input must be (..., h, w, t, c), got shape {x.shape}")
    oh, ow, ot, _ = layer.output_shape(x.shape[-4:])
    return oh, ow, ot


def conv3d_forward(layer: Conv3DLayer, x: np.ndarray) -> np.ndarray:
    """Valid 3D cross-correlation plus per-channel bias."""
    oh, ow, ot = _conv_geometry(layer, x)
    kh, kw, kt = layer.kernel_size
    lead = x.shape[:-4]
    cin, cout = layer.in_channels, layer.out_channels
    out = np.zeros((int(np.prod(lead, dtype=np.int64)) * oh * ow * ot, cout), dtype=np.result_type(x, layer.kernels))
    # fixed accumulation order over kernel offsets keeps runs bit-identical
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                patch = x[..., i:i + oh, j:j + ow, k:k + ot, :].reshape(-1, cin)
                out += patch @ layer.kernels[i, j, k]
    out += layer.bias
    return out.reshape(lead + (oh, ow, ot, cout))


def conv3d_backward(layer: Conv3DLayer, x: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_x, grad_kernels, grad_bias)``; grads are summed over any batch axes.

    ``grad_x`` is ``None`` when ``need_input_grad`` is false.
    """
    oh, ow, ot = _conv_geometry(layer, x)
    expected = x.shape[:-4] + (oh, ow, ot, layer.out_channels)
    if grad_out.shape != expected:
        raise ShapeError(f"{layer.name}: grad_out shape {grad_out.shape}, expected {expected}")
    kh, kw, kt = layer.kernel_size
    cin, cout = layer.in_channels, layer.out_channels
    g = grad_out.reshape(-1, cout)
    grad_bias = g.sum(axis=0)
    grad_kernels = np.zeros_like(layer.kernels)
    grad_x = np.zeros_like(x) if need_input_grad else None
    patch_shape = x.shape[:-4] + (oh, ow, ot, cin)
    for i in range(kh):
        for j in range(kw):
            for k in range(kt):
                patch = x[..., i:i + oh, j:j + ow, k:k + ot, :].reshape(-1, cin)
                grad_kernels[i, j, k] = patch.T @ g
                if need_input_grad:
                    grad_x[..., i:i + oh, j:j + ow, k:k + ot, :] += (g @ layer.kernels[i, j, k].T).reshape(patch_shape)
    return grad_x, grad_kernels, grad_bias


# -- pooling --------------------------------------------------------------------


@dataclass
class PoolRecord:
    input_shape: tuple[int, ...]
    receptive_field: tuple[int, int, int]
    argmax: np.ndarray  # (..., oh, ow, ot, c) index into the flattened window


def _windows(x: np.ndarray, pool):
    ph, pw, pt = pool
    lead = x.shape[:-4]
    h, w, t, c = x.shape[-4:]
    oh, ow, ot = h // ph, w // pw, t // pt
    n = len(lead)
    cropped = x[..., :oh * ph, :ow * pw, :ot * pt, :]
    blocks = cropped.reshape(lead + (oh, ph, ow, pw, ot, pt, c))
    # -> (..., oh, ow, ot, c, ph, pw, pt)
    order = tuple(range(n)) + tuple(n + a for a in (0, 2, 4, 6, 1, 3, 5))
    return blocks.transpose(order).reshape(lead + (oh, ow, ot, c, ph * pw * pt)), order


def maxpool3d_forward(layer: MaxPool3DLayer, x: np.ndarray):
    """Disjoint-window max pooling; returns ``(y, record)``.

    Ties resolve to the first position of the window in row-major order.
    """
    if x.ndim < 4:
        raise ShapeError(f"{layer.name}: input must be (..., h, w, t, c), got shape {x.shape}")
    layer.output_shape(x.shape[-4:])
    win, _ = _windows(x, layer.receptive_field)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolRecord(tuple(x.shape), tuple(layer.receptive_field), idx)


def maxpool3d_backward(record: PoolRecord, grad_out: np.ndarray) -> np.ndarray:
    """Route every output gradient to its recorded argmax position."""
    if grad_out.shape != record.argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pool record {record.argmax.shape}")
    ph, pw, pt = record.receptive_field
    lead = record.input_shape[:-4]
    n = len(lead)
    oh, ow, ot, c = record.argmax.shape[-4:]
    win = np.zeros(record.argmax.shape + (ph * pw * pt,), dtype=grad_out.dtype)
    np.put_along_axis(win, record.argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(lead + (oh, ow, ot, c, ph, pw, pt))
    # inverse of the forward permutation
    order = tuple(range(n)) + tuple(n + a for a in (0, 4, 1, 5, 2, 6, 3))
    blocks = win.transpose(order).reshape(lead + (oh * ph, ow * pw, ot * pt, c))
    grad_x = np.zeros(record.input_shape, dtype=grad_out.dtype)
    grad_x[..., :oh * ph, :ow * pw, :ot * pt, :] = blocks
    return grad_x


# -- elementwise ----------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu: grad_out shape {grad_out.shape} does not match input {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dropout_forward(layer: DropoutLayer, x: np.ndarray, mode: str, rng: np.random.Generator | None):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` is ``None`` in eval mode."""
    if mode == "eval" or layer.rate == 0.0:
        return x, None
    if mode != "train":
        raise DomainError(f"unknown mode {mode!r}")
    if rng is None:
        raise DomainError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= layer.rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - layer.rate)
    return x * mask, mask


def dropout_apply(layer: DropoutLayer, x: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
    return dropout_forward(layer, x, mode, rng)[0]


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


# -- fully connected --------------------------------------------------------------


def fc_forward(layer: FCLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"{layer.name}: expected {layer.in_features} inputs, got {x.shape[-1]}")
    return x @ layer.weights.T + layer.bias


def fc_backward(layer: FCLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` summed over any batch axes."""
    if x.shape[-1] != layer.in_features or grad_out.shape != x.shape[:-1] + (layer.out_features,):
        raise ShapeError(f"{layer.name}: incompatible x {x.shape} / grad_out {grad_out.shape}")
    g = grad_out.reshape(-1, layer.out_features)
    x2 = x.reshape(-1, layer.in_features)
    grad_x = grad_out @ layer.weights
    return grad_x, g.T @ x2, g.sum(axis=0)


# -- loss -------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label):
    """Stabilised cross-entropy.

    A single logit vector with an integer label returns ``(loss, grad)``.  For a
    batch ``(n, C)`` with ``n`` labels the loss and gradient are averaged.
    """
    logits = np.asarray(logits)
    labels = np.atleast_1d(np.asarray(label))
    batched = logits.ndim == 2
    z = logits if batched else logits[None]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    C = z.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise DomainError(f"label out of range for {C} classes: {labels.tolist()}")
    shifted = z - np.max(z, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1
    if batched:
        n = z.shape[0]
        return float(np.mean(losses)), grad / n
    return float(losses[0]), grad[0]
