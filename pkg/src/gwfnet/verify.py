"""Self-checks run by ``gwfnet verify``: shapes, parameter counts, gradients, sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import build_preset
from .sampler import FrameSequence, aggregate_video, aggregate_window, gaussian_weights
from .sequence import LSTMParams, lstm_backward, lstm_classify

FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
DENOM_FLOOR = 1e-5

KTH_CHAIN = [(32, 52, 18, 16), (16, 26, 18, 16), (12, 22, 16, 16), (6, 11, 16, 16), (4, 9, 14, 32), (2, 7, 12, 32), (5376,), (256,)]
WEIZMANN_CHAIN = [(62, 46, 18, 16), (31, 23, 18, 16), (27, 19, 16, 16), (13, 9, 16, 16), (11, 7, 14, 32), (9, 5, 12, 32), (17280,), (256,)]
KTH_PARAMS = 1_437_712
WEIZMANN_PARAMS = 4_485_136
REFERENCE_WEIGHTS = np.array([0.13, 0.6, 1.0, 0.6, 0.13])


@dataclass
class Check:
    suite: str
    name: str
    measured: object
    expected: object
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.suite}\t{self.name}\tmeasured={self.measured}\texpected={self.expected}"


# -- finite differences -------------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _projection(rng, shape):
    return rng.standard_normal(shape)


# -- individual gradient checks -------------------------------------------------------------


def check_conv_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 5, 4, 2))
    layer = L.Conv3DLayer(rng.standard_normal((3, 3, 2, 2, 3)), rng.standard_normal(3))
    R = _projection(rng, (3, 3, 3, 3))
    loss = lambda: float(np.sum(L.conv3d_forward(layer, x) * R))
    gx, gk, gb = L.conv3d_backward(layer, x, R)
    return max(
        relative_error(gx, numerical_gradient(loss, x)),
        relative_error(gk, numerical_gradient(loss, layer.kernels)),
        relative_error(gb, numerical_gradient(loss, layer.bias)),
    )


def check_pool_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((7, 6, 3, 2))  # odd height exercises the dropped border
    layer = L.MaxPool3DLayer((2, 2, 1))
    y, rec = L.maxpool3d_forward(layer, x)
    R = _projection(rng, y.shape)
    loss = lambda: float(np.sum(L.maxpool3d_forward(layer, x)[0] * R))
    return relative_error(L.maxpool3d_backward(rec, R), numerical_gradient(loss, x))


def check_relu_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    R = _projection(rng, x.shape)
    loss = lambda: float(np.sum(L.relu(x) * R))
    return relative_error(L.relu_backward(x, R), numerical_gradient(loss, x))


def check_fc_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    layer = L.FCLayer(rng.standard_normal((4, 7)), rng.standard_normal(4))
    x = rng.standard_normal(7)
    R = _projection(rng, 4)
    loss = lambda: float(np.sum(L.fc_forward(layer, x) * R))
    gx, gw, gb = L.fc_backward(layer, x, R)
    return max(
        relative_error(gx, numerical_gradient(loss, x)),
        relative_error(gw, numerical_gradient(loss, layer.weights)),
        relative_error(gb, numerical_gradient(loss, layer.bias)),
    )


def check_dropout_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    layer = L.DropoutLayer(0.4)
    x = rng.standard_normal((6, 5))
    _, mask = L.dropout_forward(layer, x, "train", np.random.default_rng(seed + 1))
    R = _projection(rng, x.shape)
    loss = lambda: float(np.sum(L.dropout_forward(layer, x, "train", np.random.default_rng(seed + 1))[0] * R))
    return relative_error(L.dropout_backward(mask, R), numerical_gradient(loss, x))


def check_softmax_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal(10)
    _, grad = L.softmax_cross_entropy(logits, 3)
    loss = lambda: L.softmax_cross_entropy(logits, 3)[0]
    return relative_error(grad, numerical_gradient(loss, logits))


def check_model_gradients(seed: int = 0) -> float:
    """End-to-end check on the scaled-down ``tiny`` preset (8 x 8 x 10 input).

    Runs in eval mode and in train mode with replayed dropout masks.  Biases
    are set positive so ReLUs stay active; an all-zero gradient counts as a
    failure rather than a vacuous pass.
    """
    rng = np.random.default_rng(seed)
    model = build_preset("tiny", window_count=10, rng=seed, dtype=np.float64)
    for p in model.named_parameters().values():
        if p.ndim == 1:
            p[...] = 0.2 + 0.05 * rng.standard_normal(p.shape)
    x = rng.random((8, 8, 10))
    R = _projection(rng, model.feature_size)
    worst = 0.0
    for mode in ("eval", "train"):
        def loss():
            y, _ = model.forward(x, mode, np.random.default_rng(seed + 7))
            return float(np.sum(y * R))

        _, state = model.forward(x, mode, np.random.default_rng(seed + 7))
        grads = model.backward(state, R)
        for name, p in model.named_parameters().items():
            numeric = numerical_gradient(loss, p)
            if not np.any(numeric) and not np.any(grads[name]):
                return float("inf")
            worst = max(worst, relative_error(grads[name], numeric))
    return worst


def check_lstm_gradients(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    params = LSTMParams.create(7, 3, hidden_size=5, rng=rng)
    for k in ("bi", "bf", "bg", "bo"):
        params.arrays[k][...] = 0.1 * rng.standard_normal(5)
    xs = rng.standard_normal((4, 7))
    label = 1
    logits, trace = lstm_classify(params, xs)
    _, glogits = L.softmax_cross_entropy(logits, label)
    grads = lstm_backward(params, trace, glogits, need_input_grad=True)
    loss = lambda: L.softmax_cross_entropy(lstm_classify(params, xs)[0], label)[0]
    worst = relative_error(grads["input"], numerical_gradient(loss, xs))
    for name, p in params.arrays.items():
        worst = max(worst, relative_error(grads[name], numerical_gradient(loss, p)))
    return worst


GRADIENT_CHECKS = {
    "conv3d": check_conv_gradients,
    "maxpool3d": check_pool_gradients,
    "relu": check_relu_gradients,
    "fc": check_fc_gradients,
    "dropout": check_dropout_gradients,
    "softmax_cross_entropy": check_softmax_gradients,
    "network_tiny": check_model_gradients,
    "lstm_bptt": check_lstm_gradients,
}


# -- suites ------------------------------------------------------------------------------


def _chain(preset: str):
    model = build_preset(preset, init="zeros")
    return [shape for name, shape in model.spec.shape_chain() if "." not in name]


def suite_shapes() -> list[Check]:
    checks = []
    for preset, expected in (("kth", KTH_CHAIN), ("weizmann", WEIZMANN_CHAIN)):
        measured = _chain(preset)
        checks.append(Check("shapes", f"{preset} chain", measured, expected, measured == expected))
    return checks


def suite_params() -> list[Check]:
    checks = []
    for preset, expected in (("kth", KTH_PARAMS), ("weizmann", WEIZMANN_PARAMS)):
        measured = build_preset(preset, init="zeros").total_parameters()
        checks.append(Check("params", preset, measured, expected, measured == expected))
    return checks


def suite_gradients(seed: int = 0) -> list[Check]:
    checks = []
    for name, fn in GRADIENT_CHECKS.items():
        err = fn(seed)
        checks.append(Check("gradients", name, f"{err:.3g}", f"<= {GRAD_TOLERANCE:g}", err <= GRAD_TOLERANCE))
    return checks


def suite_sampler() -> list[Check]:
    checks = []
    w5 = gaussian_weights(5).weights
    dev = float(np.max(np.abs(w5 - REFERENCE_WEIGHTS)))
    checks.append(Check("sampler", "size-5 weights", np.round(w5, 4).tolist(), "[0.13, 0.6, 1, 0.6, 0.13] +/- 0.01", dev <= 0.01))
    worst = max(abs(float(np.sum(gaussian_weights(L_).normalized())) - 1.0) for L_ in range(3, 9))
    checks.append(Check("sampler", "normalized weights sum to 1 (L=3..8)", f"{worst:.3g}", "<= 1e-12", worst <= 1e-12))
    rng = np.random.default_rng(0)
    clip = aggregate_video(FrameSequence(rng.random((100, 6, 7))), 5, 100)
    checks.append(Check("sampler", "100 frames at L=5", clip.voxels.shape[2], 20, clip.voxels.shape[2] == 20))
    frame = rng.random((6, 7))
    worst = max(float(np.max(np.abs(aggregate_window(np.stack([frame] * L_), gaussian_weights(L_)) - frame))) for L_ in range(3, 9))
    checks.append(Check("sampler", "identical-frame window is a fixed point", f"{worst:.3g}", "<= 1e-12", worst <= 1e-12))
    return checks


SUITES = {
    "shapes": suite_shapes,
    "params": suite_params,
    "gradients": suite_gradients,
    "sampler": suite_sampler,
}


def run_suites(names) -> list[Check]:
    checks = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks
