"""Single-layer LSTM sequence classifier over per-neighbourhood CNN features.

Forget-gate LSTM without peepholes, zero initial state, and a softmax head
on the final hidden state.  ``lstm_backward`` implements full
backpropagation through time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError, StateError
from .layers import glorot_uniform
from .sampler import ClipVolume

GATES = ("i", "f", "g", "o")
DEFAULT_HIDDEN = 50
DEFAULT_NEIGHBORHOOD = 4


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LSTMParams:
    """Per-gate input weights ``W*`` (H x D), recurrent weights ``U*`` (H x H), biases ``b*``, and the head."""

    arrays: dict[str, np.ndarray]
    version: int = 0

    @classmethod
    def create(cls, input_size: int, num_classes: int, hidden_size: int = DEFAULT_HIDDEN, rng=None, dtype=np.float64, init="glorot"):
        if num_classes < 1 or input_size < 1 or hidden_size < 1:
            raise ConfigError("LSTM sizes must be positive")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        H, D, C = hidden_size, input_size, num_classes

        def weight(shape, fan_in, fan_out):
            if init == "zeros":
                return np.zeros(shape, dtype=dtype)
            return glorot_uniform(rng, shape, fan_in, fan_out, dtype)

        arrays = {}
        for gate in GATES:
            arrays[f"W{gate}"] = weight((H, D), D, H)
        for gate in GATES:
            arrays[f"U{gate}"] = weight((H, H), H, H)
        for gate in GATES:
            arrays[f"b{gate}"] = np.zeros(H, dtype=dtype)
        arrays["head_w"] = weight((C, H), H, C)
        arrays["head_b"] = np.zeros(C, dtype=dtype)
        return cls(arrays)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def hidden_size(self) -> int:
        return self.arrays["Wi"].shape[0]

    @property
    def input_size(self) -> int:
        return self.arrays["Wi"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.arrays["head_w"].shape[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return dict(self.arrays)

    def total_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "LSTMParams":
        return LSTMParams({k: v.copy() for k, v in self.arrays.items()})

    def reset_head(self, num_classes: int, rng=None) -> None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        H, dtype = self.hidden_size, self.arrays["head_w"].dtype
        self.arrays["head_w"] = glorot_uniform(rng, (num_classes, H), H, num_classes, dtype)
        self.arrays["head_b"] = np.zeros(num_classes, dtype=dtype)
        self.version += 1


@dataclass
class FeatureSequence:
    steps: np.ndarray  # T x D
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.steps = np.atleast_2d(np.asarray(self.steps))
        if self.steps.shape[0] < 1:
            raise InputError("a feature sequence needs at least one step")

    def __len__(self) -> int:
        return self.steps.shape[0]


@dataclass
class Trace:
    params_id: int
    version: int
    xs: np.ndarray
    hs: list = field(default_factory=list)  # h_0 .. h_T
    cs: list = field(default_factory=list)  # c_0 .. c_T
    gates: list = field(default_factory=list)  # (i, f, g, o) per step


def lstm_step(params: LSTMParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One step: returns ``(h_t, c_t, (i, f, g, o))``."""
    p = params.arrays
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != params.hidden_size or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for input {params.input_size}, hidden {params.hidden_size}"
        )
    i = _sigmoid(p["Wi"] @ x_t + p["Ui"] @ h_prev + p["bi"])
    f = _sigmoid(p["Wf"] @ x_t + p["Uf"] @ h_prev + p["bf"])
    g = np.tanh(p["Wg"] @ x_t + p["Ug"] @ h_prev + p["bg"])
    o = _sigmoid(p["Wo"] @ x_t + p["Uo"] @ h_prev + p["bo"])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, (i, f, g, o)


def _steps(seq) -> np.ndarray:
    xs = seq.steps if isinstance(seq, FeatureSequence) else np.atleast_2d(np.asarray(seq))
    if xs.shape[0] == 0:
        raise InputError("empty feature sequence")
    return xs


def lstm_classify(params: LSTMParams, seq):
    """Run from zero state over all steps; logits come from the final hidden state."""
    xs = _steps(seq)
    H = params.hidden_size
    dtype = np.result_type(xs, params.arrays["Wi"])
    h = np.zeros(H, dtype=dtype)
    c = np.zeros(H, dtype=dtype)
    trace = Trace(id(params), params.version, xs, [h], [c])
    for x_t in xs:
        h, c, gates = lstm_step(params, x_t, h, c)
        trace.hs.append(h)
        trace.cs.append(c)
        trace.gates.append(gates)
    logits = params["head_w"] @ h + params["head_b"]
    return logits, trace


def lstm_backward(params: LSTMParams, trace: Trace, grad_logits: np.ndarray, need_input_grad: bool = False):
    """Backpropagation through time; returns gradients keyed like ``params.arrays``."""
    if trace is None:
        raise StateError("no recorded LSTM trace")
    if trace.params_id != id(params) or trace.version != params.version:
        raise StateError("LSTM trace is stale: parameters changed since it was recorded")
    p = params.arrays
    grad_logits = np.asarray(grad_logits)
    if grad_logits.shape != (params.num_classes,):
        raise ShapeError(f"grad_logits shape {grad_logits.shape}, expected ({params.num_classes},)")
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    h_T = trace.hs[-1]
    grads["head_w"] = np.outer(grad_logits, h_T)
    grads["head_b"] = grad_logits.copy()
    dh = p["head_w"].T @ grad_logits
    dc = np.zeros_like(dh)
    dxs = np.zeros_like(trace.xs) if need_input_grad else None
    for t in range(len(trace.gates) - 1, -1, -1):
        i, f, g, o = trace.gates[t]
        c, c_prev, h_prev, x_t = trace.cs[t + 1], trace.cs[t], trace.hs[t], trace.xs[t]
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di, df, dg = dc * g, dc * c_prev, dc * i
        pre = {
            "i": di * i * (1.0 - i),
            "f": df * f * (1.0 - f),
            "g": dg * (1.0 - g * g),
            "o": do * o * (1.0 - o),
        }
        dh = np.zeros_like(dh)
        for gate in GATES:
            grads[f"W{gate}"] += np.outer(pre[gate], x_t)
            grads[f"U{gate}"] += np.outer(pre[gate], h_prev)
            grads[f"b{gate}"] += pre[gate]
            dh += p[f"U{gate}"].T @ pre[gate]
            if need_input_grad:
                dxs[t] += p[f"W{gate}"].T @ pre[gate]
        dc = dc * f
    if need_input_grad:
        grads["input"] = dxs
    return grads


# -- feature extraction -------------------------------------------------------------


@dataclass(frozen=True)
class NeighborhoodPolicy:
    """How a short window of aggregated frames is stretched to the CNN input depth.

    ``tile`` repeats the window as a block (``abcdabcd...``); ``stretch``
    repeats each frame in place (``aabbccdd...``).
    """

    neighborhood: int = DEFAULT_NEIGHBORHOOD
    mode: str = "tile"

    def __post_init__(self):
        if self.neighborhood < 1:
            raise ConfigError(f"neighborhood must be positive, got {self.neighborhood}")
        if self.mode not in ("tile", "stretch"):
            raise ConfigError(f"unknown neighborhood policy {self.mode!r}")

    def expand(self, window: np.ndarray, depth: int) -> np.ndarray:
        """Expand an ``h x w x n`` window to ``h x w x depth``."""
        n = window.shape[2]
        if self.mode == "tile":
            idx = np.arange(depth) % n
        else:
            idx = (np.arange(depth) * n) // depth
        return window[:, :, idx]

    def windows(self, voxels: np.ndarray) -> list[np.ndarray]:
        T, n = voxels.shape[2], self.neighborhood
        return [voxels[:, :, k * n:(k + 1) * n] for k in range(T // n)]


def build_feature_sequence(model, clip, neighborhood: int = DEFAULT_NEIGHBORHOOD, policy: NeighborhoodPolicy | None = None, label=None) -> FeatureSequence:
    """Eval-mode CNN features, one step per temporal neighbourhood of the clip."""
    policy = policy or NeighborhoodPolicy(neighborhood)
    voxels = clip.voxels if isinstance(clip, ClipVolume) else np.asarray(clip)
    if voxels.ndim == 4:
        voxels = voxels[..., 0]
    source_id = clip.source_id if isinstance(clip, ClipVolume) else ""
    h, w, depth, _ = model.input_shape
    if voxels.shape[:2] != (h, w):
        raise ShapeError(f"clip spatial shape {voxels.shape[:2]} does not match model {(h, w)}")
    T = voxels.shape[2]
    if T < policy.neighborhood or T < depth:
        raise InputError(f"clip with {T} frames is shorter than neighborhood {policy.neighborhood} or CNN depth {depth}")
    batch = np.stack([policy.expand(win, depth) for win in policy.windows(voxels)])
    features, _ = model.forward(batch, "eval")
    return FeatureSequence(np.asarray(features, dtype=np.float64), label, source_id)
