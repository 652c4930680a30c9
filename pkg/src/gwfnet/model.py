"""3D CNN feature extractor: presets, shape audit, forward/backward passes.

Every preset follows the same pattern::

    Conv1 -> ReLU -> Dropout -> Pool1 -> Conv2 -> ReLU -> Dropout -> Pool2
      -> Conv3 -> ReLU -> Dropout -> Conv4 -> ReLU -> Dropout
      -> Flatten -> FC1 -> ReLU -> Dropout [-> FC2 -> ReLU -> Dropout ...]

``kth`` and ``weizmann`` are the full-size networks; ``mini`` and ``tiny`` are
scaled-down variants for desk-scale training and gradient checks.  A suffix
``-6``, ``-7`` or ``-8`` adds fully connected layers of the FC1 width so the
network has that many trainable layers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError, StateError
from .sampler import ClipVolume


@dataclass(frozen=True)
class _Base:
    spatial: tuple[int, int]
    convs: tuple  # (filters, kernel) for Conv1..Conv4
    fc_units: int


_BASES = {
    "kth": _Base((34, 54), ((16, (3, 3, 3)), (16, (5, 5, 3)), (32, (3, 3, 3)), (32, (3, 3, 3))), 256),
    "weizmann": _Base((64, 48), ((16, (3, 3, 3)), (16, (5, 5, 3)), (32, (3, 3, 3)), (32, (3, 3, 3))), 256),
    "mini": _Base((16, 16), ((4, (3, 3, 3)), (8, (3, 3, 3)), (8, (1, 1, 3)), (8, (1, 1, 3))), 32),
    "tiny": _Base((8, 8), ((4, (3, 3, 3)), (4, (2, 2, 3)), (4, (1, 1, 3)), (4, (1, 1, 3))), 6),
}

POOL_FIELD = (2, 2, 1)
BASE_TRAINABLE_LAYERS = 5
MAX_TRAINABLE_LAYERS = 8
DEFAULT_WINDOW_COUNT = 20


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | relu | dropout | flatten | fc
    name: str
    filters: int = 0
    kernel: tuple[int, int, int] = (1, 1, 1)
    units: int = 0
    rate: float = 0.0


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int, int]
    layers: tuple[LayerSpec, ...]

    def shape_chain(self) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape after every layer, validated link by link."""
        return [(layer.name, shape) for layer, shape in zip(self.layers, _propagate(self))]

    @property
    def feature_size(self) -> int:
        return _propagate(self)[-1][0]

    @property
    def parametric_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind in ("conv", "fc")]


def preset_names() -> list[str]:
    return sorted(_BASES)


def parse_preset(name: str) -> tuple[str, int]:
    """Split ``"kth-7"`` into ``("kth", 7)``."""
    m = re.fullmatch(r"([a-z]+)(?:-(\d+))?", name or "")
    if not m or m.group(1) not in _BASES:
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()} with optional -5..-8 suffix")
    depth = int(m.group(2)) if m.group(2) else BASE_TRAINABLE_LAYERS
    if not BASE_TRAINABLE_LAYERS <= depth <= MAX_TRAINABLE_LAYERS:
        raise ConfigError(f"preset depth {depth} outside [{BASE_TRAINABLE_LAYERS}, {MAX_TRAINABLE_LAYERS}]")
    return m.group(1), depth


def architecture(name: str, window_count: int = DEFAULT_WINDOW_COUNT, dropout_rate: float = 0.4) -> ArchitectureSpec:
    base_name, depth = parse_preset(name)
    base = _BASES[base_name]
    chain: list[LayerSpec] = []

    def activate(owner: str):
        chain.append(LayerSpec("relu", f"{owner}.relu"))
        chain.append(LayerSpec("dropout", f"{owner}.dropout", rate=dropout_rate))

    for idx, (filters, kernel) in enumerate(base.convs, start=1):
        chain.append(LayerSpec("conv", f"Conv{idx}", filters=filters, kernel=kernel))
        activate(f"Conv{idx}")
        if idx <= 2:
            chain.append(LayerSpec("pool", f"Pool{idx}", kernel=POOL_FIELD))
    chain.append(LayerSpec("flatten", "Flatten"))
    for idx in range(1, depth - len(base.convs) + 1):
        chain.append(LayerSpec("fc", f"FC{idx}", units=base.fc_units))
        activate(f"FC{idx}")
    spec = ArchitectureSpec(name, (*base.spatial, int(window_count), 1), tuple(chain))
    _propagate(spec)
    return spec


def _instantiate(ls: LayerSpec, in_shape, rng, dtype, init):
    if ls.kind == "conv":
        return L.Conv3DLayer.create(ls.kernel, in_shape[-1], ls.filters, rng, ls.name, dtype, init)
    if ls.kind == "fc":
        return L.FCLayer.create(in_shape[0], ls.units, rng, ls.name, dtype, init)
    if ls.kind == "pool":
        return L.MaxPool3DLayer(ls.kernel, ls.name)
    if ls.kind == "relu":
        return L.ReLULayer(ls.name)
    if ls.kind == "dropout":
        return L.DropoutLayer(ls.rate, ls.name)
    if ls.kind == "flatten":
        return L.FlattenLayer(ls.name)
    raise ConfigError(f"unknown layer kind {ls.kind!r}")


def _propagate(spec: ArchitectureSpec) -> list[tuple[int, ...]]:
    shape = tuple(spec.input_shape)
    shapes = []
    for ls in spec.layers:
        layer = _instantiate(ls, shape, None, np.float64, "zeros") if ls.kind != "fc" else None
        if ls.kind == "fc":
            if len(shape) != 1:
                raise ShapeError(f"{ls.name}: fully connected layer needs a flat input, got {shape}")
            shape = (ls.units,)
        else:
            shape = tuple(layer.output_shape(shape))
        shapes.append(shape)
    return shapes


@dataclass
class ForwardState:
    model_id: int
    version: int
    mode: str
    caches: list
    batched: bool
    shapes: list = field(default_factory=list)  # output shape of every layer


class Model:
    """A built layer chain together with its learnable parameters."""

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator | None = None, init: str = "glorot", dtype=np.float32):
        if init not in ("glorot", "zeros"):
            raise ConfigError(f"unknown init rule {init!r}")
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = []
        shape = spec.input_shape
        for ls in spec.layers:
            self.layers.append(_instantiate(ls, shape, rng, self.dtype, init))
            shape = self.layers[-1].output_shape(shape)
        self.trainable: set[str] = set(spec.parametric_layers)
        self.version = 0

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def layer(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigError(f"no layer named {name!r}")

    def layer_parameters(self, name: str) -> int:
        return self.layer(name).num_parameters()

    def total_parameters(self) -> int:
        return sum(layer.num_parameters() for layer in self.layers)

    def trainable_names(self) -> list[str]:
        return [n for n in self.named_parameters() if n.split(".")[0] in self.trainable]

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return self.spec.input_shape

    @property
    def feature_size(self) -> int:
        return self.spec.feature_size

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to ``dtype``."""
        clone = Model(self.spec, None, "zeros", dtype)
        for name, arr in self.named_parameters().items():
            clone.named_parameters()[name][...] = arr
        clone.trainable = set(self.trainable)
        return clone

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    # -- passes -------------------------------------------------------------

    def _prepare(self, clip) -> tuple[np.ndarray, bool]:
        x = clip.voxels if isinstance(clip, ClipVolume) else np.asarray(clip)
        h, w, t, c = self.spec.input_shape
        if x.shape[-3:] == (h, w, t):
            x = x[..., None]
        if x.shape == (h, w, t, c):
            return x.astype(self.dtype, copy=False), False
        if x.ndim == 5 and x.shape[1:] == (h, w, t, c):
            return x.astype(self.dtype, copy=False), True
        raise ShapeError(f"clip shape {x.shape} does not match model input {(h, w, t)}")

    def forward(self, clip, mode: str = "eval", rng: np.random.Generator | None = None):
        """Run the chain.  Returns ``(features, state)``; ``state`` feeds ``backward``."""
        x, batched = self._prepare(clip)
        caches, shapes = [], []
        for layer in self.layers:
            if isinstance(layer, L.Conv3DLayer):
                caches.append(x)
                x = L.conv3d_forward(layer, x)
            elif isinstance(layer, L.MaxPool3DLayer):
                x, record = L.maxpool3d_forward(layer, x)
                caches.append(record)
            elif isinstance(layer, L.ReLULayer):
                caches.append(x)
                x = L.relu(x)
            elif isinstance(layer, L.DropoutLayer):
                x, mask = L.dropout_forward(layer, x, mode, rng)
                caches.append(mask)
            elif isinstance(layer, L.FlattenLayer):
                caches.append(x.shape)
                x = x.reshape(x.shape[:-4] + (-1,)) if batched else x.reshape(-1)
            elif isinstance(layer, L.FCLayer):
                caches.append(x)
                x = L.fc_forward(layer, x)
            shapes.append(tuple(x.shape))
        return x, ForwardState(id(self), self.version, mode, caches, batched, shapes)

    def backward(self, state: ForwardState | None, grad_feature: np.ndarray, need_input_grad: bool = False):
        """Gradients of every parameter given d(loss)/d(features).

        Returns a dict keyed like ``named_parameters``; with ``need_input_grad``
        the gradient w.r.t. the input clip is stored under ``"input"``.
        """
        if state is None:
            raise StateError("no recorded forward state")
        if state.model_id != id(self) or state.version != self.version:
            raise StateError("forward state is stale: parameters changed since it was recorded")
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_feature, dtype=self.dtype)
        first_param = next(i for i, l in enumerate(self.layers) if l.num_parameters())
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[idx], state.caches[idx]
            if isinstance(layer, L.Conv3DLayer):
                need = need_input_grad or idx > first_param
                g, gk, gb = L.conv3d_backward(layer, cache, g, need_input_grad=need)
                grads[f"{layer.name}.kernel"], grads[f"{layer.name}.bias"] = gk, gb
            elif isinstance(layer, L.MaxPool3DLayer):
                g = L.maxpool3d_backward(cache, g)
            elif isinstance(layer, L.ReLULayer):
                g = L.relu_backward(cache, g)
            elif isinstance(layer, L.DropoutLayer):
                g = L.dropout_backward(cache, g)
            elif isinstance(layer, L.FlattenLayer):
                g = g.reshape(cache)
            elif isinstance(layer, L.FCLayer):
                g, gw, gb = L.fc_backward(layer, cache, g)
                grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = gw, gb
        ordered = {name: grads[name] for name in self.named_parameters()}
        if need_input_grad:
            ordered["input"] = g
        return ordered


# -- module-level API -----------------------------------------------------------------


def build_preset(
    name: str,
    window_count: int = DEFAULT_WINDOW_COUNT,
    rng: np.random.Generator | int | None = 0,
    init: str = "glorot",
    dtype=np.float32,
    dropout_rate: float = 0.4,
) -> Model:
    """Build a preset network; weights follow ``init``, biases start at zero."""
    spec = architecture(name, window_count, dropout_rate)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Model(spec, rng, init, dtype)


def total_parameters(model: Model) -> int:
    return model.total_parameters()


def model_forward(model: Model, clip, mode: str = "eval", rng=None):
    return model.forward(clip, mode, rng)


def model_backward(model: Model, state: ForwardState, grad_feature) -> dict[str, np.ndarray]:
    return model.backward(state, grad_feature)


def freeze_layers(model: Model, trainable: Iterable[str]) -> Model:
    """Restrict optimizer updates to the named layers (in place)."""
    trainable = set(trainable)
    known = set(model.spec.parametric_layers)
    unknown = trainable - known
    if unknown:
        raise ConfigError(f"unknown layer names {sorted(unknown)}; known: {sorted(known)}")
    model.trainable = trainable
    return model


def attach_head(feature_size: int, num_classes: int, rng=None, dtype=np.float32) -> L.FCLayer:
    """Softmax classifier head used to pretrain the CNN on clip labels."""
    if num_classes < 2:
        raise ConfigError(f"need at least two classes, got {num_classes}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return L.FCLayer.create(feature_size, num_classes, rng, "Head", dtype)
