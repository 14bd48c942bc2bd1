"""CNN definition, per-layer backprop and weight grouping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor

CONV, FC, RELU, MAXPOOL = "conv", "fc", "relu", "maxpool"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    in_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0

    @classmethod
    def conv(cls, out_channels, in_channels, kernel_size, stride=1, padding=0):
        return cls(CONV, out_channels, in_channels, kernel_size, stride, padding)

    @classmethod
    def fc(cls, out_features, in_features):
        return cls(FC, out_features, in_features)

    @classmethod
    def relu(cls):
        return cls(RELU)

    @classmethod
    def maxpool(cls, window):
        return cls(MAXPOOL, window=window)

    @property
    def has_weights(self) -> bool:
        return self.kind in (CONV, FC)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == CONV:
            k = self.kernel_size
            return (self.out_channels, self.in_channels, k, k)
        if self.kind == FC:
            return (self.out_channels, self.in_channels)
        return ()


class GroupView(NamedTuple):
    """One filter (conv) or one output row (FC) of a layer's weight tensor."""

    layer: int
    group: int
    index: tuple  # numpy index into the layer's weight array

    def size(self, model: "Model") -> int:
        return model.weights[self.layer].data[self.index].size


def reference_architecture(num_classes: int = 10, input_shape=(1, 8, 8)) -> list[LayerSpec]:
    """Conv(8,3x3)-ReLU-Pool2-Conv(16,3x3)-ReLU-Pool2-FC, 'same' padding on both convs."""
    c, h, w = input_shape
    flat = 16 * (h // 4) * (w // 4)
    return [
        LayerSpec.conv(8, c, 3, padding=1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.conv(16, 8, 3, padding=1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.fc(num_classes, flat),
    ]


class Model:
    """A sequential CNN with explicit layer-by-layer backprop.

    ``masks`` maps a weight-layer index to a boolean array (True = pruned);
    masked weights are held at exactly zero by :meth:`apply_masks`.
    """

    def __init__(self, layers, input_shape, num_classes: int, seed: int | None = 0,
                 regularized_layers: int | None = None):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in layers]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.shapes = self._infer_shapes()
        if self.shapes[-1] != (self.num_classes,):
            raise ValueError(f"network output {self.shapes[-1]} != ({num_classes},)")
        n_weight = len(self.weight_layers)
        self.regularized_layers = n_weight if regularized_layers is None else int(regularized_layers)
        if not 0 <= self.regularized_layers <= n_weight:
            raise ValueError("regularized_layers must lie in [0, number of weight layers]")
        self.weights: dict[int, Tensor] = {}
        self.biases: dict[int, Tensor] = {}
        self.masks: dict[int, np.ndarray] = {}
        self._caches = None
        self.initialize(seed)

    def _infer_shapes(self):
        shape = self.input_shape
        shapes = [shape]
        for i, l in enumerate(self.layers):
            if l.kind == CONV:
                if len(shape) != 3 or shape[0] != l.in_channels:
                    raise ValueError(f"layer {i}: conv expects {l.in_channels} channels, got {shape}")
                shape = (l.out_channels,
                         T.conv_output_size(shape[1], l.kernel_size, l.stride, l.padding),
                         T.conv_output_size(shape[2], l.kernel_size, l.stride, l.padding))
            elif l.kind == MAXPOOL:
                shape = (shape[0], shape[1] // l.window, shape[2] // l.window)
                if 0 in shape:
                    raise ValueError(f"layer {i}: pooling window {l.window} too large")
            elif l.kind == FC:
                if math.prod(shape) != l.in_channels:
                    raise ValueError(f"layer {i}: FC expects {l.in_channels} inputs, got {shape}")
                shape = (l.out_channels,)
            elif l.kind != RELU:
                raise ValueError(f"unknown layer kind {l.kind!r}")
            shapes.append(shape)
        return shapes

    @property
    def weight_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.has_weights]

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == CONV]

    def initialize(self, seed) -> None:
        """Uniform Glorot init in +-sqrt(6/(fan_in+fan_out)); zero biases."""
        rng = np.random.default_rng(seed)
        for i in self.weight_layers:
            l = self.layers[i]
            rf = l.kernel_size ** 2 if l.kind == CONV else 1
            bound = math.sqrt(6.0 / (l.in_channels * rf + l.out_channels * rf))
            self.weights[i] = Tensor(rng.uniform(-bound, bound, l.weight_shape))
            self.biases[i] = Tensor(np.zeros(l.out_channels))
        self.masks = {}

    def parameters(self) -> Iterator[Tensor]:
        for i in self.weight_layers:
            yield self.weights[i]
            yield self.biases[i]

    def forward(self, x, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-len(self.input_shape):] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not end in {self.input_shape}")
        single = x.ndim == len(self.input_shape)
        if single:
            x = x[None]
        caches = []
        for i, l in enumerate(self.layers):
            if l.kind == CONV:
                x, c = T.conv2d_forward(x, self.weights[i].data, self.biases[i].data,
                                        l.stride, l.padding)
            elif l.kind == RELU:
                x, c = T.relu_forward(x)
            elif l.kind == MAXPOOL:
                x, c = T.maxpool2d_forward(x, l.window)
            else:
                shape = x.shape
                x, c = T.linear_forward(x.reshape(x.shape[0], -1), self.weights[i].data,
                                        self.biases[i].data)
                c = (c, shape)
            caches.append(c)
        self._caches = caches if train else None
        return x[0] if single else x

    def backward(self, dlogits) -> None:
        """Accumulate parameter gradients for the most recent ``forward(train=True)``."""
        if self._caches is None:
            raise RuntimeError("backward called before a training forward pass")
        d = np.asarray(dlogits, dtype=DTYPE)
        if d.ndim == 1:
            d = d[None]
        for i in reversed(range(len(self.layers))):
            l, c = self.layers[i], self._caches[i]
            if l.kind == CONV:
                d, dw, db = T.conv2d_backward(d, c)
                self.weights[i].accumulate(dw)
                self.biases[i].accumulate(db)
            elif l.kind == RELU:
                d = T.relu_backward(d, c)
            elif l.kind == MAXPOOL:
                d = T.maxpool2d_backward(d, c)
            else:
                c, shape = c
                d, dw, db = T.linear_backward(d, c)
                self.weights[i].accumulate(dw)
                self.biases[i].accumulate(db)
                d = d.reshape(shape)
        self._caches = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def apply_masks(self) -> None:
        for i, m in self.masks.items():
            self.weights[i].data[m] = 0
            if self.weights[i].grad is not None:
                self.weights[i].grad[m] = 0

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        out = [self.forward(x[s:s + batch_size]).argmax(axis=1)
               for s in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def copy(self) -> "Model":
        new = Model.__new__(Model)
        new.__dict__.update(self.__dict__)
        new.weights = {i: t.copy() for i, t in self.weights.items()}
        new.biases = {i: t.copy() for i, t in self.biases.items()}
        new.masks = {i: m.copy() for i, m in self.masks.items()}
        new._caches = None
        return new

    def architecture(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers],
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "regularized_layers": self.regularized_layers}


def forward(model: Model, input) -> np.ndarray:
    return model.forward(input)


def parameter_groups(model: Model, layers=None) -> list[GroupView]:
    """One group per output filter (conv) or output row (FC)."""
    layers = model.weight_layers if layers is None else layers
    return [GroupView(i, g, (g,))
            for i in layers for g in range(model.layers[i].out_channels)]


def group_norms(w: np.ndarray) -> np.ndarray:
    """L2 norm of each leading-axis slice, accumulated in float64."""
    return np.sqrt(np.square(w.reshape(w.shape[0], -1), dtype=np.float64).sum(axis=1))


def evaluate_accuracy(model: Model, X, y) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    return int(np.count_nonzero(model.predict(X) == y)) / len(y)
