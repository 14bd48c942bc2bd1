"""Uniform conductance-level quantization and differential-pair splitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .tensor import DTYPE


def max_level(bits: int) -> int:
    return 2 ** int(bits) - 1


def level_units(w, p: float) -> np.ndarray:
    """``w / p`` in float64, snapped onto the half-integer grid when within 1e-9 of it.

    Decimal inputs such as 0.35 / 0.1 would otherwise land one ulp off a
    rounding boundary and pick the wrong level.
    """
    if np.any(np.asarray(p) <= 0):
        raise ValueError("level period p must be positive")
    x = np.asarray(w, dtype=np.float64) / p
    grid = np.rint(x * 2) / 2
    return np.where(np.abs(x - grid) <= 1e-9 * np.maximum(1.0, np.abs(x)), grid, x)


@dataclass
class QuantizedTensor:
    indices: np.ndarray  # signed int32 level indices
    scale: float
    shape: tuple

    def dequantize(self) -> np.ndarray:
        return (self.indices.astype(np.float64) * self.scale).astype(DTYPE).reshape(self.shape)


def level_indices(w, p: float, a: int | None = None) -> np.ndarray:
    """Nearest level index, rounding half away from zero, clamped to ``[-a, a]``."""
    x = level_units(w, p)
    idx = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if a is not None:
        idx = np.clip(idx, -a, a)
    return idx.astype(np.int32)


def quantize(w, p: float, a: int | None = None) -> QuantizedTensor:
    w = np.asarray(w)
    return QuantizedTensor(level_indices(w, p, a), float(p), w.shape)


def quantize_values(w, p: float, a: int | None = None) -> np.ndarray:
    return quantize(w, p, a).dequantize()


def split_differential(q) -> tuple[np.ndarray, np.ndarray]:
    """Split signed indices into non-negative (positive-array, negative-array) levels."""
    idx = q.indices if isinstance(q, QuantizedTensor) else np.asarray(q)
    return np.maximum(idx, 0), np.maximum(-idx, 0)


def calibrate_scale(w, bits: int) -> float:
    """Period that puts the largest ``|w|`` on the top level (1.0 for an all-zero tensor)."""
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    m = float(np.abs(w).max())
    return m / max_level(bits) if m > 0 else 1.0


@dataclass
class QuantScheme:
    """Bit width, optional clamp (in levels) and a frozen period per weight layer."""

    bits: int = 4
    clamp_levels: int | None = None
    per_layer_scale: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError("bits must lie in [2, 8]")
        if self.clamp_levels is not None and not 1 <= self.clamp_levels <= max_level(self.bits):
            raise ValueError(f"clamp_levels must lie in [1, {max_level(self.bits)}]")
        self.per_layer_scale = {int(k): float(v) for k, v in self.per_layer_scale.items()}

    @property
    def max_level(self) -> int:
        return max_level(self.bits)

    @property
    def a(self) -> int:
        return self.max_level if self.clamp_levels is None else self.clamp_levels

    def calibrate(self, model: Model) -> "QuantScheme":
        scales = {i: calibrate_scale(model.weights[i].data, self.bits) for i in model.weight_layers}
        return QuantScheme(self.bits, self.clamp_levels, scales)

    def with_bits(self, bits: int, clamp_levels: int | None = None) -> "QuantScheme":
        """Same top-of-range per layer, re-divided into ``2**bits - 1`` levels."""
        ratio = self.max_level / max_level(bits)
        return QuantScheme(bits, clamp_levels,
                           {i: p * ratio for i, p in self.per_layer_scale.items()})

    def to_dict(self) -> dict:
        return {"bits": self.bits, "clamp_levels": self.clamp_levels,
                "per_layer_scale": {str(k): v for k, v in self.per_layer_scale.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(d["bits"], d.get("clamp_levels"), d.get("per_layer_scale", {}))


def quantize_model(model: Model, scheme: QuantScheme) -> tuple[Model, dict]:
    """Copy of ``model`` with weights and biases on their layer's levels.

    Returns the copy and ``{layer: (weight QuantizedTensor, bias QuantizedTensor)}``.
    """
    if not scheme.per_layer_scale:
        scheme = scheme.calibrate(model)
    out = model.copy()
    qt = {}
    for i in model.weight_layers:
        p = scheme.per_layer_scale[i]
        qw = quantize(model.weights[i].data, p, scheme.a)
        qb = quantize(model.biases[i].data, p, scheme.a)
        out.weights[i].data = qw.dequantize()
        out.biases[i].data = qb.dequantize()
        qt[i] = (qw, qb)
    out.apply_masks()
    return out, qt


def is_quantized(model: Model, scheme: QuantScheme) -> bool:
    for i in model.weight_layers:
        p = scheme.per_layer_scale.get(i)
        if p is None:
            return False
        w = model.weights[i].data
        if not np.array_equal(quantize_values(w, p, scheme.a), w):
            return False
    return True
