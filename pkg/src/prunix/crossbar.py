"""Differential crossbar mapping, bit-line VMM and device fault injection.

Conductances are kept in weight units (level index times the layer period).
Every weight-bearing position of a layer's crossbar matrix is backed by two
cells, one in the positive array and one in the negative array; fault
injectors draw uniformly from that cell population across all layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import truncnorm

from .model import CONV, FC, MAXPOOL, RELU, Model
from .quantizer import QuantScheme, is_quantized, level_indices, max_level
from .tensor import DTYPE, conv_output_size, maxpool2d, relu


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def unroll_indices(kernel_shape, input_dims, stride=1, padding=0):
    """Sparse description of the doubly-block-Toeplitz matrix of a convolution.

    Returns ``(rows, cols, kidx, shape)``: entry ``(rows[t], cols[t])`` of the
    matrix holds ``kernel.flat[kidx[t]]``. Rows index the flattened unpadded
    input ``(c, y, x)``; columns index the flattened output ``(f, oy, ox)``.
    """
    n_f, n_c, kh, kw = kernel_shape
    m, n = input_dims
    sh, sw = _pair(stride)
    ho = conv_output_size(m, kh, sh, padding)
    wo = conv_output_size(n, kw, sw, padding)
    f, c, ky, kx, oy, ox = np.meshgrid(np.arange(n_f), np.arange(n_c), np.arange(kh),
                                       np.arange(kw), np.arange(ho), np.arange(wo),
                                       indexing="ij")
    y = oy * sh + ky - padding
    x = ox * sw + kx - padding
    ok = (y >= 0) & (y < m) & (x >= 0) & (x < n)
    rows = (c * m * n + y * n + x)[ok]
    cols = (f * ho * wo + oy * wo + ox)[ok]
    kidx = (((f * n_c + c) * kh + ky) * kw + kx)[ok]
    return rows, cols, kidx, (n_c * m * n, n_f * ho * wo)


def unroll_conv(kernel, input_dims, stride=1, padding=0) -> np.ndarray:
    """Equivalent kernel matrix such that ``input.ravel() @ matrix == conv2d(input).ravel()``.

    For a single channel/filter pair the shape is
    ``(M*N) x ((M-K+2P)/S_h + 1)*((N-K+2P)/S_w + 1)``.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim == 2:
        kernel = kernel[None, None]
    rows, cols, kidx, shape = unroll_indices(kernel.shape, input_dims, stride, padding)
    mat = np.zeros(shape, dtype=kernel.dtype)
    mat[rows, cols] = kernel.ravel()[kidx]
    return mat


@dataclass
class FaultMask:
    """Cells picked by one injection: flat indices into each pair's ``(2, H, B)`` cell grid."""

    kind: str  # stuck_off | stuck_on | aged | drifted
    cells: dict
    seed: int

    @property
    def count(self) -> int:
        return int(sum(len(v) for v in self.cells.values()))


@dataclass
class DriftParams:
    r: float
    cell_fraction: float = 0.3

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("drift range r must be >= 0")
        if not 0 <= self.cell_fraction <= 1:
            raise ValueError("cell_fraction must lie in [0, 1]")

    def distribution(self, mean_abs_weight: float):
        """Truncated normal on [0, r*W] with location 0.2*r*W and scale 0.1*r*W."""
        top = self.r * mean_abs_weight
        loc, sd = 0.2 * top, 0.1 * top
        return truncnorm((0 - loc) / sd, (top - loc) / sd, loc=loc, scale=sd)


@dataclass
class AgingParams:
    cell_fraction: float = 0.3
    levels_lost: int = 4

    def __post_init__(self):
        if not 0 <= self.cell_fraction <= 1:
            raise ValueError("cell_fraction must lie in [0, 1]")
        if self.levels_lost < 1:
            raise ValueError("levels_lost must be a positive integer")


@dataclass
class CrossbarPair:
    """Positive/negative conductance arrays for one layer plus per-cell fault state.

    ``levels`` has shape ``(2, H, B)`` (index 0 positive array, 1 negative);
    ``source`` maps each position to the flat weight index it stores, -1 for
    positions that are structurally zero in an unrolled convolution.
    """

    layer: int
    kind: str
    levels: np.ndarray
    scale: float
    bits: int
    source: np.ndarray
    weight_shape: tuple
    mean_abs_weight: float
    stuck_off: np.ndarray = None
    max_levels: np.ndarray = None
    drift: np.ndarray = None
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = self.levels.shape
        if self.stuck_off is None:
            self.stuck_off = np.zeros(shape, dtype=bool)
        if self.max_levels is None:
            self.max_levels = np.full(shape, max_level(self.bits), dtype=np.int32)
        if self.drift is None:
            self.drift = np.zeros(shape)
        if np.any(self.levels < 0):
            raise ValueError("conductance levels must be non-negative")

    @property
    def H(self) -> int:
        return self.levels.shape[1]

    @property
    def B(self) -> int:
        return self.levels.shape[2]

    @property
    def structural(self) -> np.ndarray:
        return self.source >= 0

    def cell_population(self) -> np.ndarray:
        """Flat ``(2, H, B)`` indices of every weight-bearing cell."""
        s = np.flatnonzero(self.structural)
        return np.concatenate([s, s + self.structural.size])

    def conductances(self) -> np.ndarray:
        """Effective ``(2, H, B)`` conductances after aging, drift and stuck-off faults."""
        g = np.minimum(self.levels, self.max_levels) * self.scale + self.drift
        g = np.maximum(g, 0.0)
        g[self.stuck_off] = 0.0
        return g

    def effective_matrix(self) -> np.ndarray:
        g = self.conductances()
        return (g[0] - g[1]).astype(DTYPE)

    def read_weights(self) -> np.ndarray:
        """Signed weights read back from the first cell storing each weight."""
        eff = self.effective_matrix().ravel()
        src = self.source.ravel()
        pos = np.flatnonzero(src >= 0)
        w = np.zeros(int(np.prod(self.weight_shape)), dtype=DTYPE)
        # reversed assignment leaves the first occurrence in place
        w[src[pos[::-1]]] = eff[pos[::-1]]
        return w.reshape(self.weight_shape)

    def copy(self) -> "CrossbarPair":
        return replace(self, stuck_off=self.stuck_off.copy(),
                       max_levels=self.max_levels.copy(), drift=self.drift.copy())

    def fault_arrays(self) -> dict:
        return {f"xbar{self.layer}.stuck_off": self.stuck_off,
                f"xbar{self.layer}.max_levels": self.max_levels,
                f"xbar{self.layer}.drift": self.drift}

    def load_faults(self, arrays: dict) -> None:
        self.stuck_off = arrays[f"xbar{self.layer}.stuck_off"].astype(bool)
        self.max_levels = arrays[f"xbar{self.layer}.max_levels"].astype(np.int32)
        self.drift = arrays[f"xbar{self.layer}.drift"].astype(np.float64)


def vmm(voltages, pair: CrossbarPair) -> np.ndarray:
    """Bit-line currents ``I_j = sum_i V_i (G+_ij - G-_ij)`` for one vector or a batch."""
    v = np.asarray(voltages, dtype=DTYPE)
    if v.shape[-1] != pair.H:
        raise ValueError(f"expected {pair.H} word-line voltages, got {v.shape[-1]}")
    return v @ pair.effective_matrix()


def _pair_from_indices(layer, kind, idx, rows, cols, kidx, shape, scale, bits, geometry):
    pos = np.zeros(shape, dtype=np.int32)
    neg = np.zeros(shape, dtype=np.int32)
    src = np.full(shape, -1, dtype=np.int64)
    flat = idx.ravel()
    pos[rows, cols] = np.maximum(flat[kidx], 0)
    neg[rows, cols] = np.maximum(-flat[kidx], 0)
    src[rows, cols] = kidx
    mean_abs = float(np.abs(flat).mean() * scale)
    return CrossbarPair(layer, kind, np.stack([pos, neg]), scale, bits, src, idx.shape,
                        mean_abs, geometry=geometry)


def map_model(model: Model, scheme: QuantScheme) -> list[CrossbarPair]:
    """One differential pair per conv/FC layer; conv layers are unrolled first."""
    if not is_quantized(model, scheme):
        raise ValueError("model weights are not on the scheme's quantization levels")
    pairs = []
    for i in model.weight_layers:
        layer = model.layers[i]
        p = scheme.per_layer_scale[i]
        idx = level_indices(model.weights[i].data, p, scheme.a)
        if layer.kind == FC:
            n, c = idx.shape
            rr, cc = np.meshgrid(np.arange(c), np.arange(n), indexing="ij")
            rows, cols = rr.ravel(), cc.ravel()
            kidx = (cc * c + rr).ravel()
            pairs.append(_pair_from_indices(i, FC, idx, rows, cols, kidx, (c, n), p,
                                            scheme.bits, {}))
        else:
            in_shape = model.shapes[i]
            rows, cols, kidx, shape = unroll_indices(idx.shape, in_shape[1:], layer.stride,
                                                     layer.padding)
            geometry = {"in_shape": in_shape, "out_shape": model.shapes[i + 1]}
            pairs.append(_pair_from_indices(i, CONV, idx, rows, cols, kidx, shape, p,
                                            scheme.bits, geometry))
    return pairs


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def select_cells(pairs, fraction: float, seed: int, kind: str) -> FaultMask:
    """Choose exactly ``round(fraction * cells)`` cells uniformly across all pairs."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    pops = [p.cell_population() for p in pairs]
    total = sum(len(p) for p in pops)
    k = _round_half_up(fraction * total)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=k, replace=False)) if k else np.zeros(0, int)
    cells, start = {}, 0
    for pair, pop in zip(pairs, pops):
        sel = chosen[(chosen >= start) & (chosen < start + len(pop))] - start
        cells[pair.layer] = pop[sel]
        start += len(pop)
    return FaultMask(kind, cells, seed)


def inject_stuck_off(pairs, fraction: float, seed: int) -> list[CrossbarPair]:
    mask = select_cells(pairs, fraction, seed, "stuck_off")
    out = []
    for pair in pairs:
        new = pair.copy()
        new.stuck_off.ravel()[mask.cells[pair.layer]] = True
        out.append(new)
    return out


def inject_aging(pairs, aging: AgingParams, seed: int) -> list[CrossbarPair]:
    for pair in pairs:
        if aging.levels_lost >= 2 ** pair.bits:
            raise ValueError("levels_lost must be < 2**bits")
    mask = select_cells(pairs, aging.cell_fraction, seed, "aged")
    out = []
    for pair in pairs:
        new = pair.copy()
        cap = max_level(pair.bits) - aging.levels_lost
        cells = mask.cells[pair.layer]
        flat = new.max_levels.ravel()
        flat[cells] = np.minimum(flat[cells], cap)
        out.append(new)
    return out


def sample_drift(drift: DriftParams, mean_abs_weight: float, size: int, rng) -> np.ndarray:
    """Unsigned drift magnitudes for ``size`` cells."""
    if drift.r == 0 or mean_abs_weight == 0 or size == 0:
        return np.zeros(size)
    return drift.distribution(mean_abs_weight).rvs(size=size, random_state=rng)


def inject_drift(pairs, drift: DriftParams, seed: int) -> list[CrossbarPair]:
    """Add ``+-delta`` to a random subset of cells; conductances stay non-negative."""
    mask = select_cells(pairs, drift.cell_fraction, seed, "drifted")
    rng = np.random.default_rng([seed, 1])
    out = []
    for pair in pairs:
        new = pair.copy()
        cells = mask.cells[pair.layer]
        delta = sample_drift(drift, pair.mean_abs_weight, len(cells), rng)
        sign = np.where(rng.random(len(cells)) < 0.5, -1.0, 1.0)
        new.drift.ravel()[cells] += sign * delta
        out.append(new)
    return out


def fault_overlap(pairs, mask: FaultMask) -> float:
    """Fraction of selected cells whose stored weight is nonzero."""
    hits = total = 0
    for pair in pairs:
        cells = mask.cells[pair.layer]
        w = (pair.levels[0] - pair.levels[1]).ravel()
        hits += int(np.count_nonzero(w[cells % w.size]))
        total += len(cells)
    return hits / total if total else 0.0


def population_sparsity(pairs) -> float:
    """Fraction of weight-bearing cells whose stored weight is zero."""
    zeros = total = 0
    for pair in pairs:
        w = (pair.levels[0] - pair.levels[1])[pair.structural]
        zeros += 2 * int(np.count_nonzero(w == 0))
        total += 2 * w.size
    return zeros / total if total else 0.0


def crossbar_forward(pairs, model: Model, x) -> np.ndarray:
    """Logits from running every conv/FC layer as a VMM on its crossbar pair."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == len(model.input_shape)
    if single:
        x = x[None]
    mats = {p.layer: p.effective_matrix() for p in pairs}
    for i, layer in enumerate(model.layers):
        if layer.kind == CONV:
            out_shape = model.shapes[i + 1]
            y = x.reshape(x.shape[0], -1) @ mats[i]
            x = y.reshape((x.shape[0],) + out_shape) + model.biases[i].data[:, None, None]
        elif layer.kind == FC:
            x = x.reshape(x.shape[0], -1) @ mats[i] + model.biases[i].data
        elif layer.kind == RELU:
            x = relu(x)
        elif layer.kind == MAXPOOL:
            x = maxpool2d(x, layer.window)
    return x[0] if single else x


def evaluate_on_crossbar(pairs, model: Model, X, y, batch_size: int = 512) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    X = np.asarray(X, dtype=DTYPE)
    hits = 0
    for s in range(0, len(y), batch_size):
        logits = crossbar_forward(pairs, model, X[s:s + batch_size])
        hits += int(np.count_nonzero(logits.argmax(axis=1) == y[s:s + batch_size]))
    return hits / len(y)
