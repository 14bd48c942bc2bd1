"""Magnitude pruning: unstructured, filter-wise, the adaptive per-layer loop and a global baseline."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model import CONV, Model

logger = logging.getLogger(__name__)


@dataclass
class PruneParams:
    lambda_p: float = 0.5
    mu: float = 0.7
    sigma: float = 0.02
    gamma: float = 0.5
    lambda_min: float = 0.01
    reset_per_layer: bool = True

    def __post_init__(self):
        if not 0 <= self.lambda_p <= 1:
            raise ValueError("lambda_p must lie in [0, 1]")
        if not 0 <= self.mu <= 1:
            raise ValueError("mu must lie in [0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")


@dataclass
class PruneStep:
    layer: int
    rate: float
    accuracy_loss: float
    accepted: bool


@dataclass
class SparsityReport:
    overall: float
    sparse_filters: float
    layer_names: list = field(default_factory=list)
    element: list = field(default_factory=list)
    conv_layer_names: list = field(default_factory=list)
    filter: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "element_sparsity", "filter_sparsity"])
        filt = dict(zip(self.conv_layer_names, self.filter))
        for name, e in zip(self.layer_names, self.element):
            f = filt.get(name)
            w.writerow([name, repr(e), "" if f is None else repr(f)])
        return buf.getvalue()


def unstructured_prune(weights: np.ndarray, mask: np.ndarray | None, rate: float) -> np.ndarray:
    """Mask the ``floor(rate * n)`` smallest-magnitude of the ``n`` unmasked weights.

    Returns the new mask (True = pruned); ties go to the lowest flat index.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    mask = np.zeros(weights.shape, bool) if mask is None else mask.copy()
    free = np.flatnonzero(~mask.ravel())
    k = math.floor(rate * len(free))
    if k:
        order = np.argsort(np.abs(weights.ravel()[free]), kind="stable")
        mask.ravel()[free[order[:k]]] = True
    return mask


def filter_prune(weights: np.ndarray, mask: np.ndarray | None, rate: float) -> np.ndarray:
    """Mask whole filters: the ``floor(rate * N)`` unmasked ones with smallest L1 norm."""
    if weights.ndim != 4:
        raise ValueError("filter pruning applies to conv weights (N x C x K x K) only")
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    mask = np.zeros(weights.shape, bool) if mask is None else mask.copy()
    n = weights.shape[0]
    dead = mask.reshape(n, -1).all(axis=1)
    free = np.flatnonzero(~dead)
    k = min(math.floor(rate * n), len(free))
    if k:
        norms = np.abs(np.where(mask, 0, weights)).reshape(n, -1).sum(axis=1, dtype=np.float64)
        order = np.argsort(norms[free], kind="stable")
        mask[free[order[:k]]] = True
    return mask


def prune_layer(model: Model, layer: int, rate: float, mu: float,
                fc_rate: float | None = None) -> None:
    """One pruning pass on ``layer`` in place: conv gets unstructured ``rate*mu`` then
    filters ``rate*(1-mu)``; FC gets unstructured ``fc_rate`` (default ``rate*mu``)."""
    w = model.weights[layer].data
    mask = model.masks.get(layer)
    if model.layers[layer].kind == CONV:
        mask = unstructured_prune(w, mask, rate * mu)
        mask = filter_prune(w, mask, rate * (1 - mu))
    else:
        mask = unstructured_prune(w, mask, rate * mu if fc_rate is None else fc_rate)
    model.masks[layer] = mask
    model.apply_masks()


def adaptive_prune(model: Model, params: PruneParams, evaluate: Callable[[Model], float],
                   baseline: float | None = None, history: list | None = None):
    """Per-layer prune / evaluate / undo loop with geometric rate decay.

    ``evaluate`` returns validation accuracy for a model. A layer attempt is
    accepted when ``baseline - accuracy <= sigma``; otherwise the layer is
    restored and the rate shrinks by ``gamma`` until it falls below
    ``lambda_min``. Returns ``(pruned_model, SparsityReport)``; attempts are
    appended to ``history`` when given.
    """
    model = model.copy()
    if baseline is None:
        baseline = evaluate(model)
    lam = params.lambda_p
    for layer in model.weight_layers:
        if params.reset_per_layer:
            lam = params.lambda_p
        while lam >= params.lambda_min:
            saved_w = model.weights[layer].data.copy()
            saved_m = model.masks.get(layer)
            saved_m = None if saved_m is None else saved_m.copy()
            prune_layer(model, layer, lam, params.mu)
            loss = baseline - evaluate(model)
            accepted = loss <= params.sigma
            if history is not None:
                history.append(PruneStep(layer, lam, loss, accepted))
            logger.debug("layer %d rate %.4f loss %.4f %s", layer, lam, loss,
                         "accept" if accepted else "undo")
            if accepted:
                break
            model.weights[layer].data = saved_w
            if saved_m is None:
                model.masks.pop(layer, None)
            else:
                model.masks[layer] = saved_m
            lam *= params.gamma
    return model, measure_sparsity(model)


def global_prune(model: Model, rate: float, mu: float, fc_rate: float | None = None) -> Model:
    """Single pass at the same rate on every conv/FC layer, no accuracy feedback."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    model = model.copy()
    for layer in model.weight_layers:
        prune_layer(model, layer, rate, mu, fc_rate)
    return model


def measure_sparsity(model: Model, masks: dict | None = None) -> SparsityReport:
    """Element and filter sparsity (percent) over conv/FC weights.

    A weight counts as sparse when it is exactly zero or masked.
    """
    masks = model.masks if masks is None else masks
    zeros = total = dead = filters = 0
    names, element, conv_names, filt = [], [], [], []
    for i in model.weight_layers:
        w = model.weights[i].data
        z = w == 0
        if i in masks:
            z = z | masks[i]
        nz = int(z.sum())
        zeros += nz
        total += z.size
        name = f"{model.layers[i].kind}{i}"
        names.append(name)
        element.append(100.0 * nz / z.size)
        if model.layers[i].kind == CONV:
            d = int(z.reshape(z.shape[0], -1).all(axis=1).sum())
            dead += d
            filters += z.shape[0]
            conv_names.append(name)
            filt.append(100.0 * d / z.shape[0])
    return SparsityReport(100.0 * zeros / total if total else 0.0,
                          100.0 * dead / filters if filters else 0.0,
                          names, element, conv_names, filt)



def mixed_prune(model: Model, sparsity: float, mu: float) -> Model:
    """Prune every conv/FC layer to element sparsity ``sparsity`` (a fraction).

    Conv layers first lose ``floor(sparsity * (1 - mu) * N)`` whole filters, then
    (when ``mu > 0``) individual weights until ``floor(sparsity * size)`` are
    masked; ``mu = 0`` is pure filter pruning at ``floor(sparsity * N)`` filters.
    FC layers are pruned unstructured to the same fraction.
    """
    if not 0 <= sparsity <= 1:
        raise ValueError("sparsity must lie in [0, 1]")
    if not 0 <= mu <= 1:
        raise ValueError("mu must lie in [0, 1]")
    model = model.copy()
    for layer in model.weight_layers:
        w = model.weights[layer].data
        mask = np.zeros(w.shape, bool)
        if model.layers[layer].kind == CONV:
            n = w.shape[0]
            filters = sparsity if mu == 0 else sparsity * (1 - mu)
            mask = filter_prune(w, mask, math.floor(filters * n + 1e-9) / n)
            if mu == 0:
                model.masks[layer] = mask
                continue
        free = int((~mask).sum())
        k = max(0, math.floor(sparsity * w.size) - int(mask.sum()))
        if free:
            mask = unstructured_prune(w, mask, min(1.0, k / free))
        model.masks[layer] = mask
    model.apply_masks()
    return model


def prune_to_sparsity(model: Model, target: float, mu: float,
                      measure: Callable[[Model], float] | None = None,
                      iters: int = 30, pruner: Callable = None) -> tuple[Model, float]:
    """:func:`mixed_prune` at the sparsity whose measured overall value lands closest to ``target``.

    ``target`` is a percentage; ``measure(model)`` defaults to the
    :func:`measure_sparsity` overall value (pass one that quantizes first to
    match deployed sparsity). ``pruner(model, x, mu)`` replaces :func:`mixed_prune`,
    e.g. :func:`global_prune` to bisect its uniform rate. Returns
    ``(pruned_model, x)``.
    """
    if not 0 <= target <= 100:
        raise ValueError("target sparsity is a percentage in [0, 100]")
    measure = measure or (lambda m: measure_sparsity(m).overall)
    pruner = pruner or mixed_prune
    lo, hi = 0.0, 1.0
    best = None
    for _ in range(iters):
        frac = (lo + hi) / 2
        pruned = pruner(model, frac, mu)
        s = measure(pruned)
        if best is None or abs(s - target) < abs(best[2] - target):
            best = (pruned, frac, s)
        if s < target:
            lo = frac
        else:
            hi = frac
    return best[0], best[1]
