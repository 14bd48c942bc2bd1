"""Sawtooth, group sawtooth, L1 and group lasso penalties with their subgradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FC, Model, group_norms
from .quantizer import level_units

KINDS = ("group_sawtooth", "sawtooth", "group_lasso", "l1", "none")
GROUP_MODES = ("norm", "residual", "elementwise")


def _check_period(p) -> None:
    if np.any(np.asarray(p) <= 0):
        raise ValueError("level period p must be positive")


def sawtooth_residual(w, p: float, a: float) -> np.ndarray:
    """Signed offset of ``w/p`` (clamped to [-a, a]) from its nearest level index."""
    x = level_units(w, p)
    return np.clip(x, -a, a) - np.floor(x + 0.5)


def sawtooth(w, p: float, a: float):
    """Distance of ``w/p`` (clamped to [-a, a]) from its nearest level index.

    Zero exactly on the levels ``k*p`` with ``|k| <= a``, 0.5 midway between two
    of them, and a growing staircase beyond the clamp.
    """
    out = np.abs(sawtooth_residual(w, p, a))
    return float(out) if out.ndim == 0 else out


def sawtooth_subgradient(w, p: float, a: float):
    """Derivative of :func:`sawtooth` in ``w``; zero at levels, kinks and beyond the clamp."""
    x = level_units(w, p)
    r = np.clip(x, -a, a) - np.floor(x + 0.5)
    frac = x - np.floor(x)
    g = np.where((np.abs(x) < a) & (frac != 0.5), np.sign(r) / p, 0.0)
    return float(g) if g.ndim == 0 else g


def relax_lambda(lambda_s: float, decay: float, epoch: int) -> float:
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    return lambda_s * decay ** epoch


def l1_penalty(w, lambda_reg: float) -> float:
    return lambda_reg * float(np.abs(np.asarray(w, dtype=np.float64)).sum())


def l1_subgradient(w, lambda_reg: float) -> np.ndarray:
    return lambda_reg * np.sign(np.asarray(w, dtype=np.float64))


def group_lasso_penalty(w, lambda_reg: float) -> float:
    """``lambda_reg * sum_g ||w[g]||_2`` over the leading axis of ``w``."""
    return lambda_reg * float(group_norms(np.asarray(w)).sum())


def group_lasso_subgradient(w, lambda_reg: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    n = group_norms(w)
    scale = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
    return lambda_reg * w * scale.reshape((-1,) + (1,) * (w.ndim - 1))


def group_sawtooth_penalty(w, p: float, a: float, lambda_s: float) -> float:
    """``lambda_s * sum_g sawtooth(||w[g]||_2, p, a)`` for one layer."""
    return lambda_s * float(np.sum(sawtooth(group_norms(np.asarray(w)), p, a)))


def group_sawtooth_subgradient(w, p: float, a: float, lambda_s: float) -> np.ndarray:
    # chain rule through the group norm; a zero-norm group gets zero gradient
    w = np.asarray(w, dtype=np.float64)
    n = group_norms(w)
    coef = np.divide(sawtooth_subgradient(n, p, a), n, out=np.zeros_like(n), where=n > 0)
    return lambda_s * w * coef.reshape((-1,) + (1,) * (w.ndim - 1))


def residual_group_penalty(w, p: float, a: float, lambda_s: float) -> float:
    """``lambda_s * sum_g ||residual(w[g])||_2``: a group-lasso norm of the level offsets."""
    w = np.asarray(w)
    return lambda_s * float(group_norms(sawtooth_residual(w, p, a)).sum())


def residual_group_subgradient(w, p: float, a: float, lambda_s: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    r = sawtooth_residual(w, p, a)
    n = group_norms(r)
    coef = np.divide(1.0, n * p, out=np.zeros_like(n), where=n > 0)
    # the residual's slope is 1/p inside the clamp and 0 beyond it
    inside = np.abs(level_units(w, p)) < a
    return lambda_s * np.where(inside, r, 0.0) * coef.reshape((-1,) + (1,) * (w.ndim - 1))


@dataclass
class SawtoothParams:
    p: float
    a: int
    lambda_s: float = 3e-5
    decay: float = 0.8

    def __post_init__(self):
        _check_period(self.p)
        if self.a < 1:
            raise ValueError("clamp a must be >= 1")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


def group_sawtooth_loss(model: Model, params: SawtoothParams, scales: dict | None = None,
                        layers=None) -> float:
    """Group sawtooth penalty over the model's regularized layers.

    ``scales`` maps layer index to its level period and overrides ``params.p``.
    """
    layers = regularized_layers(model) if layers is None else layers
    total = 0.0
    for i in layers:
        p = params.p if scales is None else scales[i]
        total += group_sawtooth_penalty(model.weights[i].data, p, params.a, params.lambda_s)
    return total


def regularized_layers(model: Model, include_fc: bool = True) -> list[int]:
    layers = model.weight_layers[:model.regularized_layers]
    if not include_fc:
        layers = [i for i in layers if model.layers[i].kind != FC]
    return layers


@dataclass
class RegularizerConfig:
    """Which penalty to train with and its coefficients.

    ``clamp_levels`` is the sawtooth clamp ``a``; None means the full level
    range of the active quantization scheme. ``group_mode`` selects how the
    group sawtooth treats a filter/row: the sawtooth of its L2 norm ("norm"),
    the L2 norm of its elements' level offsets ("residual"), or the summed
    per-element sawtooth ("elementwise", the default).
    """

    kind: str = "group_sawtooth"
    lambda_s: float = 3e-5
    decay: float = 0.8
    clamp_levels: int | None = None
    lambda_reg: float = 1e-4
    group_mode: str = "elementwise"
    regularize_fc: bool = True

    def __post_init__(self):
        self.kind = self.kind.lower().replace("-", "_")
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; choose from {KINDS}")
        if self.group_mode not in GROUP_MODES:
            raise ValueError(f"group_mode must be one of {GROUP_MODES}")
        if self.lambda_s < 0 or self.lambda_reg < 0:
            raise ValueError("regularization coefficients must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    @property
    def uses_levels(self) -> bool:
        return self.kind in ("group_sawtooth", "sawtooth")

    def _layer_terms(self, w, p, a, lam):
        kind = self.kind
        if kind == "group_sawtooth" and self.group_mode == "elementwise":
            kind = "sawtooth"
        if kind == "group_sawtooth" and self.group_mode == "residual":
            return (residual_group_penalty(w, p, a, lam),
                    residual_group_subgradient(w, p, a, lam))
        if kind == "group_sawtooth":
            return (group_sawtooth_penalty(w, p, a, lam),
                    group_sawtooth_subgradient(w, p, a, lam))
        if kind == "sawtooth":
            return (lam * float(np.sum(sawtooth(w, p, a))),
                    lam * sawtooth_subgradient(w, p, a))
        if kind == "group_lasso":
            return group_lasso_penalty(w, self.lambda_reg), group_lasso_subgradient(w, self.lambda_reg)
        if kind == "l1":
            return l1_penalty(w, self.lambda_reg), l1_subgradient(w, self.lambda_reg)
        return 0.0, np.zeros(w.shape)

    def penalty_and_gradients(self, model: Model, scales: dict | None, a: int | None,
                              lambda_s: float | None = None):
        """Return ``(penalty, {layer: gradient})`` at the current weights."""
        lam = self.lambda_s if lambda_s is None else lambda_s
        total, grads = 0.0, {}
        if self.kind == "none" or (self.uses_levels and lam == 0):
            return total, grads
        for i in regularized_layers(model, self.regularize_fc):
            p = scales[i] if scales is not None else None
            pen, g = self._layer_terms(model.weights[i].data, p, a, lam)
            total += pen
            grads[i] = g.astype(np.float32)
        return total, grads
