"""Dense float32 kernels for the small CNNs used throughout the toolkit.

Every operation accepts a single sample (channels-first, no batch axis) or a
batch with a leading axis. Forward functions that need a backward pass return
``(output, cache)``; the matching ``*_backward`` consumes the cache.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


@dataclass
class Tensor:
    """A float32 array with an optional gradient buffer of the same shape."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=DTYPE)
            if self.grad.shape != self.data.shape:
                raise ValueError(
                    f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.zero_grad()
        self.grad += g.astype(DTYPE, copy=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ValueError(f"expected {ndim}-d sample or {ndim + 1}-d batch, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size - kernel + 2 * padding
    if stride <= 0 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if span < 0:
        raise ValueError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ValueError(
            f"output size ({size} - {kernel} + 2*{padding})/{stride} + 1 is not integral")
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    b, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows ordered (b, oy, ox); columns ordered (c, ky, kx) to match kernel.reshape(N, -1)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    xb, single = _as_batch(x, 3)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be N x C x K x K, got {kernel.shape}")
    n, c, k, _ = kernel.shape
    if xb.shape[1] != c:
        raise ValueError(f"input has {xb.shape[1]} channels, kernel expects {c}")
    cols, ho, wo = _im2col(xb, k, stride, padding)
    out = cols @ kernel.reshape(n, -1).T
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)
    out = np.ascontiguousarray(out.reshape(xb.shape[0], ho, wo, n).transpose(0, 3, 1, 2))
    cache = (xb.shape, cols, kernel, stride, padding, single)
    return (out[0] if single else out), cache


def conv2d_backward(dout, cache):
    """Return ``(dx, dkernel, dbias)`` for an upstream gradient ``dout``."""
    xshape, cols, kernel, stride, padding, single = cache
    dout, _ = _as_batch(dout, 3)
    b, c, h, w = xshape
    n, _, k, _ = kernel.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, n)
    dkernel = (dmat.T @ cols).reshape(kernel.shape)
    dbias = dmat.sum(axis=0)
    dcols = (dmat @ kernel.reshape(n, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), dkernel, dbias


def conv2d(input, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``input`` (C x H x W) with ``kernel`` (N x C x K x K)."""
    return conv2d_forward(input, kernel, None, stride, padding)[0]


def linear_forward(x, weights, bias):
    xb, single = _as_batch(x, 1)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weights.ndim != 2 or xb.shape[1] != weights.shape[1]:
        raise ValueError(f"input length {xb.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    out = xb @ weights.T + bias
    return (out[0] if single else out), (xb, weights, single)


def linear_backward(dout, cache):
    xb, weights, single = cache
    dout, _ = _as_batch(dout, 1)
    dx = dout @ weights
    return (dx[0] if single else dx), dout.T @ xb, dout.sum(axis=0)


def linear(input, weights, bias) -> np.ndarray:
    return linear_forward(input, weights, bias)[0]


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, DTYPE(0)), x > 0


def relu_backward(dout, cache):
    return np.where(cache, dout, DTYPE(0)).astype(DTYPE)


def relu(x) -> np.ndarray:
    return relu_forward(x)[0]


def maxpool2d_forward(x, window: int):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    xb, single = _as_batch(x, 3)
    if window <= 0:
        raise ValueError("window must be positive")
    b, c, h, w = xb.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ValueError(f"window {window} larger than input {h}x{w}")
    blocks = xb[:, :, :ho * window, :wo * window].reshape(b, c, ho, window, wo, window)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, window * window)
    # argmax returns the first maximum, so ties route to the earliest element
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return (out[0] if single else out), (xb.shape, idx, window, single)


def maxpool2d_backward(dout, cache):
    shape, idx, window, single = cache
    dout, _ = _as_batch(dout, 3)
    b, c, h, w = shape
    ho, wo = idx.shape[2], idx.shape[3]
    flat = np.zeros((b, c, ho, wo, window * window), dtype=DTYPE)
    np.put_along_axis(flat, idx[..., None], dout[..., None], axis=-1)
    blocks = flat.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=DTYPE)
    dx[:, :, :ho * window, :wo * window] = blocks.reshape(b, c, ho * window, wo * window)
    return dx[0] if single else dx


def maxpool2d(x, window: int) -> np.ndarray:
    return maxpool2d_forward(x, window)[0]


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy_forward(logits, labels):
    """Mean cross-entropy over a batch and its gradient with respect to ``logits``."""
    zb, single = _as_batch(logits, 1)
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = zb.shape[1]
    if labels.shape[0] != zb.shape[0]:
        raise ValueError("one label per row of logits required")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    logp = log_softmax(zb)
    rows = np.arange(zb.shape[0])
    loss = -logp[rows, labels].mean(dtype=np.float64)
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= zb.shape[0]
    return float(loss), (grad[0] if single else grad).astype(DTYPE)


def softmax_cross_entropy(logits, label) -> float:
    """``-log(softmax(logits)[label])``; averaged when given a batch."""
    return softmax_cross_entropy_forward(logits, label)[0]


def sgd_step(params, learning_rate: float) -> None:
    """In-place ``w -= lr * grad`` for each :class:`Tensor`, then zero its grad."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    lr = DTYPE(learning_rate)
    for t in params:
        if t.grad is not None:
            t.data -= lr * t.grad
        t.zero_grad()
