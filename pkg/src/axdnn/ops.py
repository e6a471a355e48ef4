"""Array-level layer primitives: forward passes and their gradients.

Convolutions run as im2col + matmul with stride 1. All functions keep the
dtype of their inputs (float32 in training, float64 for finite-difference
checks), so there is no silent precision loss either way.
"""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, kernel: int, pad: int) -> np.ndarray:
    """Unfold (N, C, H, W) into patch rows of shape (N*Ho*Wo, C*kernel*kernel)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    ho = h - kernel + 1
    wo = w - kernel + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {kernel} does not fit input of spatial size "
                         f"{h - 2 * pad}x{w - 2 * pad} with pad {pad}")
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, ho, wo, c, kernel, kernel),
        strides=(sn, sh, sw, sc, sh, sw), writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, c * kernel * kernel)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int):
    """x: (N, C, H, W), w: (OC, C, k, k), b: (OC,) -> (y, cols) with cols cached."""
    n = x.shape[0]
    oc, _, kernel, _ = w.shape
    ho = x.shape[2] + 2 * pad - kernel + 1
    wo = x.shape[3] + 2 * pad - kernel + 1
    cols = im2col(x, kernel, pad)
    y = cols @ w.reshape(oc, -1).T + b
    y = y.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, x_shape: tuple,
                    w: np.ndarray, pad: int):
    """Gradients of a stride-1 convolution.

    dy: (N, OC, Ho, Wo). Returns (dx, dw, db). dx comes from the full
    convolution of dy with the kernel flipped in both spatial axes and the
    channel axes swapped, which reuses the same im2col machinery.
    """
    n, c, h, wdt = x_shape
    oc, _, kernel, _ = w.shape
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, oc)

    dw = (dy_flat.T @ cols).reshape(w.shape)
    db = dy_flat.sum(axis=0)

    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx_pad, _ = conv2d_forward(dy, w_flip, np.zeros(c, dtype=dy.dtype), kernel - 1)
    dx = dx_pad[:, :, pad:pad + h, pad:pad + wdt] if pad else dx_pad
    return np.ascontiguousarray(dx), dw, db


def avgpool2d_forward(x: np.ndarray, kernel: int = 2) -> np.ndarray:
    """Non-overlapping average pooling; trailing rows/cols beyond a full window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    trimmed = x[:, :, :ho * kernel, :wo * kernel]
    return trimmed.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))


def avgpool2d_backward(dy: np.ndarray, x_shape: tuple, kernel: int = 2) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = h // kernel, w // kernel
    dx = np.zeros(x_shape, dtype=dy.dtype)
    spread = np.repeat(np.repeat(dy, kernel, axis=2), kernel, axis=3)
    dx[:, :, :ho * kernel, :wo * kernel] = spread / (kernel * kernel)
    return dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (N, F_in), w: (F_out, F_in), b: (F_out,)."""
    return x @ w.T + b


def dense_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)
