"""Dense numeric primitives with paired analytic backward passes.

Tensors are plain ``numpy`` arrays. Model state is float32; every primitive
preserves the dtype it is given so the gradient checker can run in float64.
Convolution and pooling accept either a single sample ``[C, H, W]`` or a
batch ``[N, C, H, W]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""

    def __init__(self, message: str, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(message)


def as_tensor(values, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim == 0:
        raise ShapeError("zero-dim tensors are not allowed", arr.shape)
    if 0 in arr.shape:
        raise ShapeError(f"tensor dims must be positive, got {arr.shape}", arr.shape)
    return arr


@dataclass
class Parameter:
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.value)
        self.value = as_tensor(arr, arr.dtype)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}", x.shape)


# -- convolution ------------------------------------------------------------

def _pad_amount(kernel: tuple[int, int], padding: str) -> tuple[int, int]:
    kh, kw = kernel
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel dims, got {kernel}", kernel)
        return kh // 2, kw // 2
    raise ValueError(f"unknown padding {padding!r}")


def _correlate(xp: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation of a padded batch [N,C,H,W]."""
    cout, cin, kh, kw = weights.shape
    n = xp.shape[0]
    if kh == 1 and kw == 1:
        out = np.tensordot(weights[:, :, 0, 0], xp, axes=([1], [1]))
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ weights.reshape(cout, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, padding: str = "same") -> np.ndarray:
    """Stride-1 2-D convolution (cross-correlation) with zero padding."""
    xb, single = _batched(x, 3)
    if weights.ndim != 4 or xb.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"conv2d input {x.shape} does not match weights {weights.shape}", x.shape, weights.shape
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weights {weights.shape}",
                         bias.shape, weights.shape)
    ph, pw = _pad_amount(weights.shape[2:], padding)
    if xb.shape[2] + 2 * ph < weights.shape[2] or xb.shape[3] + 2 * pw < weights.shape[3]:
        raise ShapeError(f"kernel {weights.shape} larger than input {x.shape}", x.shape, weights.shape)
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb
    out = _correlate(xp, weights)
    out += bias[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, padding: str = "same",
                    need_input_grad: bool = True, need_param_grads: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias)``; skipped pieces are ``None``."""
    xb, single = _batched(x, 3)
    gb, _ = _batched(grad_out, 3)
    cout, cin, kh, kw = weights.shape
    ph, pw = _pad_amount((kh, kw), padding)
    dx = dw = db = None
    if need_param_grads:
        xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb
        n, _, ho, wo = gb.shape
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (g2.T @ cols).reshape(weights.shape)
        db = gb.sum(axis=(0, 2, 3))
    if need_input_grad:
        # full correlation of the upstream gradient with the flipped, channel-transposed kernel
        gp = np.pad(gb, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dxp = _correlate(gp, flipped)
        dx = dxp[:, :, ph:ph + xb.shape[2], pw:pw + xb.shape[3]]
        dx = np.ascontiguousarray(dx)
        if single:
            dx = dx[0]
    return dx, dw, db


# -- pooling ----------------------------------------------------------------

def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 / stride 2 max pooling. Returns the pooled tensor and window argmax (0..3).

    Ties go to the first element in row-major window order.
    """
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {x.shape}", x.shape)
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    gb, single = _batched(grad_out, 3)
    ib, _ = _batched(argmax, 3)
    n, c, h2, w2 = gb.shape
    scatter = np.zeros((n, c, h2, w2, 4), dtype=gb.dtype)
    np.put_along_axis(scatter, ib[..., None], gb[..., None], axis=-1)
    dx = scatter.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
    return dx[0] if single else dx


# -- affine -----------------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``out[m] = sum_n W[m, n] x[n] + b[m]``; ``x`` may carry a leading batch axis."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"dense input {x.shape} does not match weights {weights.shape}",
                         x.shape, weights.shape)
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weights.shape}",
                         bias.shape, weights.shape)
    return x @ weights.T + bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                   need_input_grad: bool = True, need_param_grads: bool = True):
    dx = grad_out @ weights if need_input_grad else None
    dw = db = None
    if need_param_grads:
        if x.ndim == 1:
            dw = np.outer(grad_out, x)
            db = grad_out.copy()
        else:
            dw = grad_out.T @ x
            db = grad_out.sum(axis=0)
    return dx, dw, db


# -- activations ------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward given the sigmoid *output* ``y``."""
    return grad_out * y * (1 - y)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, grad_out: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu_backward(grad_out, x)
    if kind == "sigmoid":
        return sigmoid_backward(grad_out, y)
    raise ValueError(f"unknown activation {kind!r}")


# -- loss -------------------------------------------------------------------

def bce_loss(p, y):
    """Binary cross-entropy on a probability clamped to ``[eps, 1 - eps]``.

    Works elementwise on arrays; returns ``(loss, dloss/dp)``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (pc - y) / (pc * (1 - pc))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# -- gradient checking --------------------------------------------------------

def finite_diff_check(op: Callable[..., tuple[float, Sequence[np.ndarray]]],
                      probes: Sequence[np.ndarray], step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op(*probes)`` must return ``(scalar, [d scalar / d probe_i ...])``. Probes are
    promoted to float64; the error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-4 <= step <= 1e-2:
        raise ValueError(f"step must lie in [1e-4, 1e-2], got {step}")
    probes = [np.array(p, dtype=np.float64) for p in probes]
    _, analytic = op(*probes)
    worst = 0.0
    for i, probe in enumerate(probes):
        grad = np.asarray(analytic[i], dtype=np.float64)
        flat = probe.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up, _ = op(*probes)
            flat[j] = orig - step
            down, _ = op(*probes)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            a = grad.reshape(-1)[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
