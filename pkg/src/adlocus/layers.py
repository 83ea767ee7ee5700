"""Differentiable layer primitives with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64. Spatial layers take
either a single ``(C, H, W)`` tensor or a batch ``(N, C, H, W)``; the output
has the same rank as the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

BCE_EPS = 1e-7

# Kernel offsets in row-major order; conv weights index [o, c, dy, dx].
_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


@dataclass
class LayerGrad:
    """Gradients produced by a backward pass.

    ``param_grads`` follows the order of the layer's parameters
    (weights then bias for a convolution) and is empty for parameter-free
    layers.
    """

    input_grad: np.ndarray
    param_grads: list[np.ndarray] = field(default_factory=list)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _batched(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None) -> None:
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ShapeError(f"weights must be (C_out, C_in, 3, 3), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect {weights.shape[1]}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must be ({weights.shape[0]},), got {bias.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    """Stack the nine shifted copies of a zero-padded batch: (C*9, N*H*W)."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w))
    for dy, dx in _OFFSETS:
        cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, n * h * w)


def conv2d_forward(x, weights, bias) -> np.ndarray:
    """3x3 stride-1 convolution with zero padding 1 (spatial size preserved)."""
    x, single = _batched(as_tensor(x))
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    _check_conv(x, weights, bias)
    n, _, h, w = x.shape
    c_out = weights.shape[0]
    out = weights.reshape(c_out, -1) @ _im2col(x)
    out += bias[:, None]
    out = out.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    return _unbatch(np.ascontiguousarray(out), single)


def conv2d_backward(x, weights, upstream) -> LayerGrad:
    """Gradients of a same-padded 3x3 convolution w.r.t. input, weights and bias."""
    x, single = _batched(as_tensor(x))
    weights = as_tensor(weights)
    upstream, up_single = _batched(as_tensor(upstream), "upstream_grad")
    _check_conv(x, weights, None)
    n, c, h, w = x.shape
    c_out = weights.shape[0]
    if upstream.shape != (n, c_out, h, w) or up_single != single:
        raise ShapeError(
            f"upstream_grad shape {upstream.shape} does not match conv output {(n, c_out, h, w)}"
        )
    g = upstream.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dw = (g @ _im2col(x).T).reshape(weights.shape)
    db = g.sum(axis=1)
    dcols = (weights.reshape(c_out, -1).T @ g).reshape(c, 3, 3, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2))
    for dy, dx in _OFFSETS:
        dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
    dx_ = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
    return LayerGrad(_unbatch(dx_, single), [dw, db])


def maxpool2_forward(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool.

    Returns the pooled tensor and, per output cell, the argmax position inside
    its window (0..3 in row-major order; first occurrence wins on ties).
    """
    x, single = _batched(as_tensor(x))
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return _unbatch(out, single), _unbatch(idx, single)


def maxpool2_backward(argmax, upstream) -> LayerGrad:
    argmax = np.asarray(argmax)
    upstream, single = _batched(as_tensor(upstream), "upstream_grad")
    if argmax.ndim == 3:
        argmax = argmax[None]
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != upstream shape {upstream.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() > 3):
        raise AssertionError("max-pool argmax index outside its 2x2 window")
    n, c, hh, ww = upstream.shape
    routed = (np.arange(4) == argmax[..., None]) * upstream[..., None]
    dx = (
        routed.reshape(n, c, hh, ww, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * hh, 2 * ww)
    )
    return LayerGrad(_unbatch(dx, single))


def upsample2_forward(x) -> np.ndarray:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample input must be rank 3 or 4, got {x.shape}")
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2_backward(upstream) -> LayerGrad:
    up = as_tensor(upstream)
    if up.ndim not in (3, 4) or up.shape[-1] % 2 or up.shape[-2] % 2:
        raise ShapeError(f"upsample upstream must have even spatial dims, got {up.shape}")
    h, w = up.shape[-2:]
    summed = up.reshape(*up.shape[:-2], h // 2, 2, w // 2, 2).sum(axis=(-3, -1))
    return LayerGrad(summed)


def relu_forward(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, upstream) -> LayerGrad:
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu: input {x.shape} vs upstream {upstream.shape}")
    return LayerGrad(np.where(x > 0, upstream, 0.0))


_SIG_FLOOR = np.finfo(np.float64).tiny
_SIG_CEIL = np.nextafter(1.0, 0.0)


def sigmoid_forward(x) -> np.ndarray:
    """Logistic function, kept strictly inside (0, 1) even for huge |x|."""
    x = as_tensor(x)
    # exp only ever sees non-positive arguments, so it cannot overflow
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(y, _SIG_FLOOR, _SIG_CEIL)


def sigmoid_backward(y, upstream) -> LayerGrad:
    y = as_tensor(y)
    upstream = as_tensor(upstream)
    if y.shape != upstream.shape:
        raise ShapeError(f"sigmoid: output {y.shape} vs upstream {upstream.shape}")
    return LayerGrad(y * (1.0 - y) * upstream)


def bce_loss(prob, target) -> tuple[float, np.ndarray]:
    """Mean per-pixel binary cross-entropy.

    Probabilities are clamped to ``[BCE_EPS, 1 - BCE_EPS]``; the returned
    gradient is taken w.r.t. the unclamped probabilities with the clamp
    treated as the identity.
    """
    prob = as_tensor(prob)
    target = as_tensor(target)
    if prob.shape != target.shape:
        raise ShapeError(f"bce: prob {prob.shape} vs target {target.shape}")
    p = np.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / prob.size
    return float(loss), grad
