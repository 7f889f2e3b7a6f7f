"""Numeric kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in row-major, channels-last
layout (``[H, W, C]`` for a feature map, ``[B, H, W, C]`` for a batch).
Every kernel accepts an optional leading batch axis.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32


def as_tensor(data, shape: Sequence[int] | None = None, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Build a C-contiguous tensor, optionally reshaping a flat buffer."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise DimensionError(f"all extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"buffer of {arr.size} elements cannot take shape {shape}")
        arr = arr.reshape(shape)
    return arr


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; the same seed yields the same draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "valid":
        if kernel > size:
            raise DimensionError(f"kernel extent {kernel} exceeds input extent {size}")
        return (size - kernel) // stride + 1
    if padding == "same":
        return -(-size // stride)
    raise ArgumentError(f"padding must be 'valid' or 'same', got {padding!r}")


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _check_conv_args(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None, stride: int):
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ArgumentError(f"stride must be a positive integer, got {stride!r}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv input must be [H,W,C] or [B,H,W,C], got shape {x.shape}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [Kh,Kw,Cin,Cout], got shape {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise DimensionError(
            f"input has {x.shape[-1]} channels but kernels expect {kernels.shape[2]}"
        )
    if bias is not None and bias.shape != (kernels.shape[3],):
        raise DimensionError(f"bias shape {bias.shape} does not match Cout={kernels.shape[3]}")


def _pad_input(x4: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    if padding == "same":
        top, bottom = _same_pads(x4.shape[1], kh, stride)
        left, right = _same_pads(x4.shape[2], kw, stride)
        if top or bottom or left or right:
            x4 = np.pad(x4, ((0, 0), (top, bottom), (left, right), (0, 0)))
        return x4, (top, bottom, left, right)
    if padding != "valid":
        raise ArgumentError(f"padding must be 'valid' or 'same', got {padding!r}")
    return x4, (0, 0, 0, 0)


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None,
                   stride: int = 1, padding: str = "valid") -> np.ndarray:
    """2-D cross-correlation, channels-last.

    Accumulates one ``[N, Cin] @ [Cin, Cout]`` product per kernel offset,
    which keeps memory at the size of the output instead of an im2col matrix.
    """
    _check_conv_args(x, kernels, bias, stride)
    batched = x.ndim == 4
    x4 = x if batched else x[None]
    kh, kw, _, cout = kernels.shape
    xp, _ = _pad_input(x4, kh, kw, stride, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((xp.shape[0], ho, wo, cout), dtype=np.result_type(x, kernels))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            out += patch @ kernels[i, j]
    if bias is not None:
        out += bias
    return out if batched else out[0]


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, upstream: np.ndarray,
                    stride: int = 1, padding: str = "valid"):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    _check_conv_args(x, kernels, None, stride)
    batched = x.ndim == 4
    x4 = x if batched else x[None]
    g4 = upstream if batched else upstream[None]
    kh, kw, cin, cout = kernels.shape
    xp, (top, _, left, _) = _pad_input(x4, kh, kw, stride, padding)
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    if g4.shape != (xp.shape[0], ho, wo, cout):
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} does not match forward output "
            f"{(ho, wo, cout) if not batched else (xp.shape[0], ho, wo, cout)}"
        )
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernels)
    g_flat = g4.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            gk[i, j] = xp[:, hs, ws, :].reshape(-1, cin).T @ g_flat
            gxp[:, hs, ws, :] += g4 @ kernels[i, j].T
    gx = gxp[:, top:top + x4.shape[1], left:left + x4.shape[2], :]
    gb = g_flat.sum(axis=0)
    return (gx if batched else gx[0]), gk, gb


# ---------------------------------------------------------------------------
# dense algebra


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_axis(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise ArgumentError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output."""
    return probs * (upstream - (upstream * probs).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# finite differences


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray,
               eps: float = 1e-5, coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(value, gradient)``. When ``coords`` is given, only that
    many coordinates (chosen with ``seed``) are probed. ``point`` is not modified.
    """
    x = np.array(point, dtype=np.float64, copy=True)
    value, analytic = fn(x.copy())
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    if coords is None or coords >= flat.size:
        idx = np.arange(flat.size)
    else:
        idx = seeded_rng(seed).choice(flat.size, size=coords, replace=False)
    worst = 0.0
    for k in idx:
        orig = flat[k]
        flat[k] = orig + eps
        fp, _ = fn(x.copy())
        flat[k] = orig - eps
        fm, _ = fn(x.copy())
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function value is not finite at coordinate {k}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[k]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
