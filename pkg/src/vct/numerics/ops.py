"""Differentiable operations over :class:`~vct.numerics.tensor.Tensor`.

Each op computes its forward value with numpy and returns a closure that maps
the output gradient to one gradient per parent (``None`` when a parent does
not need one). Broadcasting is limited to what the pipeline uses: a trailing
bias vector, a scalar, or operands of equal shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_result

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return make_result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    out = (z * cdf).astype(z.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return (g * (cdf + z * pdf),)

    return make_result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_result(out, (x,), backward)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``.

    The clamped region has zero gradient.
    """
    clamped = np.maximum(x.data, floor)
    out = np.log(clamped)

    def backward(g):
        return (np.where(x.data > floor, g / clamped, 0.0),)

    return make_result(out, (x,), backward)


# -- reductions and shape manipulation ----------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return make_result(out, xs, backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows ``x[indices]`` along axis 0; indices are constants."""
    idx = np.asarray(indices, dtype=np.int64)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(out, (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return make_result(out, (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch extents must agree."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def constant_matmul(m, x) -> Tensor:
    """``m @ x`` for a fixed (dense or scipy-sparse) matrix ``m``; only ``x`` gets a gradient."""
    x = as_tensor(x)
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"constant_matmul extents differ: {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.data, dtype=x.dtype)
    mt = m.T

    def backward(g):
        return (np.asarray(mt @ g, dtype=x.dtype),)

    return make_result(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xhat, axis=lead)
        gbeta = np.sum(g, axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


# -- spatial ops (H x W x C layout) ------------------------------------------


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is H x W x Cin, ``w`` is kh x kw x Cin x Cout and ``b`` is Cout.
    Output extents follow floor((n + 2*pad - k) / stride) + 1.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and 4-d kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[2]}, kernel {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},)")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d needs stride >= 1 and pad >= 0")
    h, wd = x.shape[0], x.shape[1]
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(wd, kw, stride, pad)

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # windows: ho x wo x cin x kh x kw -> reorder to match kernel layout
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad or x._backward is not None:
            gcols = (g2 @ wmat.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride,
                    ] += gcols[:, :, i, j, :]
            gx = gxp[pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    return make_result(out, (x, w, b), backward)


def bilinear_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (factor*n x n), half-pixel centers, edge-clamped."""
    m = factor * n
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    mat = np.zeros((m, n), dtype=dtype)
    rows = np.arange(m)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of an H x W x C map by an integer factor (align_corners=False)."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor!r}")
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects HxWxC, got {x.shape}")
    if factor == 1:
        return reshape(x, x.shape)
    uh = bilinear_matrix(x.shape[0], factor, x.dtype)
    uw = bilinear_matrix(x.shape[1], factor, x.dtype)
    out = np.einsum("ah,hwc,bw->abc", uh, x.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ah,abc,bw->hwc", uh, g, uw, optimize=True),)

    return make_result(out, (x,), backward)
