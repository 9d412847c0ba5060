"""Differentiable primitives: elementwise math, reductions, linear algebra,
convolution, trilinear sampling, and normalization.

Every operation runs in float64.  Convolution is cross-correlation with zero
padding (no kernel flip).  Trilinear sampling uses a zero-padding border:
corner cells outside the volume contribute nothing, so values fade linearly
to zero within one cell of the boundary and vanish beyond it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, accumulate_grad, as_tensor, record_op

__all__ = [
    "add", "sub", "mul", "neg", "scale", "exp", "log", "relu", "sigmoid",
    "softplus", "absolute", "square", "matmul", "reshape", "transpose",
    "concat", "getitem", "tsum", "tmean", "softmax", "affine", "conv",
    "trilinear_sample", "layer_norm", "nn_upsample3d", "inverse_sigmoid",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return record_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape))

    return record_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return record_op(a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        accumulate_grad(a, -g)

    return record_op(-a.data, (a,), backward)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    factor = float(factor)

    def backward(g):
        accumulate_grad(a, g * factor)

    return record_op(a.data * factor, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericsError below
        out_data = np.exp(a.data)

    def backward(g):
        accumulate_grad(a, g * out_data)

    return record_op(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")

    def backward(g):
        accumulate_grad(a, g / a.data)

    return record_op(np.log(a.data), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        accumulate_grad(a, g * mask)

    return record_op(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid(a.data)

    def backward(g):
        accumulate_grad(a, g * out_data * (1.0 - out_data))

    return record_op(out_data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    a = as_tensor(a)

    def backward(g):
        accumulate_grad(a, g * _sigmoid(a.data))

    return record_op(np.logaddexp(0.0, a.data), (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        accumulate_grad(a, g * sign)

    return record_op(np.abs(a.data), (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        accumulate_grad(a, 2.0 * g * a.data)

    return record_op(a.data * a.data, (a,), backward)


def inverse_sigmoid(a, eps: float = 1e-7) -> Tensor:
    """logit with inputs clamped to [eps, 1-eps]; gradient zero where clamped."""
    a = as_tensor(a)
    clamped = np.clip(a.data, eps, 1.0 - eps)
    inside = (a.data >= eps) & (a.data <= 1.0 - eps)

    def backward(g):
        accumulate_grad(a, g * inside / (clamped * (1.0 - clamped)))

    return record_op(np.log(clamped / (1.0 - clamped)), (a,), backward)


# ---------------------------------------------------------------------------
# shape & indexing


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    in_shape = a.shape

    def backward(g):
        accumulate_grad(a, g.reshape(in_shape))

    return record_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        accumulate_grad(a, np.ascontiguousarray(g.transpose(inverse)))

    return record_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one input")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate_grad(p, g[tuple(idx)])

    return record_op(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing; backward scatter-adds into the source."""
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        np.add.at(full, index, g)
        accumulate_grad(a, full)

    return record_op(np.ascontiguousarray(a.data[index]), (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, in_shape).copy())

    return record_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([in_shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, in_shape) / count)

    return record_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        accumulate_grad(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        accumulate_grad(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return record_op(a.data @ b.data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """x @ w + b with the bias broadcast over leading axes; accepts 1-D x."""
    x = as_tensor(x)
    w, b = as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ValueError(f"affine weight/bias shapes inconsistent: {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine inner dims differ: {x.shape} vs {w.shape}")
    if x.ndim == 1:
        flat = reshape(x, (1, x.shape[0]))
        return reshape(add(matmul(flat, w), b), (w.shape[1],))
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# softmax


def softmax(logits, axis: int) -> Tensor:
    """Max-shifted softmax; slices along ``axis`` sum to one."""
    logits = as_tensor(logits)
    if not isinstance(axis, (int, np.integer)):
        raise ValueError("softmax axis must be an integer")
    if not -logits.ndim <= axis < logits.ndim:
        raise ValueError(f"softmax axis {axis} invalid for rank {logits.ndim}")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        accumulate_grad(logits, out_data * (g - inner))

    return record_op(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution


def _triple(value) -> tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {value!r}")
    return t


def conv(volume, kernel, bias, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation over an (X, Y, Z, Cin) volume.

    ``kernel`` is (kx, ky, kz, Cin, Cout), ``bias`` is (Cout,).  Zero padding;
    output extent per axis is floor((in + 2*pad - k)/stride) + 1.  The 2-D
    case is the same call with a unit depth extent.
    """
    volume, kernel, bias = as_tensor(volume), as_tensor(kernel), as_tensor(bias)
    if volume.ndim != 4:
        raise ValueError(f"conv volume must be (X, Y, Z, C), got {volume.shape}")
    if kernel.ndim != 5:
        raise ValueError(f"conv kernel must be (kx, ky, kz, Cin, Cout), got {kernel.shape}")
    kx, ky, kz, cin, cout = kernel.shape
    if volume.shape[3] != cin:
        raise ValueError(f"channel mismatch: volume has {volume.shape[3]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias must be ({cout},), got {bias.shape}")
    sx, sy, sz = _triple(stride)
    px, py, pz = _triple(padding)
    if min(sx, sy, sz) < 1:
        raise ValueError("stride must be >= 1")
    if min(px, py, pz) < 0:
        raise ValueError("padding must be >= 0")
    x, y, z, _ = volume.shape
    ox = (x + 2 * px - kx) // sx + 1
    oy = (y + 2 * py - ky) // sy + 1
    oz = (z + 2 * pz - kz) // sz + 1
    if min(ox, oy, oz) < 1:
        raise ValueError("conv output would be empty")

    padded = np.pad(volume.data, ((px, px), (py, py), (pz, pz), (0, 0)))
    windows = sliding_window_view(padded, (kx, ky, kz), axis=(0, 1, 2))
    windows = windows[::sx, ::sy, ::sz]  # (ox, oy, oz, Cin, kx, ky, kz), a view
    out_data = np.tensordot(windows, kernel.data, axes=([3, 4, 5, 6], [3, 0, 1, 2]))
    out_data = out_data + bias.data

    def backward(g):
        if kernel.requires_grad:
            dw = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2]))
            accumulate_grad(kernel, dw.transpose(1, 2, 3, 0, 4))
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 1, 2)))
        if volume.requires_grad:
            dpad = np.zeros_like(padded)
            for i in range(kx):
                for j in range(ky):
                    for k in range(kz):
                        contrib = g @ kernel.data[i, j, k].T
                        dpad[i : i + sx * ox : sx,
                             j : j + sy * oy : sy,
                             k : k + sz * oz : sz] += contrib
            accumulate_grad(volume, dpad[px : px + x, py : py + y, pz : pz + z])

    return record_op(out_data, (volume, kernel, bias), backward)


# ---------------------------------------------------------------------------
# trilinear sampling


def _corner_gather(data_flat, ix, iy, iz, extents):
    nx, ny, nz = extents
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    lin = (np.clip(ix, 0, nx - 1) * ny + np.clip(iy, 0, ny - 1)) * nz + np.clip(iz, 0, nz - 1)
    vals = data_flat[lin] * inside[:, None]
    return vals, lin, inside


def trilinear_sample(volume, points) -> Tensor:
    """Interpolate an (X, Y, Z, C) volume at continuous grid coordinates.

    ``points`` is (..., 3) or a single (3,) point in index space where cell
    centers sit at integer coordinates.  Corners falling outside the volume
    contribute zero, so a point beyond one cell outside returns exactly zero.
    Differentiable with respect to both the volume and the points.
    """
    volume = as_tensor(volume)
    points = as_tensor(points)
    if volume.ndim != 4:
        raise ValueError(f"trilinear volume must be (X, Y, Z, C), got {volume.shape}")
    if points.shape[-1] != 3:
        raise ValueError(f"points must have a trailing axis of 3, got {points.shape}")
    single = points.ndim == 1
    lead_shape = points.shape[:-1]
    p = points.data.reshape(-1, 3)
    nx, ny, nz, c = volume.shape
    data_flat = volume.data.reshape(-1, c)

    x0 = np.floor(p[:, 0]).astype(np.int64)
    y0 = np.floor(p[:, 1]).astype(np.int64)
    z0 = np.floor(p[:, 2]).astype(np.int64)
    fx = p[:, 0] - x0
    fy = p[:, 1] - y0
    fz = p[:, 2] - z0

    corners = []
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        sx = 1.0 if dx else -1.0
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            sy = 1.0 if dy else -1.0
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                sz = 1.0 if dz else -1.0
                vals, lin, inside = _corner_gather(
                    data_flat, x0 + dx, y0 + dy, z0 + dz, (nx, ny, nz)
                )
                corners.append((vals, lin, inside, wx, wy, wz, sx, sy, sz))

    out = np.zeros((p.shape[0], c))
    for vals, _, _, wx, wy, wz, _, _, _ in corners:
        out += (wx * wy * wz)[:, None] * vals

    def backward(g):
        g2 = g.reshape(-1, c)
        if volume.requires_grad:
            dflat = np.zeros_like(data_flat)
            for vals, lin, inside, wx, wy, wz, _, _, _ in corners:
                w = (wx * wy * wz) * inside
                np.add.at(dflat, lin[inside], (w[:, None] * g2)[inside])
            accumulate_grad(volume, dflat.reshape(volume.shape))
        if points.requires_grad:
            dp = np.zeros_like(p)
            for vals, _, _, wx, wy, wz, sx, sy, sz in corners:
                gv = (g2 * vals).sum(axis=1)
                dp[:, 0] += gv * sx * wy * wz
                dp[:, 1] += gv * wx * sy * wz
                dp[:, 2] += gv * wx * wy * sz
            accumulate_grad(points, dp.reshape(points.shape))

    result = record_op(out, (volume, points), backward)
    if single:
        return reshape(result, (c,))
    if lead_shape != (p.shape[0],):
        return reshape(result, lead_shape + (c,))
    return result


# ---------------------------------------------------------------------------
# normalization & upsampling


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("layer_norm gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            accumulate_grad(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            accumulate_grad(x, inv * (gx - m1 - xhat * m2))

    return record_op(out_data, (x, gamma, beta), backward)


def nn_upsample3d(x, factors) -> Tensor:
    """Nearest-neighbor repeat along the three leading spatial axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"nn_upsample3d expects (X, Y, Z, C), got {x.shape}")
    fx, fy, fz = _triple(factors)
    if min(fx, fy, fz) < 1:
        raise ValueError("upsample factors must be >= 1")
    out_data = np.repeat(np.repeat(np.repeat(x.data, fx, axis=0), fy, axis=1), fz, axis=2)
    nx, ny, nz, c = x.shape

    def backward(g):
        blocked = g.reshape(nx, fx, ny, fy, nz, fz, c)
        accumulate_grad(x, blocked.sum(axis=(1, 3, 5)))

    return record_op(out_data, (x,), backward)
