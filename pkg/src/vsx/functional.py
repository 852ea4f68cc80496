"""Differentiable 3D kernels on N x C x D x H x W tensors.

Convolutions are cross-correlations evaluated tap by tap: for each kernel
offset, the shifted channels-last input is multiplied by that tap's
(Cin, Cout) matrix and accumulated. The transposed convolution reuses the
same tap loop in adjoint form, so the two are exact transposes of each other.
"""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_result

__all__ = [
    "conv3d",
    "conv_transpose3d",
    "maxpool3d",
    "group_norm",
    "relu",
    "sigmoid",
    "softmax",
    "concat",
    "split",
    "resize_trilinear",
    "interpolation_matrix",
]


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"{name} needs 3 values, got {v}")
    return v


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} expects a 5-D N x C x D x H x W tensor, got shape {x.shape}")


def _offsets(k, s, out_dims):
    """Yield (i, j, m, window) where ``window`` selects the padded-input voxels that kernel
    tap (i, j, m) touches for every output voxel."""
    for i in range(k[0]):
        si = slice(i, i + s[0] * (out_dims[0] - 1) + 1, s[0])
        for j in range(k[1]):
            sj = slice(j, j + s[1] * (out_dims[1] - 1) + 1, s[1])
            for m in range(k[2]):
                sm = slice(m, m + s[2] * (out_dims[2] - 1) + 1, s[2])
                yield i, j, m, (slice(None), si, sj, sm)


def _channels_last(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 4, 1))


def _channels_first(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 4, 1, 2, 3))


def _pad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _unpad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    d, h, w = x.shape[2:]
    return x[:, :, p[0] : d - p[0], p[1] : h - p[1], p[2] : w - p[2]]


def _conv_out_dims(dims, k, s, p):
    out = []
    for n, kk, ss, pp, axis in zip(dims, k, s, p, "DHW"):
        span = n + 2 * pp - kk
        if span < 0:
            raise ShapeError(f"kernel size {kk} exceeds padded extent {n + 2 * pp} along axis {axis}")
        out.append(span // ss + 1)
    return tuple(out)


def _tap_products(xl: np.ndarray, taps: np.ndarray, k, s, out_dims) -> np.ndarray:
    """Sum over kernel taps of (shifted channels-last input) @ (tap matrix)."""
    n = xl.shape[0]
    cout = taps.shape[-1]
    out = np.zeros((n * out_dims[0] * out_dims[1] * out_dims[2], cout), dtype=np.result_type(xl, taps))
    for i, j, m, win in _offsets(k, s, out_dims):
        out += xl[win].reshape(len(out), -1) @ taps[i, j, m]
    return out


def _tap_scatter(gm: np.ndarray, taps: np.ndarray, k, s, out_dims, target: np.ndarray) -> None:
    """Adjoint of :func:`_tap_products`: add ``gm @ tap.T`` into the shifted windows of ``target``."""
    n = target.shape[0]
    cin = target.shape[-1]
    shape = (n,) + tuple(out_dims) + (cin,)
    for i, j, m, win in _offsets(k, s, out_dims):
        target[win] += (gm @ taps[i, j, m].T).reshape(shape)


def _tap_gradients(xl: np.ndarray, gm: np.ndarray, k, s, out_dims) -> np.ndarray:
    """Per-tap (Cin, Cout) gradient blocks: shifted input transposed times output gradient."""
    cin = xl.shape[-1]
    out = np.empty(tuple(k) + (cin, gm.shape[1]), dtype=gm.dtype)
    for i, j, m, win in _offsets(k, s, out_dims):
        out[i, j, m] = xl[win].reshape(len(gm), cin).T @ gm
    return out


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation.

    ``kernel`` has shape (Cout, Cin, kd, kh, kw); the output spatial size along each
    axis is ``(n + 2*pad - k) // stride + 1``.
    """
    _check_5d(x, "conv3d")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-D (Cout, Cin, kd, kh, kw), got {kernel.shape}")
    s = _triple(stride, "stride")
    p = _triple(padding, "padding")
    if min(s) <= 0:
        raise ValueError(f"stride must be positive, got {s}")
    if min(p) < 0:
        raise ValueError(f"padding must be non-negative, got {p}")
    n, cin = x.shape[:2]
    cout, kcin = kernel.shape[:2]
    k = kernel.shape[2:]
    if kcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    out_dims = _conv_out_dims(x.shape[2:], k, s, p)
    xl = _channels_last(_pad(x.data, p))
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # (kd, kh, kw, Cin, Cout)
    out = _tap_products(xl, taps, k, s, out_dims)
    if bias is not None:
        out += bias.data
    out = _channels_first(out.reshape((n,) + out_dims + (cout,)))

    def backward(g):
        gm = _channels_last(g).reshape(-1, cout)
        gx = gk = gb = None
        if x.requires_grad:
            gxl = np.zeros(xl.shape, dtype=g.dtype)
            _tap_scatter(gm, taps, k, s, out_dims, gxl)
            gx = np.ascontiguousarray(_unpad(_channels_first(gxl), p))
        if kernel.requires_grad:
            gk = np.ascontiguousarray(_tap_gradients(xl, gm, k, s, out_dims).transpose(4, 3, 0, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, inputs, backward, "conv3d")


def conv_transpose3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=2, padding=0) -> Tensor:
    """Transposed 3D convolution, the adjoint of :func:`conv3d` w.r.t. its input.

    ``kernel`` uses the conv3d layout of the convolution being transposed, so for this
    op it reads (Cin, Cout, kd, kh, kw). Output size per axis is
    ``(n - 1)*stride + k - 2*pad``.
    """
    _check_5d(x, "conv_transpose3d")
    if kernel.ndim != 5:
        raise ShapeError(f"conv_transpose3d kernel must be 5-D (Cin, Cout, kd, kh, kw), got {kernel.shape}")
    s = _triple(stride, "stride")
    p = _triple(padding, "padding")
    if min(s) <= 0:
        raise ValueError(f"stride must be positive, got {s}")
    if min(p) < 0:
        raise ValueError(f"padding must be non-negative, got {p}")
    n, cin = x.shape[:2]
    kcin, cout = kernel.shape[:2]
    k = kernel.shape[2:]
    if kcin != cin:
        raise ShapeError(f"conv_transpose3d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose3d: bias shape {bias.shape} != ({cout},)")
    in_dims = tuple(x.shape[2:])
    padded = tuple((d - 1) * ss + kk for d, ss, kk in zip(in_dims, s, k))
    if any(pd - 2 * pp <= 0 for pd, pp in zip(padded, p)):
        raise ShapeError("conv_transpose3d: padding removes the whole output")
    # Same taps as the conv3d this op transposes: (kd, kh, kw, Cout, Cin) in conv terms.
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))
    xm = _channels_last(x.data).reshape(-1, cin)
    outl = np.zeros((n,) + padded + (cout,), dtype=np.result_type(x.data, kernel.data))
    _tap_scatter(xm, taps, k, s, in_dims, outl)
    if bias is not None:
        outl += bias.data
    out = np.ascontiguousarray(_unpad(_channels_first(outl), p))

    def backward(g):
        gl = _channels_last(_pad(g, p))
        gx = gk = gb = None
        if x.requires_grad:
            gx = _channels_first(_tap_products(gl, taps, k, s, in_dims).reshape((n,) + in_dims + (cin,)))
        if kernel.requires_grad:
            gk = np.ascontiguousarray(_tap_gradients(gl, xm, k, s, in_dims).transpose(4, 3, 0, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, inputs, backward, "conv_transpose3d")


def maxpool3d(x: Tensor, window: int = 2, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled tensor and, per output voxel, the flat index (0 .. window**3 - 1)
    of the winning voxel inside its window. Odd extents are rejected.
    """
    _check_5d(x, "maxpool3d")
    stride = window if stride is None else stride
    if stride != window:
        raise ValueError("maxpool3d supports non-overlapping windows only (stride == window)")
    k = int(window)
    n, c, d, h, w = x.shape
    for size, axis in zip((d, h, w), "DHW"):
        if size % k:
            raise ValueError(f"maxpool3d: extent {size} along axis {axis} is not divisible by {k}")
    od, oh, ow = d // k, h // k, w // k
    blocks = x.data.reshape(n, c, od, k, oh, k, ow, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, od, oh, ow, k**3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, od, oh, ow, k**3), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, od, oh, ow, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(n, c, d, h, w),)

    return make_result(out, (x,), backward, "maxpool3d"), idx


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) over its channels and voxels, then scale and shift."""
    if x.ndim < 3:
        raise ShapeError(f"group_norm expects N x C x spatial..., got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c = x.shape[:2]
    if groups <= 0 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
            gx = (inv * (dxhat - m1 - xh * m2)).reshape(x.shape)
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gbeta = g.sum(axis=red)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "group_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(out, tuple(tensors), backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to {x.shape[axis]}")
    out, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        out.append(x[tuple(index)])
        start += size
    return out


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_out x n_in), half-pixel centers, edge-clamped.

    Equal sizes give the identity.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_trilinear(x: Tensor, size) -> Tensor:
    """Resample the three spatial axes of a 5-D tensor to ``size`` with trilinear weights."""
    _check_5d(x, "resize_trilinear")
    size = _triple(size, "size")
    if tuple(x.shape[2:]) == size:
        return x
    mats = [interpolation_matrix(a, b, x.dtype) for a, b in zip(x.shape[2:], size)]

    def apply(arr, ms):
        for axis, m in zip((2, 3, 4), ms):
            arr = np.moveaxis(np.tensordot(arr, m, axes=([axis], [1])), -1, axis)
        return arr

    out = np.ascontiguousarray(apply(x.data, mats))

    def backward(g):
        return (np.ascontiguousarray(apply(g, [m.T for m in mats])),)

    return make_result(out, (x,), backward, "resize_trilinear")


def warn_clamp(message: str) -> None:
    warnings.warn(message, RuntimeWarning, stacklevel=3)
