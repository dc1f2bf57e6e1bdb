"""Dense NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` objects in batch x channel x height x width
layout. Everything here is a pure function: inputs are never written to.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: shape mismatch {tuple(np.shape(a))} vs {tuple(np.shape(b))}")


def as_tensor(x, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D BxCxHxW tensor, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and population variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.var) or np.ndim(self.mean) != 1:
            raise _mismatch("NormStats", self.mean, self.var)
        if np.any(np.asarray(self.var) < 0):
            raise ValueError("NormStats: negative variance")

    @property
    def channels(self) -> int:
        return len(self.mean)


def channel_stats(x: np.ndarray) -> NormStats:
    """Mean and biased variance of every channel over the B, H, W axes."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_stats: expected 4-D input, got shape {x.shape}")
    if x.size == 0 or x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ValueError("empty input")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = np.einsum("bchw->c", x) / n
    centered = x - mean[None, :, None, None]
    var = np.einsum("bchw,bchw->c", centered, centered) / n
    return NormStats(mean, var)


# -- elementwise and broadcast ------------------------------------------------

def _check_same(op, x, y):
    if np.isscalar(y) or np.ndim(y) == 0:
        return
    if np.shape(x) != np.shape(y):
        raise _mismatch(op, x, y)


def add(x, y):
    _check_same("add", x, y)
    return np.add(x, y)


def sub(x, y):
    _check_same("sub", x, y)
    return np.subtract(x, y)


def mul(x, y):
    _check_same("mul", x, y)
    return np.multiply(x, y)


def scale(x, k: float):
    return np.multiply(x, np.asarray(k, dtype=np.asarray(x).dtype))


def channel_affine(x: np.ndarray, weight, bias=None) -> np.ndarray:
    """``x * weight[c] + bias[c]`` with length-C operands broadcast per channel."""
    c = x.shape[1]
    if np.shape(weight) != (c,):
        raise _mismatch("channel_affine", x, weight)
    out = x * np.asarray(weight)[None, :, None, None]
    if bias is not None:
        if np.shape(bias) != (c,):
            raise _mismatch("channel_affine", x, bias)
        out = out + np.asarray(bias)[None, :, None, None]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch("matmul", a, b)
    return a @ b


def spatial_mean(x: np.ndarray) -> np.ndarray:
    """Global average pool, keeping the 4-D layout (B, C, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


# -- convolution ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# Samples are unfolded in chunks so the patch matrix of one chunk stays
# cache-resident; on a 200-image batch this halves the cost of the early layers.
CONV_CHUNK = 32


def im2row(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Patches of shape (B*Ho*Wo, k*k*Cin), pixel-major with channels innermost."""
    b, cin, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, pad), conv_output_size(w, kernel, stride, pad)
    xt = np.zeros((b, h + 2 * pad, w + 2 * pad, cin), dtype=x.dtype)
    xt[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    # in NHWC the k*Cin values of one patch row are contiguous, so one strided
    # view covers every patch and the copy moves runs of k*Cin elements
    sb, sh, sw, _ = xt.strides
    view = as_strided(xt, (b, ho, wo, kernel, kernel * cin), (sb, stride * sh, stride * sw, sh, xt.itemsize),
                      writeable=False)
    return view.reshape(b * ho * wo, kernel * kernel * cin)


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    return weight.transpose(2, 3, 1, 0).reshape(-1, weight.shape[0])  # (k*k*Cin, Cout)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0):
    """Like :func:`conv2d` but also returns the per-chunk patch matrices for the backward pass."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _mismatch("conv2d", x, weight)
    b, _, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    wm = _weight_matrix(weight)
    out = np.empty((b, ho, wo, cout), dtype=np.result_type(x, weight))
    cols = []
    for s in range(0, b, CONV_CHUNK):
        patches = im2row(x[s:s + CONV_CHUNK], k, stride, pad)
        n = patches.shape[0] // (ho * wo)
        out[s:s + n] = (patches @ wm).reshape(n, ho, wo, cout)
        cols.append(patches)
    # channels-last in memory; elementwise consumers keep that layout, so the
    # next unfold and the backward reshape need no transpose copy
    return out.transpose(0, 3, 1, 2), cols


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (B,Cin,H,W) with ``weight`` (Cout,Cin,k,k)."""
    return conv2d_forward(x, weight, stride, pad)[0]


def conv2d_backward(dout: np.ndarray, cols: list, weight: np.ndarray, x_shape: tuple,
                    stride: int = 1, pad: int = 0, need_weight: bool = True, need_input: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input and (optionally) weight.

    ``cols`` is the list of patch matrices returned by :func:`conv2d_forward`.
    """
    b, cin, h, w = x_shape
    cout, _, k, _ = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    wm = _weight_matrix(weight)
    dwm = np.zeros_like(wm) if need_weight else None
    dx = np.empty((b, h, w, cin), dtype=dout.dtype) if need_input else None
    s = 0
    for patches in cols:
        n = patches.shape[0] // (ho * wo)
        d = dout[s:s + n].transpose(0, 2, 3, 1).reshape(-1, cout)  # (n*Ho*Wo, Cout)
        if need_weight:
            dwm += patches.T @ d
        if need_input:
            dp = (d @ wm.T).reshape(n, ho, wo, k, k, cin)
            dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=dout.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dp[:, :, :, i, j, :]
            dx[s:s + n] = dxp[:, pad:pad + h, pad:pad + w, :]
        s += n
    dweight = None
    if need_weight:
        dweight = np.ascontiguousarray(dwm.reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
    return (None if dx is None else dx.transpose(0, 3, 1, 2)), dweight


