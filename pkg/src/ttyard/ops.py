"""Convolution primitives: im2col lowering, grouped and shared-kernel variants.

Everything here is a pure function of ndarrays.  The im2col column layout is
(channel, ki, kj) with channel outermost, so the rows belonging to one group of
a grouped convolution form one contiguous block.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ValueError(
            f"non-positive conv output size for input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    """Gather conv patches of NCHW input into columns (N, C*l*l, OH*OW)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, padding: int,
           oh: int, ow: int) -> np.ndarray:
    """Scatter-add columns back to an NCHW gradient; adjoint of im2col."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kernel, kernel, oh, ow)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1,
           shared_kernel: bool = False) -> np.ndarray:
    """Forward 2D convolution.

    weight is (S, C/groups, l, l), except with shared_kernel=True where one
    kernel (C/groups, l, l) is reused by every group and each group emits a
    single output channel (S == groups).
    """
    n, c, h, w = x.shape
    if shared_kernel:
        cpg, l, _ = weight.shape
        if c != groups * cpg:
            raise ValueError(f"input channels {c} != groups*{cpg}")
        xg = x.reshape(n * groups, cpg, h, w)
        out = conv2d(xg, weight[None], None, stride=stride, padding=padding)
        out = out.reshape(n, groups, out.shape[2], out.shape[3])
        if bias is not None:
            out = out + bias[None, :, None, None]
        return out

    s, cpg, l, _ = weight.shape
    if c != groups * cpg or s % groups:
        raise ValueError(f"channel/group mismatch: x has {c}, weight {weight.shape}, groups {groups}")
    cols, oh, ow = im2col(x, l, stride, padding)
    if groups == 1:
        out = np.matmul(weight.reshape(s, cpg * l * l), cols)
    else:
        spg = s // groups
        colsg = cols.reshape(n, groups, cpg * l * l, oh * ow)
        wg = weight.reshape(groups, spg, cpg * l * l)
        out = np.einsum("gok,ngkp->ngop", wg, colsg).reshape(n, s, oh * ow)
    out = out.reshape(n, s, oh, ow)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 shared_kernel: bool = False):
    """Loop-nest reference convolution; returns (output, multiply count).

    Deliberately independent of the im2col path.  The MAC counter increments
    once per scalar multiply, which is the accounting the cost model mirrors.
    """
    n, c, h, w = x.shape
    if shared_kernel:
        cpg, l, _ = weight.shape
        s = groups
    else:
        s, cpg, l, _ = weight.shape
    oh = conv_out_size(h, l, stride, padding)
    ow = conv_out_size(w, l, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, s, oh, ow), dtype=x.dtype)
    macs = 0
    spg = 1 if shared_kernel else s // groups
    for b in range(n):
        for so in range(s):
            g = so // spg
            k = weight if shared_kernel else weight[so]
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for ci in range(cpg):
                        for i in range(l):
                            for j in range(l):
                                acc += xp[b, g * cpg + ci, y * stride + i, xo * stride + j] * k[ci, i, j]
                                macs += 1
                    out[b, so, y, xo] = acc
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out, macs
