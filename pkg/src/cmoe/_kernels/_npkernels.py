"""Numpy reference kernels for the convolution/pooling hot loops.

Same surface as the compiled backend (_cykernels). im2col emits one row per
output position (N-major) so a convolution collapses into a single GEMM over
the whole batch. Accumulation order in col2im matches the compiled backend
(kernel offsets outermost) so both produce bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    """[N,C,H,W] -> [N*oh*ow, C*kh*kw] patch matrix (zero padding)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add [N*oh*ow, C*kh*kw] back to [N,C,H,W]."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad > 0:
        return xp[:, :, pad : pad + h, pad : pad + w].copy()
    return xp


def maxpool2d_forward(x, k, stride, pad):
    """Windowed max with first-index tie break.

    Returns (out [N,C,oh,ow], idx [N,C,oh,ow]) where idx is the flat H*W
    position of each window's winner in the unpadded input.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if pad > 0:
        fill = np.finfo(x.dtype).min
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(n, c, oh, ow, k * k)
    win = np.argmax(flat, axis=-1)  # first max on ties
    out = np.take_along_axis(flat, win[..., None], axis=-1)[..., 0]
    # window-local index -> unpadded flat index
    oi = (np.arange(oh) * stride - pad)[None, None, :, None]
    oj = (np.arange(ow) * stride - pad)[None, None, None, :]
    ii = oi + win // k
    jj = oj + win % k
    idx = (ii * w + jj).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(dout, idx, h, w):
    """Route each output gradient to its argmax input position."""
    n, c = dout.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    flat_idx = idx.reshape(n, c, -1)
    np.add.at(dx, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat_idx), dout.reshape(n, c, -1))
    return dx.reshape(n, c, h, w)
