"""Parametric differentiable operators built on the kernel backend.

conv2d and max_pool2d lower to the im2col/col2im kernels selected at import
time (compiled or numpy; both share one accumulation order, so results are
bit-identical across backends). batch_norm and cross_entropy are fused here
rather than composed from primitives to keep the tape short.
"""

from __future__ import annotations

import numpy as np

from cmoe._kernels import col2im, im2col, maxpool2d_backward, maxpool2d_forward
from cmoe.errors import ShapeError
from cmoe.tensor import Tensor, _accum, _make


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw] filters.

    The whole batch is lowered to one [N*oh*ow, C*kh*kw] patch matrix and a
    single GEMM against the flattened filters; backward reuses the saved
    patch matrix for the weight gradient and scatters col2im for the input.
    """
    n, c, h, wdt = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    cols = np.asarray(im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad))
    w2d = w.data.reshape(f, -1)
    out2d = cols @ w2d.T
    if b is not None:
        out2d += b.data
    out_data = out2d.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        if w.requires_grad:
            _accum(w, (g2d.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2d.sum(axis=0))
        if x.requires_grad:
            dcols = g2d @ w2d
            _accum(x, np.asarray(col2im(dcols, n, c, h, wdt, kh, kw, stride, pad)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Window max over [N,C,H,W]; ties route gradient to the first maximum."""
    n, c, h, w = x.shape
    out_data, idx = maxpool2d_forward(np.ascontiguousarray(x.data), k, stride, pad)
    out_data = np.asarray(out_data)
    idx = np.asarray(idx)

    def backward(g):
        dx = np.asarray(maxpool2d_backward(np.ascontiguousarray(g), idx, h, w))
        _accum(x, dx.reshape(x.shape))

    return _make(out_data, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over batch (and spatial dims for 4-D input) per channel.

    Training mode uses biased batch variance for normalization and folds the
    unbiased variance into the running estimate in place:
    running = (1 - momentum) * running + momentum * batch.
    Eval mode normalizes with the running statistics only.
    """
    if x.ndim == 4:
        axes = (0, 2, 3)
        cshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        cshape = (1, -1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.ndim}-D")
    m = x.size // x.shape[1]

    # A singleton batch has degenerate variance; train mode then normalizes
    # with running statistics (and leaves them unchanged), like eval.
    use_batch = training and m > 1
    if use_batch:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(cshape)) * inv_std.reshape(cshape)
    out_data = xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(cshape)
        if use_batch:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std.reshape(cshape)
        else:
            dx = dxhat * inv_std.reshape(cshape)
        _accum(x, dx.astype(x.dtype, copy=False))

    return _make(out_data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy of [N,K] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"label out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        _accum(logits, (float(g) / n) * probs)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
