"""Finite-difference verification of the tape's analytic gradients.

Perturbs every element of every checked tensor by +-h and compares the
central-difference slope of a scalar loss against what backward() produced.
Tensors should hold float64 data when checking; float32 round-off swamps
the h=1e-5 step.
"""

from __future__ import annotations

import numpy as np

from cmoe.errors import NumericError, ShapeError
from cmoe.tensor import Tensor, no_grad


def _named(params):
    if hasattr(params, "items"):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def numerical_grad(f, t: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar f() with respect to t.

    coords restricts the perturbed flat indices (untouched entries come back
    NaN); None differentiates every coordinate.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.size, np.nan)
    if coords is None:
        coords = range(flat.size)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data)
            flat[i] = orig - h
            lo = float(f().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(t.shape)


def gradcheck(f, params, h: float = 1e-5, sample: int | None = None, seed: int = 0) -> dict:
    """Compare analytic and numerical gradients of scalar-valued f().

    f is a zero-argument callable that rebuilds the loss from the current
    contents of params (a dict name -> Tensor, or an iterable of Tensors,
    each with requires_grad set). Relative error per element is
    |a - n| / max(1, |a|, |n|); the report carries the worst case.

    sample caps the coordinates differentiated per tensor (chosen by seed);
    large composite models are checked that way, small ops exhaustively.
    """
    named = _named(params)
    for name, p in named:
        if not p.requires_grad:
            raise NumericError(f"gradcheck target {name!r} has requires_grad=False")
        p.grad = None

    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("gradcheck expects f() to return a scalar Tensor")
    out.backward()

    analytic = {}
    for name, p in named:
        if p.grad is None:
            raise NumericError(f"no gradient reached {name!r}")
        analytic[name] = np.asarray(p.grad, dtype=np.float64).copy()

    pick = np.random.default_rng(seed)
    max_rel = 0.0
    per_tensor = {}
    checked = 0
    for name, p in named:
        coords = None
        if sample is not None and p.size > sample:
            coords = pick.choice(p.size, size=sample, replace=False)
        num = numerical_grad(f, p, h=h, coords=coords)
        a = analytic[name]
        mask = ~np.isnan(num)
        rel = np.abs(a[mask] - num[mask]) / np.maximum(
            1.0, np.maximum(np.abs(a[mask]), np.abs(num[mask]))
        )
        worst = float(rel.max()) if rel.size else 0.0
        per_tensor[name] = worst
        max_rel = max(max_rel, worst)
        checked += int(mask.sum())
    return {"max_rel_err": max_rel, "per_tensor": per_tensor, "n_coords": checked}
