"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
functionally identical (and bit-identical, see tests). CMOE_KERNELS=numpy
forces the fallback, CMOE_KERNELS=cython insists on the extension.
"""

import os

from cmoe._kernels import _npkernels

_choice = os.environ.get("CMOE_KERNELS", "auto")

if _choice not in ("auto", "cython", "numpy"):
    raise ValueError(f"CMOE_KERNELS must be auto|cython|numpy, got {_choice!r}")

if _choice == "numpy":
    _impl = _npkernels
    BACKEND = "numpy"
else:
    try:
        from cmoe._kernels import _cykernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _npkernels
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
