"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting the
environment variable ``SPRITZ_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _fallback

BACKEND = "python"

if os.environ.get("SPRITZ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward

__all__ = [
    "BACKEND",
    "im2col3x3",
    "col2im3x3",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
]
