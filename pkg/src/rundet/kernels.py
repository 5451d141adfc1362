"""Kernel backend selection.

The compiled extension is used when importable; ``RUNDET_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _fallback

if os.environ.get("RUNDET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
iou_matrix = _impl.iou_matrix
nms = _impl.nms


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
