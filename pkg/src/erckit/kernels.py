"""Kernel backend selection.

The compiled extension is used when it imports; set ``ERCKIT_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from erckit import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ERCKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from erckit import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"

layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
masked_softmax_forward = _impl.masked_softmax_forward
softmax_backward = _impl.softmax_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
segment_mean_forward = _impl.segment_mean_forward
segment_mean_backward = _impl.segment_mean_backward

__all__ = [
    "BACKEND",
    "layer_norm_forward",
    "layer_norm_backward",
    "masked_softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "segment_mean_forward",
    "segment_mean_backward",
]
