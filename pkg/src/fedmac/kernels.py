"""Backend selection for the hot inner loops.

The compiled extension ``fedmac._ckernels`` is used when it imports; otherwise
the numpy implementation in ``fedmac._pykernels`` is used. Setting the
environment variable ``FEDMAC_PURE_PYTHON=1`` forces the fallback.

All array arguments must be C-contiguous float64 (labels: int64). Functions
ending in ``_step`` update their first argument in place and return ``False``
if any updated entry is non-finite.
"""

import os

from . import _pykernels

if os.environ.get("FEDMAC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "numpy"

logcosh_excess = _impl.logcosh_excess
tanh_scaled = _impl.tanh_scaled
theta_step = _impl.theta_step
prox_step = _impl.prox_step
w_step = _impl.w_step
softmax_xent = _impl.softmax_xent
ista_step = _impl.ista_step
box_sq_dist = _impl.box_sq_dist

__all__ = [
    "BACKEND",
    "box_sq_dist",
    "ista_step",
    "logcosh_excess",
    "prox_step",
    "softmax_xent",
    "tanh_scaled",
    "theta_step",
    "w_step",
]
