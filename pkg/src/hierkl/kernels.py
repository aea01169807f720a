"""Backend selection for the hot loops.

The compiled extension is used when it imports cleanly; set
``HIERKL_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("HIERKL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

elu_forward = _impl.elu_forward
elu_backward = _impl.elu_backward
backward_accumulate = _impl.backward_accumulate
soft_backup = _impl.soft_backup
grid_step_batch = _impl.grid_step_batch

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl

__all__ = [
    "BACKEND",
    "BACKENDS",
    "elu_forward",
    "elu_backward",
    "backward_accumulate",
    "soft_backup",
    "grid_step_batch",
]
