"""Kernel backend selection.

The compiled extension is used when present; otherwise the numpy fallback
takes over with identical semantics. DSRM_KERNELS=python|cython forces a
backend (cython raises if the extension is missing).
"""

import contextlib
import os

from threadpoolctl import threadpool_limits

from . import _kernels_np

_forced = os.environ.get("DSRM_KERNELS", "").lower()

if _forced == "python":
    _impl = _kernels_np
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_np
        BACKEND = "python"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward


def blas_quiet():
    """Single-thread BLAS scope for compiled-kernel hot loops.

    Idle OpenBLAS workers spin-wait and fight the OpenMP conv kernels for
    cores; the GEMMs inside these loops are too small to miss the threads.
    The numpy fallback leans on BLAS for the convolutions, so there the
    scope is a no-op.
    """
    if BACKEND == "cython":
        return threadpool_limits(limits=1, user_api="blas")
    return contextlib.nullcontext()
