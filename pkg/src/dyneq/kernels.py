"""Kernel backend selection.

The hot CSR product sits inside every fixed-point sweep, adjoint solve and
hypergradient pass, so a compiled implementation is built when a C compiler
is available. Importing this module picks the compiled extension when
present and silently falls back to the numpy versions otherwise. Set the
environment variable ``DYNEQ_PURE_PYTHON=1`` to force the fallback (used by
the backend benchmark and parity tests).
"""

from __future__ import annotations

import os

from . import _kernels_numpy

if os.environ.get("DYNEQ_PURE_PYTHON", "") == "1":
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _fastcsr as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build environment
        _impl = _kernels_numpy
        BACKEND = "numpy"

csr_matmat = _impl.csr_matmat
maxabs_diff = _impl.maxabs_diff
damped_update = _impl.damped_update
row_scale_add_diff = _impl.row_scale_add_diff
row_scale_diff = _impl.row_scale_diff
