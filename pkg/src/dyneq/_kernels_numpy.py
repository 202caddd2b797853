"""Pure-numpy implementations of the kernels in ``_fastcsr``.

Semantics match the compiled versions exactly; these are the import-time
fallback and the reference side of the backend parity tests.
"""

from __future__ import annotations

import numpy as np


def csr_matmat(indptr, indices, data, B, out):
    out.fill(0.0)
    if len(indices) == 0:
        return
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(len(counts)), counts)
    np.add.at(out, rows, data[:, None] * B[indices])


def maxabs_diff(a, b):
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def damped_update(z, s, eta):
    z *= 1.0 - eta
    z += eta * s


def row_scale_add_diff(prop, scale, source, prev):
    prop *= scale[:, None]
    prop += source
    if prop.size == 0:
        return 0.0
    return float(np.max(np.abs(prop - prev)))


def row_scale_diff(prop, scale, prev):
    prop *= scale[:, None]
    if prop.size == 0:
        return 0.0
    return float(np.max(np.abs(prop - prev)))
