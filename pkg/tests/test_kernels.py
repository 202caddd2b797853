"""Backend parity: the compiled kernels and the numpy fallbacks must agree.

The compiled extension is built with aggressive float optimizations that can
reassociate reductions, so comparisons are tolerance-based rather than
bitwise where a reduction is involved.
"""

import numpy as np
import pytest

from dyneq import _kernels_numpy
from dyneq import kernels
from dyneq.linalg import CsrMatrix


def _random_csr(n_rows, n_cols, density, rng):
    dense = rng.standard_normal((n_rows, n_cols))
    dense[rng.random((n_rows, n_cols)) >= density] = 0.0
    return CsrMatrix.from_dense(dense), dense


@pytest.mark.parametrize("shape", [(1, 1), (7, 5), (40, 40)])
def test_csr_matmat_parity(shape):
    rng = np.random.default_rng(sum(shape))
    A, dense = _random_csr(*shape, density=0.4, rng=rng)
    B = rng.standard_normal((shape[1], 6))
    out_active = np.empty((shape[0], 6))
    out_numpy = np.empty((shape[0], 6))
    kernels.csr_matmat(A.indptr, A.indices, A.data, B, out_active)
    _kernels_numpy.csr_matmat(A.indptr, A.indices, A.data, B, out_numpy)
    np.testing.assert_allclose(out_active, out_numpy, atol=1e-13)
    np.testing.assert_allclose(out_active, dense @ B, atol=1e-13)


def test_csr_matmat_empty_matrix():
    A = CsrMatrix.from_dense(np.zeros((3, 3)))
    B = np.ones((3, 2))
    out = np.full((3, 2), 99.0)
    kernels.csr_matmat(A.indptr, A.indices, A.data, B, out)
    np.testing.assert_array_equal(out, 0.0)


def test_maxabs_diff_parity():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20, 30))
    b = rng.standard_normal((20, 30))
    active = kernels.maxabs_diff(a, b)
    reference = _kernels_numpy.maxabs_diff(a, b)
    assert active == pytest.approx(reference, rel=1e-15)
    assert active == pytest.approx(float(np.max(np.abs(a - b))), rel=1e-15)
    assert kernels.maxabs_diff(a, a.copy()) == 0.0


def test_damped_update_parity():
    rng = np.random.default_rng(4)
    z0 = rng.standard_normal((8, 8))
    s = rng.standard_normal((8, 8))
    z_active = z0.copy()
    z_numpy = z0.copy()
    kernels.damped_update(z_active, s, 0.3)
    _kernels_numpy.damped_update(z_numpy, s, 0.3)
    np.testing.assert_allclose(z_active, z_numpy, atol=1e-15)
    np.testing.assert_allclose(z_active, 0.7 * z0 + 0.3 * s, atol=1e-15)


def test_row_scale_add_diff_parity():
    rng = np.random.default_rng(5)
    prop0 = rng.standard_normal((12, 9))
    scale = rng.uniform(0.1, 0.9, size=12)
    source = rng.standard_normal((12, 9))
    prev = rng.standard_normal((12, 9))

    pa = np.ascontiguousarray(prop0.copy())
    r_active = kernels.row_scale_add_diff(pa, scale, source, prev)
    pn = prop0.copy()
    r_numpy = _kernels_numpy.row_scale_add_diff(pn, scale, source, prev)

    np.testing.assert_allclose(pa, pn, atol=1e-15)
    assert r_active == pytest.approx(r_numpy, rel=1e-14)
    # The update is prop <- scale * prop + source and the return value is
    # the largest entrywise change against prev.
    np.testing.assert_allclose(pa, scale[:, None] * prop0 + source, atol=1e-15)
    assert r_active == pytest.approx(float(np.max(np.abs(pa - prev))), rel=1e-14)


def test_row_scale_diff_parity():
    rng = np.random.default_rng(6)
    prop0 = rng.standard_normal((10, 7))
    scale = rng.uniform(0.1, 0.9, size=10)
    prev = rng.standard_normal((10, 7))

    pa = np.ascontiguousarray(prop0.copy())
    r_active = kernels.row_scale_diff(pa, scale, prev)
    pn = prop0.copy()
    r_numpy = _kernels_numpy.row_scale_diff(pn, scale, prev)

    np.testing.assert_allclose(pa, pn, atol=1e-15)
    assert r_active == pytest.approx(r_numpy, rel=1e-14)
    np.testing.assert_allclose(pa, scale[:, None] * prop0, atol=1e-15)


def test_backend_name_is_reported():
    assert kernels.BACKEND in ("cython", "numpy")


def test_fallback_selected_by_environment(tmp_path):
    import subprocess
    import sys

    code = "from dyneq.kernels import BACKEND; print(BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin", "DYNEQ_PURE_PYTHON": "1"},
        capture_output=True,
        text=True,
        cwd=tmp_path,
    )
    assert out.stdout.strip() == "numpy"
