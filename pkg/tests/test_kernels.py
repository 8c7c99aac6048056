import numpy as np
import pytest
from hypothesis import given, strategies as st

from tinyssl import _kernels_py, kernels

impls = kernels.backends()
compiled = pytest.mark.skipif("cython" not in impls, reason="compiled extension not built")


@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 5), st.integers(3, 9), st.integers(1, 2),
       st.sampled_from([1, 3]))
def test_im2col_col2im_adjoint(seed, B, C, H, stride, k):
    r = np.random.default_rng(seed)
    pad = k // 2
    x = r.standard_normal((B, C, H, H))
    cols = _kernels_py.im2col(x, k, stride, pad)
    y = r.standard_normal(cols.shape)
    # <im2col x, y> == <x, col2im y>
    assert np.isclose((cols * y).sum(), (x * _kernels_py.col2im(y, x.shape, k, stride, pad)).sum())


@compiled
@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 6), st.integers(2, 10), st.integers(1, 2),
       st.sampled_from([np.float32, np.float64]))
def test_backends_agree(seed, B, C, H, stride, dtype):
    r = np.random.default_rng(seed)
    py, cy = impls["python"], impls["cython"]
    x = r.standard_normal((B, C, H, H)).astype(dtype)
    w = r.standard_normal((C, 3, 3)).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    out = py.depthwise_forward(x, w, stride, 1)
    assert np.allclose(cy.depthwise_forward(x, w, stride, 1), out, atol=tol)
    g = r.standard_normal(out.shape).astype(dtype)
    for a, b in zip(py.depthwise_backward(x, w, g, stride, 1), cy.depthwise_backward(x, w, g, stride, 1)):
        assert np.allclose(a, b, atol=tol)
    cols = py.im2col(x, 3, stride, 1)
    assert np.allclose(cy.im2col(x, 3, stride, 1), cols, atol=tol)
    assert np.allclose(cy.col2im(cols, x.shape, 3, stride, 1), py.col2im(cols, x.shape, 3, stride, 1), atol=tol)


def test_backend_selection():
    assert kernels.BACKEND in impls
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "import tinyssl.kernels as k; print(k.BACKEND)"],
                         env={"TINYSSL_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
