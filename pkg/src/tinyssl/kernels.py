"""Backend selection for the convolution hot loops.

The compiled extension is used when it imported cleanly; set
``TINYSSL_PURE_PYTHON=1`` to force the numpy fallback. Both backends
agree to float rounding, not bit-for-bit, so a run's determinism holds
for a fixed backend only.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("TINYSSL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
out_size = _kernels_py.out_size


def backends():
    """Available backends as name -> module (used by the benchmark and tests)."""
    found = {"python": _kernels_py}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
