"""Backend selection for the hot kernels (conv gather/scatter, fused Adam).

The compiled extension is used when it was built; otherwise (or when the
``MRDENOISE_PURE_PYTHON`` environment variable is set) the numpy version is
used. Both produce bit-identical results.
"""
import os

from mrdenoise import _im2col_py

try:
    if os.environ.get("MRDENOISE_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from mrdenoise import _im2col_ext as _backend
    BACKEND = "cython"
except ImportError:
    _backend = _im2col_py
    BACKEND = "numpy"

im2col = _backend.im2col
col2im = _backend.col2im
adam_update = _backend.adam_update


def available_backends():
    """Map backend name to its module, for benchmarks and parity tests."""
    out = {"numpy": _im2col_py}
    try:
        from mrdenoise import _im2col_ext
        out["cython"] = _im2col_ext
    except ImportError:
        pass
    return out
