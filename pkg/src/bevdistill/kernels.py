"""Kernel backend selection.

The compiled extension is used when it imports; set ``BEVDISTILL_PURE_PYTHON=1``
to force the numpy fallback (both backends give bitwise-identical results).
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("BEVDISTILL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"



def _index(index):
    return np.ascontiguousarray(index, dtype=np.int64)


def scatter_add_rows(index, values, n_rows: int) -> np.ndarray:
    """``out[index[i]] += values[i]`` in input order; negative indices are skipped."""
    return _impl.scatter_add_rows(_index(index), np.ascontiguousarray(values, dtype=np.float64), int(n_rows))


def bincount_rows(index, n_rows: int) -> np.ndarray:
    """Number of entries per row; negative indices are skipped."""
    return _impl.bincount_rows(_index(index), int(n_rows))


def scatter_min(index, values, n_rows: int) -> np.ndarray:
    """Per-row minimum of ``values`` (``inf`` for empty rows); negative indices are skipped."""
    return _impl.scatter_min(_index(index), np.ascontiguousarray(values, dtype=np.float64), int(n_rows))

__all__ = ["BACKEND", "scatter_add_rows", "bincount_rows", "scatter_min"]
