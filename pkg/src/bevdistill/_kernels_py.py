"""Numpy fallback for the compiled kernels (same semantics, same summation order)."""
import numpy as np


def _check(index, n_rows):
    if index.size and index.max(initial=-1) >= n_rows:
        raise IndexError("scatter index out of range")


def scatter_add_rows(index, values, n_rows):
    index = np.ascontiguousarray(index, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape[0] != index.shape[0]:
        raise ValueError("index and values disagree in length")
    _check(index, n_rows)
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    keep = index >= 0
    # np.add.at is unbuffered and applies updates in order, matching the C loop
    np.add.at(out, index[keep], values[keep])
    return out


def bincount_rows(index, n_rows):
    index = np.asarray(index, dtype=np.int64)
    _check(index, n_rows)
    return np.bincount(index[index >= 0], minlength=n_rows).astype(np.int64)


def scatter_min(index, values, n_rows):
    index = np.asarray(index, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    _check(index, n_rows)
    out = np.full(n_rows, np.inf)
    keep = index >= 0
    np.minimum.at(out, index[keep], values[keep])
    return out
