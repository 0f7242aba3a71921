# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scatter/gather loops.

Every routine walks its input in index order so results are bitwise equal to
the numpy fallback in ``_kernels_py``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(const cnp.int64_t[::1] index, const double[:, ::1] values, Py_ssize_t n_rows):
    """out[index[i]] += values[i], sequentially in i; negative indices are skipped."""
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t c = values.shape[1]
    out_arr = np.zeros((n_rows, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    if values.shape[0] != n:
        raise ValueError("index and values disagree in length")
    for i in range(n):
        k = index[i]
        if k < 0:
            continue
        if k >= n_rows:
            raise IndexError("scatter index out of range")
        for j in range(c):
            out[k, j] += values[i, j]
    return out_arr


def bincount_rows(const cnp.int64_t[::1] index, Py_ssize_t n_rows):
    """Number of entries landing on each row; negative indices are skipped."""
    cdef Py_ssize_t n = index.shape[0]
    out_arr = np.zeros(n_rows, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, k
    for i in range(n):
        k = index[i]
        if k < 0:
            continue
        if k >= n_rows:
            raise IndexError("bincount index out of range")
        out[k] += 1
    return out_arr


def scatter_min(const cnp.int64_t[::1] index, const double[::1] values, Py_ssize_t n_rows):
    """Per-row minimum of values (inf where nothing landed)."""
    cdef Py_ssize_t n = index.shape[0]
    out_arr = np.full(n_rows, np.inf, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    for i in range(n):
        k = index[i]
        if k < 0:
            continue
        if k >= n_rows:
            raise IndexError("scatter index out of range")
        if values[i] < out[k]:
            out[k] = values[i]
    return out_arr
