# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grouped reductions over (cell, fold) strata.

Every moment computation in the package funnels through these two loops, so
they are written as single passes over the rows instead of one bincount per
feature column.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def fold_sums(const double[:, :] F, const cnp.intp_t[:] cell,
              const cnp.intp_t[:] fold, Py_ssize_t K, Py_ssize_t nfold):
    cdef Py_ssize_t N = F.shape[0], p = F.shape[1]
    cdef Py_ssize_t i, j, k, v
    sums_arr = np.zeros((K, nfold, p), dtype=np.float64)
    counts_arr = np.zeros((K, nfold), dtype=np.int64)
    cdef double[:, :, :] sums = sums_arr
    cdef cnp.int64_t[:, :] counts = counts_arr
    with nogil:
        for i in range(N):
            k = cell[i]
            v = fold[i]
            counts[k, v] += 1
            for j in range(p):
                sums[k, v, j] += F[i, j]
    return sums_arr, counts_arr


def fold_sums_1d(const double[:] x, const cnp.intp_t[:] cell,
                 const cnp.intp_t[:] fold, Py_ssize_t K, Py_ssize_t nfold):
    cdef Py_ssize_t N = x.shape[0]
    cdef Py_ssize_t i, k, v
    cdef double xi
    sums_arr = np.zeros((K, nfold), dtype=np.float64)
    sq_arr = np.zeros((K, nfold), dtype=np.float64)
    cdef double[:, :] sums = sums_arr
    cdef double[:, :] sq = sq_arr
    with nogil:
        for i in range(N):
            k = cell[i]
            v = fold[i]
            xi = x[i]
            sums[k, v] += xi
            sq[k, v] += xi * xi
    return sums_arr, sq_arr


def histogram_fold_counts(const cnp.intp_t[:] bins, const cnp.intp_t[:] cell,
                          const cnp.intp_t[:] fold, Py_ssize_t K,
                          Py_ssize_t nfold, Py_ssize_t p):
    cdef Py_ssize_t N = bins.shape[0]
    cdef Py_ssize_t i
    sums_arr = np.zeros((K, nfold, p), dtype=np.float64)
    cdef double[:, :, :] sums = sums_arr
    with nogil:
        for i in range(N):
            sums[cell[i], fold[i], bins[i]] += 1.0
    return sums_arr
