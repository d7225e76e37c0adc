"""Pure-numpy implementations of the grouped reductions.

Same signatures and outputs as the compiled ``_ckernels`` module; used when the
extension is not built or when ``NPJIVE_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np


def fold_sums(F, cell, fold, K, nfold):
    F = np.asarray(F, dtype=np.float64)
    idx = np.asarray(cell) * nfold + np.asarray(fold)
    size = K * nfold
    p = F.shape[1]
    sums = np.empty((size, p))
    for j in range(p):
        sums[:, j] = np.bincount(idx, weights=F[:, j], minlength=size)
    counts = np.bincount(idx, minlength=size).astype(np.int64)
    return sums.reshape(K, nfold, p), counts.reshape(K, nfold)


def fold_sums_1d(x, cell, fold, K, nfold):
    x = np.asarray(x, dtype=np.float64)
    idx = np.asarray(cell) * nfold + np.asarray(fold)
    size = K * nfold
    sums = np.bincount(idx, weights=x, minlength=size)
    sq = np.bincount(idx, weights=x * x, minlength=size)
    return sums.reshape(K, nfold), sq.reshape(K, nfold)


def histogram_fold_counts(bins, cell, fold, K, nfold, p):
    idx = (np.asarray(cell) * nfold + np.asarray(fold)) * p + np.asarray(bins)
    out = np.bincount(idx, minlength=K * nfold * p).astype(np.float64)
    return out.reshape(K, nfold, p)
