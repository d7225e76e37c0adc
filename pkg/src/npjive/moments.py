"""Fold-wise cell means and the cross-fold quadratic forms of the npJIVE risk.

For a coefficient vector ``theta`` the cross-fold risk is

    R(theta) = sum_k w_k (b0 - A0 theta)_k (b1 - A1 theta)_k
             = r0 - 2 c @ theta + theta @ M @ theta,

where ``A_v``/``b_v`` are within-cell means of the features/outcome on fold
``v``.  Products of means from disjoint folds are unbiased for the squared
population moment, which is what removes the many-instrument bias of the
plug-in (squared full-cell mean) risk.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .basis import DimensionMismatch, FeatureBasis
from .grouped import FoldsUnassigned, GroupedSample


@dataclass(frozen=True, eq=False)
class CellMoments:
    A0: np.ndarray
    A1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    Afull: np.ndarray
    bfull: np.ndarray
    w: np.ndarray
    estimable: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    w_full: np.ndarray
    renormalization: float

    @property
    def K(self) -> int:
        return len(self.w)

    @property
    def p(self) -> int:
        return self.A0.shape[1]

    def to_csv(self, path) -> None:
        """Dump per-cell rows for debugging."""
        p = self.p
        header = (["k", "n0", "n1", "w", "estimable", "b0", "b1", "bfull"]
                  + [f"A0_{j}" for j in range(p)] + [f"A1_{j}" for j in range(p)]
                  + [f"Afull_{j}" for j in range(p)])
        rows = np.column_stack([np.arange(1, self.K + 1), self.n0, self.n1, self.w,
                                self.estimable.astype(int), self.b0, self.b1, self.bfull,
                                self.A0, self.A1, self.Afull])
        np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


@dataclass(frozen=True, eq=False)
class CrossForms:
    """Quadratic-form data of a risk ``r0 - 2 c@theta + theta@M@theta``."""

    M: np.ndarray
    c: np.ndarray
    r0: float

    def risk(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(self.r0 - 2.0 * self.c @ theta + theta @ self.M @ theta)


def feature_matrix(basis: FeatureBasis, sample: GroupedSample) -> np.ndarray:
    return basis.transform(sample.x)


def _estimable_weights(n, estimable):
    n_est = n * estimable
    total = n_est.sum()
    if total == 0:
        return np.zeros(len(n)), float("inf")
    return n_est / total, float(n.sum() / total)


def moments_from_features(F, y, sample: GroupedSample, backend=None) -> CellMoments:
    """Cell moments of an explicit feature matrix ``F`` (rows aligned with ``sample``)."""
    if sample.scheme != "two_fold":
        raise FoldsUnassigned("two-fold labels are required; call assign_folds first")
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != sample.N:
        raise DimensionMismatch("feature matrix rows must match sample units")
    y = sample.y if y is None else np.asarray(y, dtype=np.float64)
    K = sample.K
    fsum, counts = _kernels.fold_sums(F, sample.cell, sample.fold, K, 2, backend=backend)
    ysum, _ = _kernels.fold_sums_1d(y, sample.cell, sample.fold, K, 2, backend=backend)
    return _assemble(fsum, counts, ysum, sample)


def _assemble(fsum, counts, ysum, sample):
    n0 = counts[:, 0].astype(np.float64)
    n1 = counts[:, 1].astype(np.float64)
    estimable = (n0 > 0) & (n1 > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        A0 = np.where(n0[:, None] > 0, fsum[:, 0] / n0[:, None], 0.0)
        A1 = np.where(n1[:, None] > 0, fsum[:, 1] / n1[:, None], 0.0)
        b0 = np.where(n0 > 0, ysum[:, 0] / n0, 0.0)
        b1 = np.where(n1 > 0, ysum[:, 1] / n1, 0.0)
    ntot = n0 + n1
    Afull = (fsum[:, 0] + fsum[:, 1]) / ntot[:, None]
    bfull = (ysum[:, 0] + ysum[:, 1]) / ntot
    w, factor = _estimable_weights(ntot, estimable)
    return CellMoments(A0, A1, b0, b1, Afull, bfull, w, estimable, n0, n1,
                       ntot / ntot.sum(), factor)


def compute_moments(basis: FeatureBasis, sample: GroupedSample, backend=None) -> CellMoments:
    """Fold-wise and full-cell feature/outcome means for ``basis``."""
    if sample.scheme != "two_fold":
        raise FoldsUnassigned("two-fold labels are required; call assign_folds first")
    if basis.kind == "histogram" and basis.d == 1 and not basis.degenerate[0]:
        bins = basis.bin_index(sample.x[:, 0])
        fsum = _kernels.histogram_fold_counts(bins, sample.cell, sample.fold, sample.K, 2,
                                              basis.p, backend=backend)
        counts = fsum.sum(axis=2).astype(np.int64)
        ysum, _ = _kernels.fold_sums_1d(sample.y, sample.cell, sample.fold, sample.K, 2,
                                        backend=backend)
        return _assemble(fsum, counts, ysum, sample)
    return moments_from_features(feature_matrix(basis, sample), None, sample, backend=backend)


def cross_forms(m: CellMoments) -> CrossForms:
    """Symmetrized cross-fold forms over estimable cells."""
    W = m.w
    AW0 = m.A0.T * W
    AW1 = m.A1.T * W
    M = 0.5 * (AW0 @ m.A1 + AW1 @ m.A0)
    M = 0.5 * (M + M.T)
    c = 0.5 * (AW0 @ m.b1 + AW1 @ m.b0)
    r0 = float(np.sum(W * m.b0 * m.b1))
    return CrossForms(M, c, r0)


def plugin_forms(m: CellMoments) -> CrossForms:
    """Plug-in risk forms built from squared full-cell means (2SLS analogue)."""
    W = m.w_full
    AW = m.Afull.T * W
    M = AW @ m.Afull
    M = 0.5 * (M + M.T)
    return CrossForms(M, AW @ m.bfull, float(np.sum(W * m.bfull ** 2)))


def loo_forms(F, y, sample: GroupedSample, backend=None) -> CrossForms:
    """Leave-one-out forms: per cell, each residual times the mean of the others.

    Uses ``sum_i r_i * mean_{j != i} r_j = (S^2 - sum_i r_i^2) / (n_k - 1)``.
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    K = sample.K
    zeros = np.zeros(sample.N, dtype=np.intp)
    n = sample.n.astype(np.float64)
    est = n >= 2
    w, _ = _estimable_weights(n, est)
    coef = np.where(est, w / np.maximum(n * (n - 1.0), 1.0), 0.0)
    fsum, _ = _kernels.fold_sums(F, sample.cell, zeros, K, 1, backend=backend)
    S_F = fsum[:, 0, :]
    ysum, ysq = _kernels.fold_sums_1d(y, sample.cell, zeros, K, 1, backend=backend)
    S_y, Q_y = ysum[:, 0], ysq[:, 0]
    cu = coef[sample.cell]
    FtCF = (F.T * cu) @ F
    FtCy = (F.T * cu) @ y
    M = (S_F.T * coef) @ S_F - FtCF
    M = 0.5 * (M + M.T)
    c = (S_F.T * coef) @ S_y - FtCy
    r0 = float(np.sum(coef * (S_y ** 2 - Q_y)))
    return CrossForms(M, c, r0)


def npjive_risk(moments: CellMoments, theta) -> float:
    """Cross-fold risk ``sum_k w_k (b0 - A0 theta)_k (b1 - A1 theta)_k``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (moments.p,):
        raise DimensionMismatch(f"theta must have length {moments.p}")
    e0 = moments.b0 - moments.A0 @ theta
    e1 = moments.b1 - moments.A1 @ theta
    return float(np.sum(moments.w * e0 * e1))


def loo_risk(basis: FeatureBasis, sample: GroupedSample, theta) -> float:
    """Leave-one-out (jackknife) estimate of the population risk at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (basis.p,):
        raise DimensionMismatch(f"theta must have length {basis.p}")
    r = sample.y - basis.transform(sample.x) @ theta
    zeros = np.zeros(sample.N, dtype=np.intp)
    s, q = _kernels.fold_sums_1d(r, sample.cell, zeros, sample.K, 1)
    n = sample.n.astype(np.float64)
    est = n >= 2
    w, _ = _estimable_weights(n, est)
    contrib = np.where(est, (s[:, 0] ** 2 - q[:, 0]) / np.maximum(n * (n - 1.0), 1.0), 0.0)
    return float(np.sum(w * contrib))
