"""Tikhonov-regularized fits of the nuisance functions in basis coordinates.

Every objective is an exact quadratic in the coefficient vector, so each fit
is one symmetric linear solve:

============  ======================================  ==================
target        objective                               normal equations
============  ======================================  ==================
h             R(theta) + lam |h|^2                    (M + lam G) t = c
beta          t'Mt - 2 psi(beta) + lam |beta|^2       (M + lam G) t = m
alpha         |alpha|^2 - 2 psi(alpha) + lam t't      (G + lam I) t = m
proj_alpha    R_alpha(t) + lam |a|^2                  (M + lam G) t = M t_a
rho           t'Mt - 2 <h, rho> + lam |rho|^2         (M + lam G) t = G t_h
============  ======================================  ==================

``M`` comes from cross-fold products (``jive``), squared full-cell means
(``plugin``) or leave-one-out products (``loo``).  The cross-fold ``M`` can be
indefinite; the solve escalates a diagonal jitter when the factorization
fails and records it.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import DimensionMismatch, FeatureBasis, gram_matrix
from .grouped import GroupedSample, assign_folds, vfold_labels
from .moments import (CrossForms, compute_moments, cross_forms, feature_matrix, loo_forms,
                      moments_from_features, plugin_forms)

TARGETS = ("h", "beta", "alpha", "proj_alpha", "rho")
MODES = ("jive", "plugin", "loo")
JITTERS = (0.0, 1e-12, 1e-10, 1e-8)
# Default CV grid: multiples of the convexity threshold, scaled per target by MARGIN.
# The primal fit is oversmoothed (high floor, one-standard-error rule) and the
# debiasing nuisances are kept close to the threshold (undersmoothed).
MULTIPLIERS = 1.0 + np.logspace(-1, 2, 20)
MARGIN = {"h": 10.0, "beta": 1.2, "alpha": 1.0, "proj_alpha": 1.2, "rho": 1.2}
RULE = {"h": "1se", "beta": "min", "alpha": "min", "proj_alpha": "min", "rho": "min"}


class SingularSystem(np.linalg.LinAlgError):
    pass


class GridEmpty(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    target: str
    theta: np.ndarray
    lam: float
    mode: str
    solver_report: dict = field(default_factory=dict)

    def predict(self, F) -> np.ndarray:
        return np.asarray(F) @ self.theta

    def to_dict(self, basis: FeatureBasis | None = None) -> dict:
        out = {"target": self.target, "theta": self.theta.tolist(), "lambda": self.lam,
               "mode": self.mode, "solver_report": self.solver_report}
        if basis is not None:
            out["basis"] = basis.to_dict()
        return out

    def to_json(self, basis: FeatureBasis | None = None) -> str:
        return json.dumps(self.to_dict(basis))


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    """Mean over a target sample, ``psi(h) = mean_i h(x*_i) = m @ theta``."""

    target_x: np.ndarray
    m: np.ndarray

    @classmethod
    def from_target(cls, basis: FeatureBasis, target_x) -> FunctionalSpec:
        tx = np.asarray(target_x, dtype=np.float64)
        if tx.ndim == 1:
            tx = tx[:, None]
        if len(tx) < 1:
            raise ValueError("target sample must be nonempty")
        return cls(tx, basis.transform(tx).mean(axis=0))

    def __call__(self, theta) -> float:
        return float(self.m @ np.asarray(theta))


@dataclass(frozen=True, eq=False)
class Problem:
    """Quadratic forms shared by all fits on one sample."""

    forms: CrossForms
    G: np.ndarray
    mode: str

    @property
    def p(self) -> int:
        return self.G.shape[0]


def build_problem(basis: FeatureBasis, sample: GroupedSample, mode: str = "jive",
                  F: np.ndarray | None = None) -> Problem:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if F is None:
        F = feature_matrix(basis, sample)
    G = gram_matrix(F)
    if mode == "loo":
        forms = loo_forms(F, sample.y, sample)
    else:
        mom = compute_moments(basis, sample)
        forms = cross_forms(mom) if mode == "jive" else plugin_forms(mom)
    return Problem(forms, G, mode)


def solve_regularized(A: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, dict]:
    """Solve the symmetric system ``A x = rhs`` with jitter escalation."""
    A = 0.5 * (A + A.T)
    p = A.shape[0]
    scale = abs(np.trace(A)) / p if p else 1.0
    scale = scale if scale > 0 else 1.0
    rnorm = float(np.linalg.norm(rhs))
    last_err = None
    for j in JITTERS:
        eps = j * scale
        Aj = A + eps * np.eye(p)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                x = scipy.linalg.solve(Aj, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
            last_err = exc
            continue
        resid = float(np.linalg.norm(Aj @ x - rhs))
        if np.all(np.isfinite(x)) and resid <= 1e-8 * (rnorm + 1.0):
            return x, {"jitter": eps, "residual": resid, "condition": float(np.linalg.cond(Aj))}
        last_err = f"residual {resid:.3g}"
    raise SingularSystem(f"regularized system could not be solved ({last_err})")


def _check_lam(lam, strict=False):
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0 or (strict and lam == 0):
        raise ValueError(f"regularization level must be {'> 0' if strict else '>= 0'}, got {lam}")
    return lam


def _fit(target, prob: Problem, lam, rhs):
    A = prob.forms.M + lam * prob.G
    theta, report = solve_regularized(A, rhs)
    report["convex"] = bool(lam > convexity_threshold(prob.forms.M, prob.G))
    return NuisanceFit(target, theta, lam, prob.mode, report)


def fit_h(prob: Problem, lam: float) -> NuisanceFit:
    """Minimize ``R(h) + lam * |h|_N^2``."""
    return _fit("h", prob, _check_lam(lam), prob.forms.c)


def fit_beta(prob: Problem, m, lam: float) -> NuisanceFit:
    """Minimize ``t'Mt - 2 m't + lam * |beta|_N^2`` (dual nuisance)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (prob.p,):
        raise DimensionMismatch("functional mean vector has wrong length")
    return _fit("beta", prob, _check_lam(lam, strict=True), m)


def fit_alpha(G, m, lam: float, mode: str = "jive") -> NuisanceFit:
    """Riesz regression: minimize ``|alpha|_N^2 - 2 psi(alpha) + lam |t|^2``."""
    G = np.asarray(G)
    lam = _check_lam(lam)
    theta, report = solve_regularized(G + lam * np.eye(G.shape[0]), np.asarray(m, dtype=np.float64))
    return NuisanceFit("alpha", theta, lam, mode, report)


def fit_proj_alpha(prob: Problem, alpha_fit: NuisanceFit, lam: float) -> NuisanceFit:
    """Projection of the Riesz representer onto the identified subspace."""
    return _fit("proj_alpha", prob, _check_lam(lam), prob.forms.M @ alpha_fit.theta)


def fit_rho(prob: Problem, h_fit: NuisanceFit, lam: float) -> NuisanceFit:
    """Minimize ``t'Mt - 2 <h, rho>_N + lam |rho|_N^2``."""
    return _fit("rho", prob, _check_lam(lam), prob.G @ h_fit.theta)


def objective(target: str, prob: Problem, theta, lam: float, m=None, aux_theta=None) -> float:
    """Regularized objective value; with ``lam=0`` the validation loss."""
    t = np.asarray(theta, dtype=np.float64)
    M, G = prob.forms.M, prob.G
    if target == "h":
        return prob.forms.risk(t) + lam * t @ G @ t
    if target == "beta":
        return float(t @ M @ t - 2 * np.asarray(m) @ t + lam * t @ G @ t)
    if target == "alpha":
        return float(t @ G @ t - 2 * np.asarray(m) @ t + lam * t @ t)
    if target == "proj_alpha":
        dlt = np.asarray(aux_theta) - t
        return float(dlt @ M @ dlt + lam * t @ G @ t)
    if target == "rho":
        return float(t @ M @ t - 2 * np.asarray(aux_theta) @ G @ t + lam * t @ G @ t)
    raise ValueError(f"unknown target {target!r}")


def fit_target(target, prob: Problem, lam, m=None, aux: NuisanceFit | None = None) -> NuisanceFit:
    if target == "h":
        return fit_h(prob, lam)
    if target == "beta":
        return fit_beta(prob, m, lam)
    if target == "alpha":
        return fit_alpha(prob.G, m, lam, prob.mode)
    if target == "proj_alpha":
        return fit_proj_alpha(prob, aux, lam)
    if target == "rho":
        return fit_rho(prob, aux, lam)
    raise ValueError(f"unknown target {target!r}")


def convexity_threshold(M, G) -> float:
    """Smallest ``lam`` for which ``M + lam * G`` is positive semidefinite.

    The cross-fold ``M`` is an unbiased but noisy estimate of a PSD matrix and
    is often indefinite; below this level the regularized objective is
    unbounded below and its stationary point is a saddle.
    """
    p = G.shape[0]
    Gj = G + 1e-12 * max(np.trace(G) / p, 1e-300) * np.eye(p)
    lo = float(scipy.linalg.eigh(M, Gj, eigvals_only=True, subset_by_index=[0, 0])[0])
    return max(0.0, -lo)


def default_grid(prob: Problem, size: int = 20) -> np.ndarray:
    """``lam_crit`` plus a log-spaced grid over ``[1e-8, 1e1] * trace(M) / p``."""
    scale = np.trace(prob.forms.M) / prob.p
    if not scale > 0:
        scale = np.trace(prob.G) / prob.p
    return convexity_threshold(prob.forms.M, prob.G) + np.logspace(-8, 1, size) * scale


@dataclass(frozen=True)
class CVResult:
    lam: float
    table: list  # rows of (lambda, mean validation loss, per-fold losses)


def cv_select_lambda(sample: GroupedSample, basis: FeatureBasis, target: str, grid=None,
                     folds: int = 5, seed: int = 0, m=None, aux: NuisanceFit | None = None,
                     mode: str = "jive", F: np.ndarray | None = None, margin: float | dict | None = None,
                     rule: str | dict | None = None) -> CVResult:
    """Choose ``lam`` by V-fold CV on the unregularized cross-fold loss.

    Units are split into ``folds`` groups within each cell.  For each held-out
    group the fit uses the remaining units (in ``mode``) and is scored with the
    unregularized jackknife loss of ``target`` on the held-out units.

    Without an explicit ``grid`` the candidates are ``margin * MULTIPLIERS``
    times each fit's own convexity threshold (the absolute default grid is
    used when a threshold is zero).  Grid points at or below a training fold's
    threshold score ``inf``.  ``rule="min"`` takes the smallest mean loss;
    ``"1se"`` takes the largest ``lam`` within one standard error of it.  Ties
    go to the larger ``lam``.  ``margin`` and ``rule`` may be per-target dicts
    and default to the module-level ``MARGIN`` and ``RULE``.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}")
    margin = MARGIN if margin is None else margin
    margin = float(margin[target] if isinstance(margin, dict) else margin)
    rule = RULE if rule is None else rule
    rule = rule[target] if isinstance(rule, dict) else rule
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown CV rule {rule!r}")
    if grid is not None and len(grid) == 0:
        raise GridEmpty("lambda grid is empty")
    if folds < 2:
        raise ValueError("need at least 2 CV folds")
    if F is None:
        F = feature_matrix(basis, sample)
    if grid is not None and len(grid) == 1:
        return CVResult(float(grid[0]), [(float(grid[0]), float("nan"), [])])
    labels = vfold_labels(sample, folds, seed)
    splits = []
    for v in range(folds):
        train_mask = labels != v
        train = _two_fold(sample.subset(train_mask), seed + 1 + v)
        valid = _two_fold(sample.subset(~train_mask), seed + 101 + v)
        if not valid.estimable.any():
            raise InsufficientData(f"validation fold {v} has no estimable cells")
        tprob = build_problem(basis, train, mode, F=F[train_mask])
        crit = 0.0 if target == "alpha" else convexity_threshold(tprob.forms.M, tprob.G)
        splits.append((tprob, _jive_problem(basis, valid, F[~train_mask]), crit))
    scaled = False
    if grid is None:
        full = build_problem(basis, _two_fold(sample, seed), mode, F=F)
        full_crit = 0.0 if target == "alpha" else convexity_threshold(full.forms.M, full.G)
        scaled = full_crit > 0 and min(s[2] for s in splits) > 0
        # multiples of each fit's own convexity threshold: the threshold shrinks with
        # sample size, so a multiple chosen on training folds transfers to the full sample
        grid = MULTIPLIERS * margin if scaled else default_grid(full)
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    losses = np.zeros((len(grid), folds))
    aux_theta = None if aux is None else aux.theta
    for v, (tprob, vprob, crit) in enumerate(splits):
        for i, g in enumerate(grid):
            lam = g * crit if scaled else g
            if lam <= crit:
                losses[i, v] = np.inf  # training objective unbounded below
                continue
            fit = fit_target(target, tprob, lam, m=m, aux=aux)
            losses[i, v] = objective(target, vprob, fit.theta, 0.0, m=m, aux_theta=aux_theta)
    if scaled:
        grid = grid * full_crit
    mean = losses.mean(axis=1)
    if not np.isfinite(mean).any():
        raise InsufficientData("no grid value gives a convex training objective in every fold")
    i_min = int(np.nanargmin(np.where(np.isfinite(mean), mean, np.nan)))
    slack = 1e-14 * max(1.0, abs(mean[i_min]))
    if rule == "1se":
        ok = np.isfinite(losses[i_min]).all()
        slack += losses[i_min].std(ddof=1) / np.sqrt(folds) if ok else 0.0
    best = np.flatnonzero(mean <= mean[i_min] + slack)
    lam_star = float(grid[best.max()])
    table = [(float(l), float(mu), losses[i].tolist()) for i, (l, mu) in enumerate(zip(grid, mean))]
    return CVResult(lam_star, table)


def _two_fold(sample, seed):
    import warnings as _w

    with _w.catch_warnings():
        _w.simplefilter("ignore")
        return assign_folds(sample, seed, "two_fold")


def _jive_problem(basis, sample, F):
    G = gram_matrix(F)
    mom = moments_from_features(F, None, sample) if basis.kind != "histogram" else compute_moments(basis, sample)
    return Problem(cross_forms(mom), G, "jive")
