"""Debiased and baseline estimators of a linear functional of the structural function.

All debiased estimators share the per-unit correction ``qhat_i * (y_i - h_hat(x_i))``
where ``qhat_i`` is a within-cell mean of ``beta_hat(X)`` over units that do
not include ``i``:

``cross``
    mean over the opposite fold of the two-fold split (DML-JIVE);
``loo``
    mean over all other units of the cell;
``full``
    mean over the whole cell, own unit included (2SLS-style, biased).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import _kernels
from .basis import FeatureBasis
from .grouped import FoldsUnassigned, GroupedSample, assign_folds, vfold_labels
from .solver import (FunctionalSpec, NuisanceFit, build_problem, cv_select_lambda, fit_alpha,
                     fit_beta, fit_h, fit_proj_alpha, fit_rho)

ESTIMATORS = ("crossfold", "single_split", "modified", "plugin", "ipw",
              "dml_2sls", "plugin_2sls", "ipw_2sls")
Q_MODES = ("cross", "loo", "full")


class NoEstimableCells(ValueError):
    pass


class MissingNuisance(ValueError):
    pass


def z_quantile(level: float) -> float:
    """Two-sided standard normal critical value for coverage ``level``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(ndtri(1.0 - (1.0 - level) / 2.0))


CSV_FIELDS = ("estimator", "psi_hat", "se", "ci_lo", "ci_hi", "level", "n_effective")


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    psi_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    level: float
    n_effective: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci_width(self) -> float:
        return self.ci_hi - self.ci_lo

    def covers(self, value: float) -> bool:
        return bool(self.ci_lo <= value <= self.ci_hi)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return {"estimator": self.estimator, "psi_hat": clean(self.psi_hat), "se": clean(self.se),
                "ci_lo": clean(self.ci_lo), "ci_hi": clean(self.ci_hi), "level": self.level,
                "n_effective": self.n_effective,
                "diagnostics": {k: clean(v) for k, v in self.diagnostics.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_FIELDS)

    def to_csv_row(self) -> str:
        return ",".join(str(getattr(self, f)) if f in ("estimator", "n_effective")
                        else repr(float(getattr(self, f))) for f in CSV_FIELDS)


def _report(name, psi, se, level, n_eff, diag, half_width=None):
    z = z_quantile(level)
    hw = z * se if half_width is None else half_width
    return EstimateReport(name, float(psi), float(se), float(psi - hw), float(psi + hw), float(level),
                          int(n_eff), diag)


# ---- per-unit helpers ----

def _cell_fold_means(v, sample):
    """``(K, 2)`` per-fold means and counts of a per-unit vector."""
    s, _ = _kernels.fold_sums_1d(v, sample.cell, sample.fold, sample.K, 2)
    cnt = np.stack([np.bincount(sample.cell, weights=1 - sample.fold, minlength=sample.K),
                    np.bincount(sample.cell, weights=sample.fold, minlength=sample.K)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0)
    return means, cnt


def held_out_means(v, sample: GroupedSample, q_mode: str = "cross"):
    """Per-unit cell means of ``v`` excluding the unit (or its fold).

    Returns
    -------
    means : (N,) array
    valid : (N,) bool array
        ``False`` where the excluded set is empty.
    """
    v = np.asarray(v, dtype=np.float64)
    if q_mode == "cross":
        if sample.scheme != "two_fold":
            raise FoldsUnassigned("cross-fold means need two-fold labels")
        means, cnt = _cell_fold_means(v, sample)
        other = 1 - sample.fold.astype(np.intp)
        return means[sample.cell, other], cnt[sample.cell, other] > 0
    n = sample.n.astype(np.float64)
    zeros = np.zeros(sample.N, dtype=np.intp)
    s, _ = _kernels.fold_sums_1d(v, sample.cell, zeros, sample.K, 1)
    s = s[:, 0]
    if q_mode == "full":
        return s[sample.cell] / n[sample.cell], np.ones(sample.N, dtype=bool)
    if q_mode == "loo":
        nk = n[sample.cell]
        valid = nk >= 2
        return np.where(valid, (s[sample.cell] - v) / np.maximum(nk - 1, 1), 0.0), valid
    raise ValueError(f"unknown q_mode {q_mode!r}")


@dataclass(frozen=True, eq=False)
class _Units:
    F: np.ndarray
    hx: np.ndarray
    e: np.ndarray
    q: np.ndarray
    valid: np.ndarray

    @property
    def n_est(self) -> int:
        return int(self.valid.sum())


def _units(sample, basis, h_fit, beta_fit, q_mode, F=None):
    if h_fit is None:
        raise MissingNuisance("h fit is required")
    F = basis.transform(sample.x) if F is None else F
    hx = F @ h_fit.theta
    e = sample.y - hx
    if beta_fit is None:
        q, valid = np.zeros(sample.N), held_out_means(np.zeros(sample.N), sample, q_mode)[1]
    else:
        q, valid = held_out_means(F @ beta_fit.theta, sample, q_mode)
    if not valid.any():
        raise NoEstimableCells("no unit has a nonempty held-out set in its cell")
    return _Units(F, hx, e, q, valid)


def _se_from(phi, n_est):
    if n_est < 2:
        return float("nan")
    return float(np.sqrt(np.var(phi, ddof=1) / n_est))


def _diag(u: _Units, sample):
    return {"mean_abs_q": float(np.abs(u.q[u.valid]).mean()),
            "skipped_units": int(sample.N - u.n_est),
            "masked_cells": int(sample.K - len(np.unique(sample.cell[u.valid])))}


# ---- estimators ----

def estimate_crossfold(sample: GroupedSample, basis: FeatureBasis, h_fit: NuisanceFit,
                       beta_fit: NuisanceFit | None, spec: FunctionalSpec, level: float = 0.95,
                       q_mode: str = "cross", name: str = "crossfold", F=None) -> EstimateReport:
    """One-step debiased estimate with held-out cell means of ``beta_hat`` as weights.

    ``psi_hat = psi(h_hat) + (1/N_est) sum_i qhat_i (y_i - h_hat(x_i))`` over
    units with a nonempty held-out set; the standard error is the sample sd of
    ``qhat_i * e_i`` over ``sqrt(N_est)``.
    """
    u = _units(sample, basis, h_fit, beta_fit, q_mode, F)
    phi = (u.q * u.e)[u.valid]
    psi = spec(h_fit.theta) + phi.sum() / u.n_est
    return _report(name, psi, _se_from(phi, u.n_est), level, u.n_est, _diag(u, sample))


def estimate_single_split(sample: GroupedSample, basis: FeatureBasis, h_fit: NuisanceFit,
                          beta_fit: NuisanceFit | None, spec: FunctionalSpec, level: float = 0.95,
                          debias_fold: int = 0, name: str = "single_split", F=None) -> EstimateReport:
    """Debias with fold ``debias_fold`` residuals and the other fold's ``beta_hat`` means.

    The variance is ``2 * s2_diamond / N_est`` with

        s2_diamond = sum_k w_k qhat0_k qhat1_k s2_eps(k)
                     + (2 / N_est) sum_k s2_beta(k) s2_eps(k),

    using within-cell sample variances (ddof=1).  The cross product of the
    two fold means keeps the first term free of the fold-mean noise that the
    second term accounts for.
    """
    if debias_fold not in (0, 1):
        raise ValueError("debias_fold must be 0 or 1")
    u = _units(sample, basis, h_fit, beta_fit, "cross", F)
    n_est = u.n_est
    sel = u.valid & (sample.fold == debias_fold)
    psi = spec(h_fit.theta) + 2.0 * np.sum(u.q[sel] * u.e[sel]) / n_est

    bx = u.F @ beta_fit.theta if beta_fit is not None else np.zeros(sample.N)
    means, _ = _cell_fold_means(bx, sample)
    est = sample.estimable
    n = sample.n.astype(np.float64)
    s2_eps = _cell_var(u.e, sample)
    s2_beta = _cell_var(bx, sample)
    w = np.where(est, n, 0.0) / n_est
    s2 = float(np.sum(w * means[:, 0] * means[:, 1] * s2_eps))
    s2_diamond = s2 + 2.0 / n_est * float(np.sum(np.where(est, s2_beta * s2_eps, 0.0)))
    diag = _diag(u, sample)
    diag.update(sigma2=s2, sigma2_diamond=s2_diamond, small_cells=int(np.sum(est & (n < 4))),
                clipped=bool(s2_diamond < 0))
    se = math.sqrt(2.0 * max(s2_diamond, 0.0) / n_est)
    return _report(name, psi, se, level, n_est, diag)


def _cell_var(v, sample):
    zeros = np.zeros(sample.N, dtype=np.intp)
    s, q = _kernels.fold_sums_1d(v, sample.cell, zeros, sample.K, 1)
    n = sample.n.astype(np.float64)
    s, q = s[:, 0], q[:, 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n >= 2, (q - s ** 2 / n) / np.maximum(n - 1, 1), 0.0)
    return np.maximum(var, 0.0)


def estimate_modified(sample: GroupedSample, basis: FeatureBasis, h_fit, beta_fit, alpha_fit,
                      proj_alpha_fit, rho_fit, spec: FunctionalSpec, level: float = 0.95,
                      q_mode: str = "cross", name: str = "modified", F=None) -> EstimateReport:
    """Cross-fold estimate plus a correction for the unidentified part of the representer.

    Adds ``(1/N_est) sum_i d(x_i) (rhat_i - h_hat(x_i))`` with
    ``d = alpha_hat - proj_alpha_hat`` and ``rhat_i`` the held-out cell mean
    of ``rho_hat(X)``.
    """
    fits = {"h": h_fit, "beta": beta_fit, "alpha": alpha_fit, "proj_alpha": proj_alpha_fit, "rho": rho_fit}
    missing = [k for k, v in fits.items() if v is None]
    if missing:
        raise MissingNuisance(f"missing nuisance fits: {missing}")
    u = _units(sample, basis, h_fit, beta_fit, q_mode, F)
    d = u.F @ (alpha_fit.theta - proj_alpha_fit.theta)
    r, _ = held_out_means(u.F @ rho_fit.theta, sample, q_mode)
    v = u.valid
    phi = (u.q * u.e + d * (r - u.hx))[v]
    correction = np.sum((d * (r - u.hx))[v]) / u.n_est
    psi = spec(h_fit.theta) + np.sum((u.q * u.e)[v]) / u.n_est + correction
    diag = _diag(u, sample)
    diag["correction"] = float(correction)
    return _report(name, psi, _se_from(phi, u.n_est), level, u.n_est, diag)


def estimate_plugin(sample: GroupedSample, basis: FeatureBasis, h_fit: NuisanceFit,
                    beta_fit: NuisanceFit | None, spec: FunctionalSpec, level: float = 0.95,
                    q_mode: str = "cross", name: str = "plugin", F=None) -> EstimateReport:
    """``psi(h_hat)``.  Its standard error borrows the debiased influence term
    ``qhat * e`` (a heuristic; NaN without ``beta_fit``)."""
    u = _units(sample, basis, h_fit, beta_fit, q_mode, F)
    psi = spec(h_fit.theta)
    se = _se_from((u.q * u.e)[u.valid], u.n_est) if beta_fit is not None else float("nan")
    return _report(name, psi, se, level, u.n_est, _diag(u, sample))


def estimate_ipw(sample: GroupedSample, basis: FeatureBasis, beta_fit: NuisanceFit,
                 level: float = 0.95, q_mode: str = "cross", name: str = "ipw", F=None) -> EstimateReport:
    """``(1/N_est) sum_i qhat_i y_i`` with sd-based (heuristic) standard error."""
    if beta_fit is None:
        raise MissingNuisance("beta fit is required")
    F = basis.transform(sample.x) if F is None else F
    q, valid = held_out_means(F @ beta_fit.theta, sample, q_mode)
    n_est = int(valid.sum())
    if n_est == 0:
        raise NoEstimableCells("no unit has a nonempty held-out set in its cell")
    terms = (q * sample.y)[valid]
    return _report(name, terms.sum() / n_est, _se_from(terms, n_est), level, n_est,
                   {"mean_abs_q": float(np.abs(q[valid]).mean()), "skipped_units": int(sample.N - n_est)})


# ---- nuisance pipeline ----

@dataclass(frozen=True)
class LambdaPolicy:
    """``fixed``: use ``value`` (scalar or per-target dict); ``cv``: V-fold CV over ``grid``."""

    policy: str = "cv"
    value: float | dict | None = None
    grid: tuple | None = None
    folds: int = 5
    alpha_lam: float | None = None

    def __post_init__(self):
        if self.policy not in ("cv", "fixed"):
            raise ValueError(f"unknown lambda policy {self.policy!r}")
        if self.policy == "fixed" and self.value is None:
            raise ValueError("fixed lambda policy needs a value")

    def fixed(self, target):
        if isinstance(self.value, dict):
            return float(self.value[target])
        return float(self.value)

    @classmethod
    def from_dict(cls, d: dict | None) -> LambdaPolicy:
        d = dict(d or {})
        grid = d.get("grid")
        return cls(d.get("policy", "cv"), d.get("value"), tuple(grid) if grid else None,
                   int(d.get("folds", 5)), d.get("alpha_lam"))


NEEDS = {
    "crossfold": ("h", "beta"), "single_split": ("h", "beta"), "plugin": ("h", "beta"),
    "ipw": ("beta",), "modified": ("h", "beta", "alpha", "proj_alpha", "rho"),
    "dml_2sls": ("h", "beta"), "plugin_2sls": ("h", "beta"), "ipw_2sls": ("beta",),
}
_ORDER = ("h", "beta", "alpha", "proj_alpha", "rho")


def fit_nuisances(sample: GroupedSample, basis: FeatureBasis, spec: FunctionalSpec, targets,
                  mode: str = "jive", policy: LambdaPolicy | None = None, seed: int = 0,
                  F=None) -> dict:
    """Fit the requested nuisances (plus dependencies) on ``sample``.

    Returns a dict of :class:`NuisanceFit` keyed by target with the selected
    regularization levels under ``"lambdas"``.
    """
    policy = policy or LambdaPolicy()
    targets = set(targets)
    if "proj_alpha" in targets:
        targets.add("alpha")
    if "proj_alpha" in targets or "rho" in targets:
        targets.add("h")
    F = basis.transform(sample.x) if F is None else F
    prob = build_problem(basis, sample, mode, F=F)
    fits, lams = {}, {}
    for t in _ORDER:
        if t not in targets:
            continue
        aux = fits.get("alpha") if t == "proj_alpha" else fits.get("h") if t == "rho" else None
        if t == "alpha" and policy.alpha_lam is not None:
            lam = float(policy.alpha_lam)
        elif policy.policy == "fixed":
            lam = policy.fixed(t)
        else:
            lam = cv_select_lambda(sample, basis, t, grid=policy.grid, folds=policy.folds, seed=seed,
                                   m=spec.m, aux=aux, mode=mode, F=F).lam
        if t == "h":
            fits[t] = fit_h(prob, lam)
        elif t == "beta":
            fits[t] = fit_beta(prob, spec.m, lam)
        elif t == "alpha":
            fits[t] = fit_alpha(prob.G, spec.m, lam, mode)
        elif t == "proj_alpha":
            fits[t] = fit_proj_alpha(prob, aux, lam)
        else:
            fits[t] = fit_rho(prob, aux, lam)
        lams[t] = lam
    fits["lambdas"] = lams
    return fits


def _run_one(name, sample, basis, fits, spec, level, q_mode, F):
    g = fits.get
    if name in ("crossfold", "dml_2sls"):
        return estimate_crossfold(sample, basis, g("h"), g("beta"), spec, level, q_mode, name, F)
    if name == "single_split":
        return estimate_single_split(sample, basis, g("h"), g("beta"), spec, level, 0, name, F)
    if name == "modified":
        return estimate_modified(sample, basis, g("h"), g("beta"), g("alpha"), g("proj_alpha"), g("rho"),
                                 spec, level, q_mode, name, F)
    if name in ("plugin", "plugin_2sls"):
        return estimate_plugin(sample, basis, g("h"), g("beta"), spec, level, q_mode, name, F)
    if name in ("ipw", "ipw_2sls"):
        return estimate_ipw(sample, basis, g("beta"), level, q_mode, name, F)
    raise ValueError(f"unknown estimator {name!r}")


def estimate_all(sample: GroupedSample, basis: FeatureBasis, spec: FunctionalSpec, estimators,
                 policy: LambdaPolicy | None = None, seed: int = 0, level: float = 0.95,
                 crossfit: bool = False, capture_errors: bool = False) -> dict:
    """Fit the needed nuisances once per mode and run each requested estimator.

    ``sample`` must carry fold labels (``two_fold`` or ``leave_one_out``).
    Estimators ending in ``_2sls`` use plug-in-mode fits and full-cell means.
    With ``capture_errors`` a failing estimator maps to its exception instead
    of raising.
    """
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimators: {unknown}")
    if not sample.folds_assigned:
        raise FoldsUnassigned("assign folds before estimating")
    if crossfit:
        return _estimate_crossfit(sample, basis, spec, estimators, policy, seed, level, capture_errors)
    loo = sample.scheme == "leave_one_out"
    jive_mode, jive_q = ("loo", "loo") if loo else ("jive", "cross")
    F = basis.transform(sample.x)
    groups = {}
    for e in estimators:
        key = "plugin" if e.endswith("_2sls") else jive_mode
        groups.setdefault(key, []).append(e)
    out = {}
    for mode, names in groups.items():
        targets = set().union(*(NEEDS[n] for n in names))
        try:
            fits = fit_nuisances(sample, basis, spec, targets, mode, policy, seed, F)
        except Exception as exc:  # noqa: BLE001 - recorded per estimator
            if not capture_errors:
                raise
            out.update({n: exc for n in names})
            continue
        q_mode = "full" if mode == "plugin" else jive_q
        for n in names:
            if n == "single_split" and loo:
                exc = FoldsUnassigned("single_split needs two-fold labels")
                if not capture_errors:
                    raise exc
                out[n] = exc
                continue
            try:
                rep = _run_one(n, sample, basis, fits, spec, level, q_mode, F)
                rep.diagnostics.update({f"lambda_{k}": v for k, v in fits["lambdas"].items()})
                out[n] = rep
            except Exception as exc:  # noqa: BLE001
                if not capture_errors:
                    raise
                out[n] = exc
    return {n: out[n] for n in estimators}


def _estimate_crossfit(sample, basis, spec, estimators, policy, seed, level, capture_errors):
    """Train nuisances on one half of each cell, estimate on the other, average."""
    halves = vfold_labels(sample, 2, seed + 0x5EED)
    parts = []
    for s in (0, 1):
        train = sample.subset(halves != s)
        evals = assign_folds(sample.subset(halves == s), seed + s, sample.scheme or "two_fold")
        train = assign_folds(train, seed + 2 + s, "two_fold")
        parts.append(_estimate_split(train, evals, basis, spec, estimators, policy, seed, level, capture_errors))
    out = {}
    for n in estimators:
        a, b = parts[0][n], parts[1][n]
        if isinstance(a, Exception) or isinstance(b, Exception):
            out[n] = a if isinstance(a, Exception) else b
            continue
        psi = 0.5 * (a.psi_hat + b.psi_hat)
        se = 0.5 * math.sqrt(a.se ** 2 + b.se ** 2)
        out[n] = _report(n, psi, se, level, a.n_effective + b.n_effective, {"crossfit": True})
    return out


def _estimate_split(train, evals, basis, spec, estimators, policy, seed, level, capture_errors):
    out = {}
    groups = {}
    for e in estimators:
        groups.setdefault("plugin" if e.endswith("_2sls") else "jive", []).append(e)
    F_eval = basis.transform(evals.x)
    for mode, names in groups.items():
        targets = set().union(*(NEEDS[n] for n in names))
        try:
            fits = fit_nuisances(train, basis, spec, targets, mode, policy, seed)
        except Exception as exc:  # noqa: BLE001
            if not capture_errors:
                raise
            out.update({n: exc for n in names})
            continue
        q_mode = "full" if mode == "plugin" else ("loo" if evals.scheme == "leave_one_out" else "cross")
        for n in names:
            try:
                out[n] = _run_one(n, evals, basis, fits, spec, level, q_mode, F_eval)
            except Exception as exc:  # noqa: BLE001
                if not capture_errors:
                    raise
                out[n] = exc
    return out
