"""Fast invariant suite behind ``npjive selfcheck``."""
from __future__ import annotations

import warnings

import numpy as np

from . import oracle as orc
from .basis import FeatureBasis
from .dgp import SurrogateDgpConfig, simulate_discrete, simulate_surrogate
from .estimators import estimate_crossfold, estimate_modified, estimate_single_split, fit_nuisances
from .grouped import assign_folds
from .moments import compute_moments, npjive_risk
from .solver import FunctionalSpec, build_problem, fit_beta, fit_h

TOL = 1e-8


def _oracle_checks(n_random=25, seed=0):
    out = {}
    named = {"orc_a": orc.orc_a(), "orc_b": orc.orc_b(), "identity": orc.identity_model()}
    rng = np.random.default_rng(seed)
    for i in range(n_random):
        named[f"random_{i}"] = orc.random_model(rng)
    worst = 0.0
    for name, (model, h_star) in named.items():
        c = orc.identity_checks(model, h_star, n_random=10)
        worst = max(worst, max(v for k, v in c.items() if k not in ("rank_agreement", "consistent")))
        if not c["rank_agreement"]:
            out[f"rank:{name}"] = False
        bar, _ = orc.random_model(rng, model.K, model.m, model.L)
        bar = model.mixture(orc.OracleModel(model.xs, model.ys, bar.Pxy, model.w, model.pstar), 0.3)
        lhs, rhs = orc.von_mises_residual(model, bar)
        l2, r2 = orc.perturbation_residual(model, bar)
        worst = max(worst, abs(lhs - rhs), abs(l2 - r2))
    out["oracle_identities"] = worst <= TOL
    g = orc.gap(*orc.orc_b())
    out["orc_b_gap"] = abs(g["gap"] + 1) <= 1e-10 and abs(g["psi_K"] - 2) <= 1e-10
    sol = orc.solve(orc.orc_a()[0])
    out["orc_a_solution"] = bool(np.allclose(sol.h_K, [0, 2], atol=1e-10) and abs(sol.psi_K - 1) <= 1e-10)
    return out


def _estimator_checks(seed=0):
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sim = simulate_surrogate(SurrogateDgpConfig(K=30, n=6, n_new=500, seed=seed))
        sample = assign_folds(sim.sample, seed)
    basis = FeatureBasis.histogram_from_edges(np.linspace(sim.sample.x.min(), sim.sample.x.max(), 7))
    spec = FunctionalSpec.from_target(basis, sim.target_x)
    fits = fit_nuisances(sample, basis, spec, ("h", "beta", "alpha", "proj_alpha", "rho"),
                         policy=_fixed(1e-3))
    cf = estimate_crossfold(sample, basis, fits["h"], fits["beta"], spec)
    s0 = estimate_single_split(sample, basis, fits["h"], fits["beta"], spec, debias_fold=0)
    s1 = estimate_single_split(sample, basis, fits["h"], fits["beta"], spec, debias_fold=1)
    out["averaging_identity"] = abs(cf.psi_hat - 0.5 * (s0.psi_hat + s1.psi_hat)) <= 1e-12
    md = estimate_modified(sample, basis, fits["h"], fits["beta"], fits["alpha"], fits["alpha"], fits["rho"], spec)
    out["modified_reduces"] = abs(md.psi_hat - cf.psi_hat) <= 1e-12
    prob = build_problem(basis, sample)
    h = fit_h(prob, 1e-2)
    b = fit_beta(prob, spec.m, 1e-2)
    A = prob.forms.M + 1e-2 * prob.G
    out["normal_equations"] = bool(
        np.linalg.norm(A @ h.theta - prob.forms.c) <= TOL * (np.linalg.norm(prob.forms.c) + 1)
        and np.linalg.norm(A @ b.theta - spec.m) <= TOL * (np.linalg.norm(spec.m) + 1))
    return out


def _risk_check(seed=0, reps=300):
    model, _ = orc.orc_a()
    basis = FeatureBasis.histogram_from_edges([-0.5, 0.5, 1.5])
    theta = np.array([0.3, 1.1])
    vals = []
    for r in range(reps):
        s = assign_folds(simulate_discrete(model, 4, seed + r), seed + r)
        vals.append(npjive_risk(compute_moments(basis, s), theta))
    vals = np.array(vals)
    target = orc.population_risk(model, theta)
    return {"risk_unbiased": abs(vals.mean() - target) <= 4 * vals.std(ddof=1) / np.sqrt(reps)}


def _fixed(v):
    from .estimators import LambdaPolicy

    return LambdaPolicy("fixed", v)


def run_selfcheck(seed: int = 0) -> dict:
    """Run all checks; returns ``{name: passed}``."""
    results = {}
    results.update(_oracle_checks(seed=seed))
    results.update(_estimator_checks(seed=seed))
    results.update(_risk_check(seed=seed))
    return {k: bool(v) for k, v in results.items()}
