"""End-to-end acceptance checks.

Each test prints one ``PASS`` or ``FAIL`` line for its criterion (visible in
``pytest -v`` output) before asserting.  Tolerances are pinned here.
"""
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from npjive import oracle as orc
from npjive.basis import FeatureBasis, make_basis
from npjive.dgp import SurrogateDgpConfig, cell_mean_structural, simulate_discrete, simulate_surrogate
from npjive.estimators import (LambdaPolicy, estimate_crossfold, estimate_modified, estimate_plugin,
                               estimate_single_split, fit_nuisances)
from npjive.grouped import assign_folds
from npjive.moments import compute_moments, npjive_risk
from npjive.montecarlo import StudyConfig, run_study
from npjive.solver import FunctionalSpec, NuisanceFit, build_problem, objective

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

ORACLE_TOL = 1e-8
ORC_B_TOL = 1e-10
ORACLE_SECONDS = 10.0
RISK_SEEDS, RISK_SIGMAS, RISK_SECONDS = 2000, 3.0, 30.0
IDENTITY_TOL = 1e-12
NORMAL_EQ_TOL, FD_TOL = 1e-8, 1e-6
COVERAGE_BAND = (0.89, 0.99)
COVERAGE_DROP, BIAS_RATIO, WIDTH_RATIO = 0.05, 1.5, 1.2
TREND_NS, TREND_SEEDS, TREND_MAX_INVERSIONS = (25, 50, 100, 200), 20, 1
SE_CALIBRATION = 0.2


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def _surrogate_fits(seed, K=60, n=12):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sim = simulate_surrogate(SurrogateDgpConfig(K=K, n=n, n_new=2000, seed=seed))
        sample = assign_folds(sim.sample, seed)
    basis = make_basis("histogram", 16, sample)
    spec = FunctionalSpec.from_target(basis, sim.target_x)
    fits = fit_nuisances(sample, basis, spec, ("h", "beta", "alpha", "proj_alpha", "rho"), seed=seed)
    return sample, basis, spec, fits


def test_criterion_1_oracle_identities(capsys):
    t0 = time.perf_counter()
    models = {"orc_a": orc.orc_a(), "orc_b": orc.orc_b(), "identity": orc.identity_model()}
    rng = np.random.default_rng(2024)
    for i in range(100):
        models[f"random_{i}"] = orc.random_model(rng)
    worst, worst_name, ranks_ok = 0.0, "", True
    for name, (model, h_star) in models.items():
        assert model.K <= 6 and model.m <= 8
        checks = orc.identity_checks(model, h_star)
        ranks_ok &= bool(checks.pop("rank_agreement")) and bool(checks.pop("consistent"))
        # perturbation toward an independent model sharing the support and weights
        other, _ = orc.random_model(rng, model.K, model.m, model.L)
        bar = model.mixture(orc.OracleModel(model.xs, model.ys, other.Pxy, model.w, model.pstar), 0.3)
        lhs, rhs = orc.von_mises_residual(model, bar)
        l2, r2 = orc.perturbation_residual(model, bar)
        checks["von_mises"] = abs(lhs - rhs)
        checks["perturbation_expansion"] = abs(l2 - r2)
        name_max = max(checks, key=checks.get)
        if checks[name_max] > worst:
            worst, worst_name = checks[name_max], f"{name}/{name_max}"
    elapsed = time.perf_counter() - t0
    ok = worst <= ORACLE_TOL and ranks_ok and elapsed < ORACLE_SECONDS
    verdict(capsys, 1, ok, f"{len(models)} models, worst residual {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_2_orc_b_ground_truth(capsys):
    model, h_star = orc.orc_b()
    g = orc.gap(model, h_star)
    sol = orc.solve(model)
    errs = {"gap": abs(g["gap"] + 1), "psi_K": abs(g["psi_K"] - 2), "psi": abs(g["psi"] - 3),
            "proj_alpha": float(np.abs(sol.proj_alpha - [1, 1]).max())}
    worst = max(errs.values())
    verdict(capsys, 2, worst <= ORC_B_TOL, f"gap {g['gap']:.12f}, psi_K {g['psi_K']:.12f}, psi {g['psi']:.12f}, "
                                           f"max error {worst:.1e}")


def test_criterion_3_risk_unbiased(capsys):
    t0 = time.perf_counter()
    model, _ = orc.orc_a()
    basis = FeatureBasis.histogram_from_edges([-0.5, 0.5, 1.5])
    theta = np.array([0.3, 1.1])
    vals = np.empty(RISK_SEEDS)
    for s in range(RISK_SEEDS):
        sample = assign_folds(simulate_discrete(model, 4, s), s)
        vals[s] = npjive_risk(compute_moments(basis, sample), theta)
    target = orc.population_risk(model, theta)
    mcse = vals.std(ddof=1) / np.sqrt(RISK_SEEDS)
    z = abs(vals.mean() - target) / mcse
    elapsed = time.perf_counter() - t0
    verdict(capsys, 3, z <= RISK_SIGMAS and elapsed < RISK_SECONDS,
            f"mean {vals.mean():.5f} vs population {target:.5f}, {z:.2f} MC SEs, {elapsed:.1f}s")


def test_criterion_4_estimator_identities(capsys):
    worst = {"average": 0.0, "modified": 0.0, "zero_beta": 0.0}
    for seed in range(5):
        s, b, spec, f = _surrogate_fits(seed)
        cf = estimate_crossfold(s, b, f["h"], f["beta"], spec)
        s0 = estimate_single_split(s, b, f["h"], f["beta"], spec, debias_fold=0)
        s1 = estimate_single_split(s, b, f["h"], f["beta"], spec, debias_fold=1)
        worst["average"] = max(worst["average"], abs(cf.psi_hat - 0.5 * (s0.psi_hat + s1.psi_hat)))
        md = estimate_modified(s, b, f["h"], f["beta"], f["alpha"], f["alpha"], f["rho"], spec)
        worst["modified"] = max(worst["modified"], abs(md.psi_hat - cf.psi_hat))
        zero = NuisanceFit("beta", np.zeros(b.p), 1.0, "jive")
        plug = estimate_plugin(s, b, f["h"], None, spec)
        worst["zero_beta"] = max(worst["zero_beta"],
                                 abs(estimate_crossfold(s, b, f["h"], zero, spec).psi_hat - plug.psi_hat))
    ok = worst["average"] <= IDENTITY_TOL and worst["modified"] <= IDENTITY_TOL and worst["zero_beta"] == 0
    verdict(capsys, 4, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_5_solver_correctness(capsys):
    worst_ne, worst_fd = 0.0, 0.0
    for seed in range(5):
        s, b, spec, f = _surrogate_fits(seed)
        prob = build_problem(b, s)
        M, G = prob.forms.M, prob.G
        systems = {
            "h": (M + f["h"].lam * G, prob.forms.c, None),
            "beta": (M + f["beta"].lam * G, spec.m, None),
            "alpha": (G + f["alpha"].lam * np.eye(b.p), spec.m, None),
            "proj_alpha": (M + f["proj_alpha"].lam * G, M @ f["alpha"].theta, f["alpha"].theta),
            "rho": (M + f["rho"].lam * G, G @ f["h"].theta, f["h"].theta),
        }
        for t, (A, rhs, aux) in systems.items():
            fit = f[t]
            worst_ne = max(worst_ne, np.linalg.norm(A @ fit.theta - rhs) / np.linalg.norm(rhs))

            def obj(th):
                return objective(t, prob, th, fit.lam, m=spec.m, aux_theta=aux)

            g_hat = _central_gradient(obj, fit.theta)
            g_ref = _central_gradient(obj, np.zeros(b.p))
            worst_fd = max(worst_fd, np.linalg.norm(g_hat) / np.linalg.norm(g_ref))
    ok = worst_ne <= NORMAL_EQ_TOL and worst_fd <= FD_TOL
    verdict(capsys, 5, ok, f"normal-equation residual {worst_ne:.1e}, gradient at solution {worst_fd:.1e} (relative)")


def _central_gradient(f, x, eps=1e-4):
    # exact for quadratics up to rounding
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = eps
        g[j] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


@pytest.fixture(scope="module")
def desk_study():
    cfg = StudyConfig.from_json(CONFIGS / "desk_study.json")
    t0 = time.perf_counter()
    res = run_study(cfg)
    return res, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_desk_reproduction(desk_study, capsys):
    res, elapsed = desk_study
    jive, tsls, split = res.row("crossfold"), res.row("dml_2sls"), res.row("single_split")
    lo, hi = COVERAGE_BAND
    a = lo <= jive["coverage"] <= hi
    b = (tsls["coverage"] <= jive["coverage"] - COVERAGE_DROP
         and tsls["abs_bias"] >= BIAS_RATIO * jive["abs_bias"])
    ratio = split["mean_ci_width"] / jive["mean_ci_width"]
    c = lo <= split["coverage"] <= hi and ratio >= WIDTH_RATIO
    detail = (f"(a) crossfold coverage {jive['coverage']:.3f} {'ok' if a else 'out of band'}; "
              f"(b) 2SLS-style coverage {tsls['coverage']:.3f}, |bias| {tsls['abs_bias']:.4f} vs "
              f"{jive['abs_bias']:.4f} {'ok' if b else 'not separated'}; "
              f"(c) single-split coverage {split['coverage']:.3f}, width ratio {ratio:.2f} "
              f"{'ok' if c else 'fails'}; {res.config.reps} reps in {elapsed:.0f}s")
    verdict(capsys, 6, a and b and c, detail)


@pytest.mark.slow
def test_criterion_7_weak_norm_trend(capsys):
    t0 = time.perf_counter()
    errors = []
    for n in TREND_NS:
        per_seed = []
        for seed in range(TREND_SEEDS):
            cfg = SurrogateDgpConfig(K=50, n=n, n_new=1000, seed=seed)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sim = simulate_surrogate(cfg)
                sample = assign_folds(sim.sample, seed)
            basis = make_basis("histogram", 16, sample)
            spec = FunctionalSpec.from_target(basis, sim.target_x)
            h = fit_nuisances(sample, basis, spec, ("h",), seed=seed)["h"]
            # fresh treatment draws per cell give held-out cell means of h_hat and h*
            fitted = cell_mean_structural(cfg, sim.cell_params, lambda x: basis.transform(x) @ h.theta,
                                          seed=10_000 + seed)
            truth = cell_mean_structural(cfg, sim.cell_params, cfg.h, seed=10_000 + seed)
            per_seed.append(np.mean((fitted - truth) ** 2))
        errors.append(float(np.mean(per_seed)))
    inversions = int(np.sum(np.diff(errors) > 0))
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"n={n}: {e:.4f}" for n, e in zip(TREND_NS, errors))
    verdict(capsys, 7, inversions <= TREND_MAX_INVERSIONS,
            f"{detail}; {inversions} inversions, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_se_calibration(desk_study, capsys):
    # Known shortfall: the reported SE omits nuisance-estimation variance, see README
    res, _ = desk_study
    jive = res.row("crossfold")
    rel = abs(jive["mean_reported_se"] - jive["se"]) / jive["se"]
    verdict(capsys, 8, rel <= SE_CALIBRATION,
            f"mean reported SE {jive['mean_reported_se']:.4f} vs MC sd {jive['se']:.4f}, "
            f"relative gap {rel:.2f} (limit {SE_CALIBRATION})")


def _simulate(out, workers):
    cmd = [sys.executable, "-m", "npjive.cli", "simulate", str(CONFIGS / "smoke_study.json"), "--seed", "314",
           "--workers", str(workers), "--out", str(out)]
    subprocess.run(cmd, check=True, capture_output=True)
    return (out / "summary.csv").read_bytes(), (out / "reps.csv").read_bytes()


def test_criterion_9_determinism(tmp_path, capsys):
    first = _simulate(tmp_path / "a", 1)
    again = _simulate(tmp_path / "b", 1)
    parallel = _simulate(tmp_path / "c", 4)
    ok = first == again == parallel and len(first[0]) > 0
    verdict(capsys, 9, ok, f"summary.csv and reps.csv byte-identical across 2 runs and workers 1/4 "
                           f"({len(first[0])} + {len(first[1])} bytes)" if ok else "outputs differ")
