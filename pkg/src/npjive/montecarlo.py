"""Replication studies: per-rep simulation and estimation, summaries and charts.

A study is fully determined by its :class:`StudyConfig`.  Replication ``r``
draws everything (data, folds, CV splits) from a seed obtained by hashing
``(base_seed, r)``, and the summary is an ordered reduction over reps, so
results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from .basis import make_basis
from .dgp import InvalidConfig, SurrogateDgpConfig, simulate_discrete, simulate_surrogate, simulate_weak_linear_iv
from .estimators import ESTIMATORS, LambdaPolicy, estimate_all
from .grouped import SCHEMES, assign_folds
from .oracle import OracleModel, solve as oracle_solve
from .solver import FunctionalSpec

SUMMARY_FIELDS = ("estimator", "K", "n", "reps", "abs_bias", "se", "rmse", "coverage",
                  "mean_ci_width", "failures")
REP_FIELDS = ("rep", "seed", "estimator", "psi_true", "psi_hat", "se", "ci_lo", "ci_hi", "covered", "error")
STUB = "oracle"  # returns psi_true with zero-width interval; for harness checks


class StudyFailed(RuntimeError):
    pass


def rep_seed(base_seed: int, r: int) -> int:
    """64-bit seed for replication ``r`` mixed from ``(base_seed, r)``."""
    ss = np.random.SeedSequence([int(base_seed) % 2**64, int(r)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class StudyConfig:
    """Replication study settings.

    JSON keys: ``dgp`` (dict with ``kind`` in ``surrogate``/``weak_iv``/``discrete``
    plus generator parameters), ``estimators``, ``basis`` (``kind``, ``size``),
    ``lambda`` (``policy``, ``value``, ``grid``, ``folds``), ``scheme``,
    ``reps``, ``base_seed``, ``level``, ``workers``, ``crossfit``.
    """

    dgp: dict = field(default_factory=lambda: {"kind": "surrogate"})
    estimators: tuple = ("crossfold", "dml_2sls", "single_split")
    basis: dict = field(default_factory=lambda: {"kind": "histogram", "size": 16})
    lam: LambdaPolicy = field(default_factory=LambdaPolicy)
    scheme: str = "two_fold"
    reps: int = 100
    base_seed: int = 0
    level: float = 0.95
    workers: int = 1
    crossfit: bool = False

    def __post_init__(self):
        if self.reps < 1:
            raise InvalidConfig("reps must be at least 1")
        if not self.estimators:
            raise InvalidConfig("estimator list is empty")
        bad = [e for e in self.estimators if e not in ESTIMATORS and e != STUB]
        if bad:
            raise InvalidConfig(f"unknown estimators: {bad}")
        if self.scheme not in SCHEMES:
            raise InvalidConfig(f"unknown splitting scheme {self.scheme!r}")
        if not 0 < self.level < 1:
            raise InvalidConfig("level must lie in (0, 1)")
        if self.dgp.get("kind", "surrogate") not in ("surrogate", "weak_iv", "discrete"):
            raise InvalidConfig(f"unknown dgp kind {self.dgp.get('kind')!r}")
        if self.workers < 1:
            raise InvalidConfig("workers must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> StudyConfig:
        known = {"dgp", "estimators", "basis", "lambda", "scheme", "reps", "base_seed", "level",
                 "workers", "crossfit"}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown study config keys: {sorted(extra)}")
        kw = {}
        for key in ("dgp", "basis"):
            if key in d:
                kw[key] = dict(d[key])
        if "estimators" in d:
            kw["estimators"] = tuple(d["estimators"])
        if "lambda" in d:
            kw["lam"] = LambdaPolicy.from_dict(d["lambda"])
        for key, typ in (("scheme", str), ("reps", int), ("base_seed", int), ("level", float),
                         ("workers", int), ("crossfit", bool)):
            if key in d:
                kw[key] = typ(d[key])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> StudyConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        lam = {"policy": self.lam.policy, "value": self.lam.value,
               "grid": list(self.lam.grid) if self.lam.grid else None, "folds": self.lam.folds}
        return {"dgp": self.dgp, "estimators": list(self.estimators), "basis": self.basis, "lambda": lam,
                "scheme": self.scheme, "reps": self.reps, "base_seed": self.base_seed,
                "level": self.level, "workers": self.workers, "crossfit": self.crossfit}

    @property
    def K(self):
        d = self.dgp
        if d.get("kind", "surrogate") == "discrete":
            return len(_discrete_model(d).w)
        return int(d.get("K", 1000))

    @property
    def n(self):
        d = self.dgp
        if d.get("kind", "surrogate") == "discrete":
            return int(np.mean(d.get("n_per_cell", 10)))
        return int(d.get("n", 30))

    def with_size(self, K: int, n: int) -> StudyConfig:
        return replace(self, dgp={**self.dgp, "K": int(K), "n": int(n)})


def _discrete_model(d):
    m = d["model"]
    return OracleModel.from_json(m) if isinstance(m, str) else OracleModel.from_dict(m)


def simulate_rep(config: StudyConfig, seed: int):
    """Draw one dataset; returns ``(sample, spec_builder, psi_true)``."""
    d = dict(config.dgp)
    kind = d.pop("kind", "surrogate")
    if kind == "surrogate":
        sim = simulate_surrogate(SurrogateDgpConfig.from_dict({**d, "seed": seed}))
        return sim.sample, (lambda basis: FunctionalSpec.from_target(basis, sim.target_x)), sim.psi_true
    if kind == "weak_iv":
        sim = simulate_weak_linear_iv(int(d.get("K", 50)), int(d.get("n", 30)), float(d.get("pi", 1.0)),
                                      float(d.get("sigma_v", 1.0)), float(d.get("b", 1.0)), seed,
                                      int(d.get("n_new", 10000)), d.get("target_levels", "uniform"))
        return sim.sample, (lambda basis: FunctionalSpec.from_target(basis, sim.target_x)), sim.psi_true
    model = _discrete_model(d)
    sample = simulate_discrete(model, d.get("n_per_cell", 10), seed)
    h_star = d.get("h_star")
    psi_true = model.psi(h_star) if h_star is not None else oracle_solve(model).psi_K
    xs = model.xs if model.xs.ndim == 2 else model.xs[:, None]

    def spec(basis):
        return FunctionalSpec(xs, model.pstar @ basis.transform(xs))

    return sample, spec, psi_true


def run_rep(config: StudyConfig, r: int) -> list[dict]:
    """All estimator rows for replication ``r``; failures become rows with ``error`` set."""
    seed = rep_seed(config.base_seed, r)
    rows = []
    try:
        sample, make_spec, psi_true = simulate_rep(config, seed)
        sample = _quiet_call(assign_folds, sample, seed, config.scheme)
        basis = _quiet_call(make_basis, config.basis.get("kind", "histogram"),
                            int(config.basis.get("size", 16)), sample)
        spec = make_spec(basis)
        names = [e for e in config.estimators if e != STUB]
        reports = estimate_all(sample, basis, spec, names, config.lam, seed, config.level,
                               crossfit=config.crossfit, capture_errors=True) if names else {}
    except Exception as exc:  # noqa: BLE001 - whole-rep failure
        return [_row(r, seed, e, float("nan"), None, exc) for e in config.estimators]
    for e in config.estimators:
        if e == STUB:
            rows.append({"rep": r, "seed": seed, "estimator": e, "psi_true": psi_true, "psi_hat": psi_true,
                         "se": 0.0, "ci_lo": psi_true, "ci_hi": psi_true, "covered": 1, "error": ""})
        else:
            rows.append(_row(r, seed, e, psi_true, reports[e]))
    return rows


def _quiet_call(fn, *args):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args)


def _row(r, seed, e, psi_true, rep, exc=None):
    if exc is None and isinstance(rep, Exception):
        exc = rep
    if exc is not None:
        nan = float("nan")
        return {"rep": r, "seed": seed, "estimator": e, "psi_true": psi_true, "psi_hat": nan, "se": nan,
                "ci_lo": nan, "ci_hi": nan, "covered": 0, "error": type(exc).__name__}
    return {"rep": r, "seed": seed, "estimator": e, "psi_true": psi_true, "psi_hat": rep.psi_hat,
            "se": rep.se, "ci_lo": rep.ci_lo, "ci_hi": rep.ci_hi, "covered": int(rep.covers(psi_true)),
            "error": ""}


@dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    summary: list
    reps: list

    def summary_csv(self) -> str:
        return summary_csv(self.summary)

    def reps_csv(self) -> str:
        return _csv(REP_FIELDS, self.reps)

    def to_json(self) -> str:
        return json.dumps({"config": self.config.to_dict(),
                           "summary": [_jsonable(r) for r in self.summary]}, indent=1)

    def row(self, estimator: str) -> dict:
        for r in self.summary:
            if r["estimator"] == estimator:
                return r
        raise KeyError(estimator)

    def psi_hats(self, estimator: str) -> np.ndarray:
        return np.array([r["psi_hat"] for r in self.reps if r["estimator"] == estimator and not r["error"]])


def _jsonable(row):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


def summarize(rows: list, config: StudyConfig) -> list[dict]:
    """Per-estimator Monte Carlo metrics over successful reps.

    ``se`` is the sd of the errors with ddof=0 and ``rmse = sqrt(bias^2 + se^2)``.
    """
    out = []
    for e in config.estimators:
        mine = [r for r in rows if r["estimator"] == e]
        ok = [r for r in mine if not r["error"]]
        failures = len(mine) - len(ok)
        if ok:
            err = np.array([r["psi_hat"] - r["psi_true"] for r in ok])
            bias = float(np.mean(err))
            se = float(np.sqrt(np.mean((err - bias) ** 2)))
            rmse = math.sqrt(bias ** 2 + se ** 2)
            cov = float(np.mean([r["covered"] for r in ok]))
            width = float(np.mean([r["ci_hi"] - r["ci_lo"] for r in ok]))
            rse = float(np.mean([r["se"] for r in ok]))
        else:
            bias = se = rmse = cov = width = rse = float("nan")
        out.append({"estimator": e, "K": config.K, "n": config.n, "reps": len(ok), "abs_bias": abs(bias),
                    "bias": bias, "se": se, "rmse": rmse, "coverage": cov, "mean_ci_width": width,
                    "failures": failures, "mean_reported_se": rse})
    return out


def run_study(config: StudyConfig, workers: int | None = None) -> StudyResult:
    """Run all replications (optionally in worker processes) and summarize."""
    workers = config.workers if workers is None else int(workers)
    fn = partial(run_rep, config)
    if workers > 1 and config.reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, range(config.reps), chunksize=max(1, config.reps // (4 * workers))))
    else:
        chunks = [fn(r) for r in range(config.reps)]
    rows = [row for chunk in chunks for row in chunk]
    if all(r["error"] for r in rows):
        raise StudyFailed(f"all replications failed ({rows[0]['error']})")
    return StudyResult(config, summarize(rows, config), rows)


def run_sweep(config: StudyConfig, K_list, n_list, workers: int | None = None) -> list[StudyResult]:
    return [run_study(config.with_size(K, n), workers) for n in n_list for K in K_list]


# ---- output ----

def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def _csv(fields, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def summary_csv(rows: list) -> str:
    return _csv(SUMMARY_FIELDS, rows)


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str, width: int = 480,
                   height: int = 320, hline: float | None = None) -> str:
    """Minimal SVG 1.1 line chart; ``series`` maps a label to ``(xs, ys)``."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if hline is not None:
        pts.append((pts[0][0] if pts else 0.0, hline))
    if not pts:
        pts = [(0.0, 0.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1.0
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad
    L, R, T, B = 60, 120, 30, 45
    pw, ph = width - L - R, height - T - B

    def sx(x):
        return L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return T + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
           f'<text x="{L + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
           f'<text x="14" y="{T + ph / 2:.1f}" text-anchor="middle" font-size="11" '
           f'transform="rotate(-90 14 {T + ph / 2:.1f})">{_esc(ylabel)}</text>']
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{L - 4}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="9">{v:.3g}</text>')
    xticks = sorted({p[0] for p in pts})
    for v in xticks:
        out.append(f'<text x="{sx(v):.1f}" y="{T + ph + 14}" text-anchor="middle" font-size="9">{v:g}</text>')
    if hline is not None:
        out.append(f'<line x1="{L}" x2="{L + pw}" y1="{sy(hline):.1f}" y2="{sy(hline):.1f}" '
                   'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        good = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
        if good:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
            for x, y in good:
                out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{c}"/>')
        ly = T + 14 * (i + 1)
        out.append(f'<line x1="{L + pw + 8}" x2="{L + pw + 24}" y1="{ly - 4}" y2="{ly - 4}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 28}" y="{ly}" font-size="10">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def metric_charts(rows: list, metrics=("abs_bias", "se", "rmse", "coverage")) -> dict:
    """One chart per (metric, n): metric against K with a series per estimator."""
    charts = {}
    for n in sorted({r["n"] for r in rows}):
        sub = [r for r in rows if r["n"] == n]
        for metric in metrics:
            series = {}
            for e in dict.fromkeys(r["estimator"] for r in sub):
                pts = sorted((r["K"], r[metric]) for r in sub if r["estimator"] == e)
                series[e] = ([p[0] for p in pts], [float(p[1]) for p in pts])
            charts[f"{metric}_n{n}.svg"] = svg_line_chart(
                series, f"{metric} (n = {n})", "K", metric, hline=0.95 if metric == "coverage" else None)
    return charts


def write_outputs(results: list[StudyResult], out: Path, fmt: str = "csv", charts: bool = False) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for res in results for r in res.summary]
    written = []
    if fmt == "csv":
        p = out / "summary.csv"
        p.write_text(summary_csv(rows))
    else:
        p = out / "summary.json"
        p.write_text(json.dumps({"config": results[0].config.to_dict(),
                                 "summary": [_jsonable(r) for r in rows]}, indent=1) + "\n")
    written.append(p)
    reps = out / "reps.csv"
    reps.write_text("".join(res.reps_csv() if i == 0 else res.reps_csv().split("\n", 1)[1]
                            for i, res in enumerate(results)))
    written.append(reps)
    if charts:
        for name, svg in metric_charts(rows).items():
            p = out / name
            p.write_text(svg)
            written.append(p)
    return written
