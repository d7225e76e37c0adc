import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, strategies as st

from npjive import oracle as orc
from npjive.dgp import InvalidConfig
from npjive.montecarlo import (REP_FIELDS, SUMMARY_FIELDS, StudyConfig, metric_charts, rep_seed, run_rep,
                               run_study, run_sweep, summarize, svg_line_chart, write_outputs)

SMALL = {"dgp": {"kind": "surrogate", "K": 20, "n": 6, "n_new": 200},
         "estimators": ["crossfold", "plugin", "oracle"], "basis": {"kind": "histogram", "size": 4},
         "lambda": {"policy": "fixed", "value": 0.05}, "reps": 4, "base_seed": 11}


def test_rep_seeds_are_distinct_and_stable():
    seeds = [rep_seed(3, r) for r in range(500)]
    assert len(set(seeds)) == 500
    assert seeds[7] == rep_seed(3, 7) != rep_seed(4, 7)
    assert all(0 <= s < 2**64 for s in seeds)


def test_config_round_trip_and_validation():
    cfg = StudyConfig.from_dict(SMALL)
    assert StudyConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.K, cfg.n) == (20, 6)
    assert cfg.with_size(30, 9).K == 30
    for bad in ({"reps": 0}, {"estimators": ["magic"]}, {"scheme": "three"}, {"level": 1.5},
                {"dgp": {"kind": "lattice"}}, {"colour": 1}, {"workers": 0}):
        with pytest.raises(InvalidConfig):
            StudyConfig.from_dict({**SMALL, **bad})


def test_oracle_stub_row():
    rows = run_rep(StudyConfig.from_dict(SMALL), 0)
    stub = [r for r in rows if r["estimator"] == "oracle"][0]
    assert stub["psi_hat"] == stub["psi_true"] and stub["covered"] == 1
    assert set(stub) == set(REP_FIELDS)


def test_study_summary_identities():
    res = run_study(StudyConfig.from_dict(SMALL))
    for row in res.summary:
        assert row["rmse"] == pytest.approx(math.sqrt(row["abs_bias"] ** 2 + row["se"] ** 2), rel=1e-12)
        assert 0 <= row["coverage"] <= 1
    stub = res.row("oracle")
    assert stub["abs_bias"] == 0 and stub["se"] == 0 and stub["coverage"] == 1
    assert res.summary_csv().splitlines()[0] == ",".join(SUMMARY_FIELDS)
    assert len(res.psi_hats("crossfold")) == 4


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-3, 3))
def test_rmse_decomposition(errs, truth):
    cfg = StudyConfig(estimators=("crossfold",))
    rows = [{"estimator": "crossfold", "psi_true": truth, "psi_hat": truth + e, "se": 1.0, "ci_lo": 0.0,
             "ci_hi": 1.0, "covered": 1, "error": ""} for e in errs]
    row = summarize(rows, cfg)[0]
    assert row["rmse"] ** 2 == pytest.approx(np.mean(np.square(errs)), rel=1e-9, abs=1e-12)


def test_failures_are_counted():
    cfg = StudyConfig(estimators=("crossfold",))
    rows = [{"estimator": "crossfold", "psi_true": 0.0, "psi_hat": float("nan"), "se": float("nan"),
             "ci_lo": float("nan"), "ci_hi": float("nan"), "covered": 0, "error": "SingularSystem"},
            {"estimator": "crossfold", "psi_true": 0.0, "psi_hat": 0.1, "se": 0.1, "ci_lo": -0.1,
             "ci_hi": 0.3, "covered": 1, "error": ""}]
    row = summarize(rows, cfg)[0]
    assert row["failures"] == 1 and row["reps"] == 1


def test_worker_count_does_not_change_results():
    cfg = StudyConfig.from_dict({**SMALL, "reps": 5})
    assert run_study(cfg, workers=1).summary_csv() == run_study(cfg, workers=2).summary_csv()


def test_discrete_and_weak_iv_studies():
    model, h_star = orc.orc_a()
    disc = StudyConfig.from_dict({"dgp": {"kind": "discrete", "model": model.to_dict(), "h_star": h_star.tolist(),
                                          "n_per_cell": 40},
                                  "estimators": ["crossfold"], "basis": {"kind": "histogram", "size": 2},
                                  "lambda": {"policy": "fixed", "value": 1e-3}, "reps": 3})
    res = run_study(disc)
    assert res.reps[0]["psi_true"] == pytest.approx(1.0)
    assert res.row("crossfold")["failures"] == 0
    wiv = StudyConfig.from_dict({"dgp": {"kind": "weak_iv", "K": 20, "n": 10, "pi": 1.0, "n_new": 100},
                                 "estimators": ["plugin"], "basis": {"kind": "linear_spline", "size": 2},
                                 "lambda": {"policy": "fixed", "value": 1e-2}, "reps": 2})
    assert np.isfinite(run_study(wiv).row("plugin")["rmse"])


def test_svg_chart_is_wellformed():
    svg = svg_line_chart({"a": ([1, 2, 3], [0.1, float("nan"), 0.3]), "b<c": ([1, 2], [0.2, 0.2])},
                         "t & u", "K", "y", hline=0.95)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


def test_write_outputs(tmp_path):
    results = run_sweep(StudyConfig.from_dict({**SMALL, "reps": 2}), [10, 20], [6])
    files = write_outputs(results, tmp_path, "json", charts=True)
    names = {p.name for p in files}
    assert {"summary.json", "reps.csv", "coverage_n6.svg"} <= names
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]
    assert sorted({r["K"] for r in summary}) == [10, 20]
    reps = (tmp_path / "reps.csv").read_text().splitlines()
    assert reps[0] == ",".join(REP_FIELDS) and len(reps) == 1 + 2 * 2 * 3
    assert set(metric_charts(summary)) >= {"rmse_n6.svg", "abs_bias_n6.svg"}
