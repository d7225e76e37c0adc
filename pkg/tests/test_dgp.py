import numpy as np
import pytest
from hypothesis import given, strategies as st

from npjive import oracle as orc
from npjive.dgp import (InvalidConfig, SurrogateDgpConfig, cell_mean_structural, confounder_levels, reflect,
                        simulate_discrete, simulate_surrogate, simulate_weak_linear_iv, surrogate_walk)


@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(-5, 5), st.floats(0.1, 10))
def test_reflect_stays_in_bounds(v, lo, width):
    hi = lo + width
    r = float(reflect(v, lo, hi))
    assert lo - 1e-9 <= r <= hi + 1e-9
    if lo <= v <= hi:
        assert r == pytest.approx(v, abs=1e-9 * max(1.0, abs(v)))


def test_reflect_mirrors_at_edges():
    np.testing.assert_allclose(reflect([8.5, 0.5, 15.5], 1.0, 8.0), [7.5, 1.5, 1.5])


@pytest.mark.parametrize("M", [1, 2, 10, 25])
def test_confounder_levels_symmetric(M):
    v = confounder_levels(0.2, M)
    assert len(v) == M and abs(v.sum()) < 1e-15
    np.testing.assert_allclose(v, -v[::-1], atol=0)


def test_surrogate_shapes_and_determinism():
    cfg = SurrogateDgpConfig(K=15, n=7, n_new=100, seed=4)
    a, b = simulate_surrogate(cfg), simulate_surrogate(cfg)
    np.testing.assert_array_equal(a.sample.y, b.sample.y)
    assert a.sample.N == 105 and a.sample.K == 15 and a.target_x.shape == (100, 1)
    sample, tx, psi = a
    assert psi == pytest.approx(tx.mean())
    assert not np.array_equal(a.sample.y, simulate_surrogate(SurrogateDgpConfig(K=15, n=7, n_new=100,
                                                                                seed=5)).sample.y)


def test_cells_do_not_depend_on_K():
    # per-cell streams are keyed by (seed, k), so growing K leaves earlier cells unchanged
    small = simulate_surrogate(SurrogateDgpConfig(K=5, n=4, n_new=10, seed=1)).sample
    big = simulate_surrogate(SurrogateDgpConfig(K=9, n=4, n_new=10, seed=1)).sample
    np.testing.assert_array_equal(small.y, big.y[:20])


def test_walk_within_bounds():
    p = surrogate_walk(SurrogateDgpConfig(K=500, seed=2))
    assert p.min() >= 1.0 and p.max() <= 8.0
    assert np.abs(np.diff(p, axis=0)).max() < 4


def test_outcome_structure():
    sim = simulate_surrogate(SurrogateDgpConfig(K=200, n=30, n_new=10, seed=0, conf_coef=0.0))
    res = sim.sample.y - sim.sample.x[:, 0]
    assert res.std() == pytest.approx(0.3, rel=0.05)


def test_cell_mean_structural_matches_beta_mean():
    cfg = SurrogateDgpConfig(K=4, seed=0)
    params = surrogate_walk(cfg)
    est = cell_mean_structural(cfg, params, lambda x: x, draws=40000)
    np.testing.assert_allclose(est, params[:, 0] / params.sum(axis=1), atol=0.01)


@pytest.mark.parametrize("kw", [dict(sigma_u=0), dict(bounds=(3, 1)), dict(K=0), dict(a_new=-1),
                                dict(h_star="cube")])
def test_invalid_surrogate_config(kw):
    with pytest.raises(InvalidConfig):
        SurrogateDgpConfig(**kw)


def test_config_dict_round_trip():
    cfg = SurrogateDgpConfig(K=10, bounds=(2.0, 5.0))
    assert SurrogateDgpConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfig):
        SurrogateDgpConfig.from_dict({"K": 3, "colour": "red"})


def test_weak_iv_target():
    sim = simulate_weak_linear_iv(40, 5, 0.5, seed=0, target_levels="upper")
    assert sim.psi_true > 0
    assert simulate_weak_linear_iv(40, 5, 0.5, seed=0).psi_true == 0.0
    assert sim.metadata["q_norm"] == pytest.approx(2.0)
    with pytest.raises(InvalidConfig):
        simulate_weak_linear_iv(1, 5, 0.5)


def test_discrete_draws_follow_model():
    model, _ = orc.orc_a()
    s = simulate_discrete(model, 4000, seed=1)
    for k in range(model.K):
        x = s.x[s.cell_slice(k), 0]
        assert np.mean(x == 1) == pytest.approx(model.T[k, 1], abs=0.03)
    with pytest.raises(InvalidConfig):
        simulate_discrete(model, 0)
