import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from npjive.basis import DegenerateDimension, DimensionMismatch, FeatureBasis, evaluate, gram_matrix, make_basis

finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.integers(2, 60), elements=finite), st.integers(1, 12))
def test_histogram_rows_are_indicators(x, bins):
    if np.ptp(x) == 0:
        return
    b = make_basis("histogram", bins, x)
    F = b.transform(x)
    assert F.shape[1] == b.p <= bins
    np.testing.assert_array_equal(F.sum(axis=1), 1.0)
    np.testing.assert_array_equal(np.argmax(F, axis=1), b.bin_index(x))


def test_histogram_quantile_bins_are_balanced(rng):
    x = rng.normal(size=1600)
    F = make_basis("histogram", 16, x).transform(x)
    np.testing.assert_array_equal(F.sum(axis=0), 100)


def test_out_of_range_points_clip_to_edge_bins():
    b = FeatureBasis.histogram_from_edges([0, 1, 2, 3])
    np.testing.assert_array_equal(b.bin_index([-5, 0.5, 1.5, 9]), [0, 0, 1, 2])


@pytest.mark.parametrize("kind,cfg,p", [("linear_spline", 3, 5), ("polynomial", 4, 5)])
def test_intercept_bases(kind, cfg, p, rng):
    x = rng.uniform(0, 1, 300)
    b = make_basis(kind, cfg, x)
    F = b.transform(x)
    assert b.p == p and b.has_intercept
    np.testing.assert_array_equal(F[:, 0], 1.0)
    # linear functions are represented exactly
    coef, *_ = np.linalg.lstsq(F, 2 - 3 * x, rcond=None)
    np.testing.assert_allclose(F @ coef, 2 - 3 * x, atol=1e-9)


def test_linear_spline_is_continuous():
    b = FeatureBasis("linear_spline", ((0.5,),), ((0.0, 1.0),))
    theta = np.array([1.0, 2.0, -5.0])
    eps = 1e-9
    left, right = b.transform([0.5 - eps, 0.5 + eps]) @ theta
    assert abs(left - right) < 1e-7


def test_multivariate_histogram_drops_reference_columns(rng):
    x = rng.uniform(size=(200, 2))
    b = make_basis("histogram", 4, x)
    F = b.transform(x)
    assert b.p == 4 + 3
    assert np.linalg.matrix_rank(F) == b.p


def test_degenerate_coordinate_warns_and_keeps_intercept():
    x = np.column_stack([np.ones(10), np.arange(10.0)])
    with pytest.warns(DegenerateDimension):
        b = make_basis("linear_spline", 2, x)
    assert b.degenerate == (True, False)
    assert b.p == 1 + 1 + 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c = make_basis("histogram", 3, np.ones((5, 1)))
    np.testing.assert_array_equal(c.transform(np.ones((5, 1))), 1.0)


def test_dimension_mismatch():
    b = FeatureBasis.histogram_from_edges([0, 1, 2])
    with pytest.raises(DimensionMismatch):
        b.transform(np.zeros((3, 2)))
    with pytest.raises(DimensionMismatch):
        evaluate(b, [0.1, 0.2])


def test_dict_round_trip(rng):
    b = make_basis("linear_spline", 4, rng.normal(size=50))
    c = FeatureBasis.from_dict(b.to_dict())
    x = rng.normal(size=20)
    np.testing.assert_array_equal(b.transform(x), c.transform(x))


def test_invalid_configs():
    with pytest.raises(ValueError):
        make_basis("wavelet", 3, np.arange(5.0))
    with pytest.raises(ValueError):
        make_basis("histogram", 0, np.arange(5.0))


def test_gram_matrix_symmetric_psd(rng):
    G = gram_matrix(rng.normal(size=(40, 5)))
    np.testing.assert_array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() > 0
