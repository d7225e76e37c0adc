import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from npjive.grouped import (EmptyFile, GroupedSample, MissingColumn, NonNumericValue, assign_folds,
                            cell_rng, load_csv, vfold_labels)

from conftest import random_sample


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_relabels_in_order_of_first_appearance(tmp_path):
    p = _write(tmp_path, "z,x1,y\n7,0.5,1\n3,1.5,2\n7,2.5,3\n")
    s = load_csv(p)
    assert s.K == 2
    assert s.label_map == {7: 1, 3: 2}
    np.testing.assert_array_equal(s.n, [2, 1])
    np.testing.assert_array_equal(s.original_labels(), [7, 7, 3])


def test_load_multicolumn_treatments_sorted_numerically(tmp_path):
    p = _write(tmp_path, "y,x10,x2,z\n1,10,2,1\n2,20,4,1\n")
    s = load_csv(p)
    assert s.d == 2
    np.testing.assert_array_equal(s.x[:, 0], [2, 4])


@pytest.mark.parametrize("text,exc", [
    ("", EmptyFile),
    ("z,x1,y\n", EmptyFile),
    ("z,y\n1,2\n", MissingColumn),
    ("z,x1,y\n1,abc,2\n", NonNumericValue),
    ("z,x1,y\n1,1,nan\n", NonNumericValue),
    ("z,x1,y\n1.5,1,2\n", NonNumericValue),
])
def test_load_rejects_bad_files(tmp_path, text, exc):
    with pytest.raises(exc):
        load_csv(_write(tmp_path, text))


def test_bad_value_error_names_row_and_column(tmp_path):
    with pytest.raises(NonNumericValue, match="x1.*row 2"):
        load_csv(_write(tmp_path, "z,x1,y\n1,1,1\n1,oops,1\n"))


def test_csv_round_trip(tmp_path, rng):
    s = random_sample(rng, d=2)
    s.to_csv(tmp_path / "s.csv")
    t = load_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(t.x, s.x)
    np.testing.assert_array_equal(t.y, s.y)
    np.testing.assert_array_equal(t.n, s.n)


def test_units_sorted_by_cell():
    s = GroupedSample([3.0, 1.0, 2.0], [30.0, 10.0, 20.0], [1, 0, 1], 2, fold=[1, 0, 0])
    np.testing.assert_array_equal(s.cell, [0, 1, 1])
    np.testing.assert_array_equal(s.y, [10, 30, 20])
    np.testing.assert_array_equal(s.fold, [0, 1, 0])


def test_arrays_are_read_only(rng):
    s = random_sample(rng)
    with pytest.raises(ValueError):
        s.y[0] = 1.0


@pytest.mark.parametrize("kw", [dict(cell=[0, 2]), dict(y=[1.0, np.inf]), dict(fold=[0, 2])])
def test_constructor_validation(kw):
    args = dict(x=[0.0, 1.0], y=[1.0, 2.0], cell=[0, 1], K=2)
    args.update(kw)
    with pytest.raises(ValueError):
        GroupedSample(**args)


def test_empty_cell_rejected():
    with pytest.raises(ValueError):
        GroupedSample([0.0], [1.0], [0], 2)


@given(st.integers(0, 2**32), st.lists(st.integers(1, 9), min_size=1, max_size=15))
def test_two_fold_balance(seed, counts):
    K = len(counts)
    cell = np.repeat(np.arange(K), counts)
    s = GroupedSample(np.zeros(len(cell)), np.zeros(len(cell)), cell, K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = assign_folds(s, seed)
    n1 = np.bincount(f.cell, weights=f.fold, minlength=K)
    n0 = f.n - n1
    assert np.all(np.abs(n0 - n1) <= 1)
    np.testing.assert_array_equal(f.estimable, f.n >= 2)


def test_fold_assignment_is_deterministic_and_seed_dependent(rng):
    s = random_sample(rng, K=30, n_lo=4, n_hi=8)
    a = assign_folds(s, 1).fold
    np.testing.assert_array_equal(a, assign_folds(s, 1).fold)
    assert not np.array_equal(a, assign_folds(s, 2).fold)


def test_singleton_cells_warn(rng):
    s = GroupedSample([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], [0, 0, 1], 2)
    with pytest.warns(UserWarning, match="not estimable"):
        f = assign_folds(s, 0)
    np.testing.assert_array_equal(f.estimable, [True, False])


def test_leave_one_out_scheme(rng):
    s = assign_folds(random_sample(rng, n_lo=2), 0, "leave_one_out")
    assert s.scheme == "leave_one_out" and not s.fold.any()
    with pytest.raises(ValueError):
        assign_folds(s, 0, "three_fold")


def test_subset_relabels_cells(rng):
    s = random_sample(rng, K=5, n_lo=2, n_hi=2)
    t = s.subset(s.cell != 2)
    assert t.K == 4 and t.N == 8


@given(st.integers(2, 6), st.integers(0, 1000))
def test_vfold_labels_balanced(V, seed):
    s = random_sample(np.random.default_rng(seed), K=6, n_lo=1, n_hi=13)
    lab = vfold_labels(s, V, seed)
    for k in range(s.K):
        c = np.bincount(lab[s.cell_slice(k)], minlength=V)
        assert c.max() - c.min() <= 1


def test_cell_rng_streams_are_keyed():
    a = cell_rng(5, 1).random(3)
    np.testing.assert_array_equal(a, cell_rng(5, 1).random(3))
    assert not np.allclose(a, cell_rng(5, 2).random(3))
