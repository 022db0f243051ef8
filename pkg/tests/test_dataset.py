import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcap.dataset import (
    DataError,
    DataMatrix,
    MeanShiftSpec,
    ParseError,
    Partition,
    ShapeError,
    apply_mean_shift,
    center_groups,
    group_sign_vectors,
    load_csv,
    load_labels,
    rank_transform_to_normality,
    save_csv,
    save_labels,
    subsample,
)

# Phi^-1(1/6) from statistics.NormalDist, frozen
Q_ONE_SIXTH = -0.9674215661017008


def test_load_csv_basic(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("1,2\n3,4\n5,6\n")
    X = load_csv(f)
    np.testing.assert_array_equal(X.values, [[1, 2], [3, 4], [5, 6]])
    assert X.shape == (3, 2)


def test_load_csv_header(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("g1,g2\n1,2\n")
    X = load_csv(f, has_header=True)
    assert X.col_ids == ("g1", "g2")


def test_load_csv_empty_is_shape_error(tmp_path):
    f = tmp_path / "e.csv"
    f.write_text("")
    with pytest.raises(ShapeError):
        load_csv(f)


def test_load_csv_nan_names_cell(tmp_path):
    f = tmp_path / "n.csv"
    f.write_text("1,2\n3,NaN\n")
    with pytest.raises(ParseError) as err:
        load_csv(f)
    assert err.value.row == 2 and err.value.col == 2
    assert "row 2" in str(err.value) and "col 2" in str(err.value)


def test_load_csv_non_numeric_and_ragged(tmp_path):
    f = tmp_path / "x.csv"
    f.write_text("1,abc\n")
    with pytest.raises(ParseError):
        load_csv(f)
    g = tmp_path / "r.csv"
    g.write_text("1,2\n3\n")
    with pytest.raises(ShapeError):
        load_csv(g)


def test_csv_roundtrip_exact(tmp_path):
    X = DataMatrix(np.random.default_rng(0).standard_normal((4, 3)))
    save_csv(X, tmp_path / "x.csv")
    Y = load_csv(tmp_path / "x.csv", has_header=True)
    np.testing.assert_array_equal(X.values, Y.values)


def test_labels_roundtrip(tmp_path):
    save_labels([1, 2, 2, 1], tmp_path / "l.txt")
    P = load_labels(tmp_path / "l.txt")
    np.testing.assert_array_equal(P.labels, [1, 2, 2, 1])
    assert P.k == 2


def test_datamatrix_invariants():
    with pytest.raises(ParseError):
        DataMatrix(np.array([[1.0, np.inf]]))
    with pytest.raises(DataError):
        DataMatrix(np.zeros((2, 2)), row_ids=("a", "a"))
    with pytest.raises(ShapeError):
        DataMatrix(np.zeros((0, 2)))


def test_partition_validation():
    with pytest.raises(DataError):
        Partition(np.array([0, 1]))
    with pytest.raises(DataError):
        Partition(np.array([1, 3]), k=2)
    P = Partition.from_zero_based([0, 1, 1])
    np.testing.assert_array_equal(P.labels, [1, 2, 2])
    np.testing.assert_array_equal(P.sizes(), [1, 2])


def test_rank_transform_three_values():
    X = DataMatrix(np.array([[10.0], [20.0], [30.0]]))
    out = rank_transform_to_normality(X).values.ravel()
    np.testing.assert_allclose(out, [Q_ONE_SIXTH, 0.0, -Q_ONE_SIXTH], atol=1e-12)


def test_rank_transform_matches_stdlib_quantile():
    # dual route: stdlib inverse normal CDF on the same plotting positions
    rng = np.random.default_rng(1)
    X = DataMatrix(rng.standard_normal((37, 3)))
    out = rank_transform_to_normality(X).values
    nd = statistics.NormalDist()
    for j in range(3):
        ranks = np.argsort(np.argsort(X.values[:, j])) + 1
        ref = [nd.inv_cdf((r - 0.5) / 37) for r in ranks]
        np.testing.assert_allclose(out[:, j], ref, atol=1e-9)


def test_rank_transform_constant_column():
    out = rank_transform_to_normality(DataMatrix(np.full((3, 1), 5.0))).values
    np.testing.assert_array_equal(out, 0.0)


def test_rank_transform_preserves_order_sorted():
    out = rank_transform_to_normality(DataMatrix(np.arange(6.0)[:, None])).values.ravel()
    assert np.all(np.diff(out) > 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, (12, 2), elements=st.integers(-100, 100)))
def test_rank_transform_monotone_invariance(a):
    a = a.astype(np.float64)
    X = DataMatrix(a)
    Y = DataMatrix(a ** 3 + 5.0 * a - 7.0)  # strictly increasing and exact on integers
    np.testing.assert_allclose(rank_transform_to_normality(X).values, rank_transform_to_normality(Y).values,
                               atol=1e-12)


def test_center_groups_examples():
    one = center_groups(DataMatrix(np.array([[1.0], [2.0], [3.0]])), Partition(np.array([1, 1, 1])))
    np.testing.assert_allclose(one.values.ravel(), [-1, 0, 1])
    two = center_groups(DataMatrix(np.array([[1.0, 2.0], [3.0, 5.0]])), Partition(np.array([1, 2])))
    np.testing.assert_array_equal(two.values, 0.0)


def test_center_groups_means_vanish():
    rng = np.random.default_rng(2)
    X = DataMatrix(rng.normal(5, 3, size=(50, 7)))
    P = Partition(rng.integers(1, 4, size=50), k=3)
    C = center_groups(X, P).values
    for g in range(1, 4):
        assert np.abs(C[P.labels == g].mean(axis=0)).max() <= 1e-12


def test_center_groups_empty_group():
    with pytest.raises(DataError):
        center_groups(DataMatrix(np.ones((2, 1))), Partition(np.array([1, 1]), k=2))


def test_mean_shift_zero_and_determinism():
    rng = np.random.default_rng(3)
    X = DataMatrix(rng.standard_normal((6, 4)))
    P = Partition(np.array([1, 1, 1, 2, 2, 2]))
    np.testing.assert_array_equal(apply_mean_shift(X, P, MeanShiftSpec(0.0)).values, X.values)
    a = apply_mean_shift(X, P, MeanShiftSpec(1.5, seed=9)).values
    b = apply_mean_shift(X, P, MeanShiftSpec(1.5, seed=9)).values
    np.testing.assert_array_equal(a, b)


def test_mean_shift_definition_and_inverse():
    X = DataMatrix(np.zeros((4, 3)))
    P = Partition(np.array([1, 1, 2, 2]))
    out = apply_mean_shift(X, P, MeanShiftSpec(1.0, seed=4)).values
    s = group_sign_vectors(3, [2], 4)[2]
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_array_equal(out[2:], np.tile(s, (2, 1)))
    # subtracting d * s_k recovers the input (exact up to one rounding per entry)
    Y = DataMatrix(np.random.default_rng(5).standard_normal((4, 3)))
    shifted = apply_mean_shift(Y, P, MeanShiftSpec(0.7, seed=4)).values
    shifted[2:] -= 0.7 * s
    np.testing.assert_allclose(shifted, Y.values, rtol=0, atol=4 * np.finfo(float).eps)


def test_mean_shift_center_group_untouched():
    X = DataMatrix(np.zeros((3, 5)))
    P = Partition(np.array([1, 2, 3]))
    out = apply_mean_shift(X, P, MeanShiftSpec(2.0, center_group=2, seed=0)).values
    np.testing.assert_array_equal(out[1], 0.0)
    assert np.all(np.abs(out[[0, 2]]) == 2.0)


def test_mean_shift_negative_d():
    with pytest.raises(ValueError):
        MeanShiftSpec(-1.0)


def test_subsample():
    X = DataMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(subsample(X, [0, 1], [0, 1]).values, X.values)
    # rows {2}, cols {1} in 1-based terms
    np.testing.assert_array_equal(subsample(X, [1], [0]).values, [[3.0]])
    with pytest.raises(ShapeError):
        subsample(X, [])
    with pytest.raises(IndexError):
        subsample(X, [2])
    with pytest.raises(DataError):
        subsample(X, [0, 0])
