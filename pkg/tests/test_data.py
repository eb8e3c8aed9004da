import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from wishart_sde.data import (Standardizer, TabularDataset, TimeSeriesDataset, load_csv, split,
                              split_indices, standardize, write_csv)
from wishart_sde.errors import ContractError, ParseError, SchemaError


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_time_series_interior_gap_is_interpolated(tmp_path):
    path = write(tmp_path, "t,a,b\n0,1.0,5\n1,,6\n2,3.0,7\n")
    ds = load_csv(path, time_column="t")
    npt.assert_array_equal(ds.Y[:, 0], [1.0, 2.0, 3.0])
    npt.assert_array_equal(ds.mask[:, 0], [True, False, True])
    assert ds.mask[:, 1].all() and ds.names == ["a", "b"]


def test_boundary_gaps_use_nearest_value(tmp_path):
    path = write(tmp_path, "t,a\n0,NA\n1,4\n3,6\n4,\n")
    ds = load_csv(path, time_column="t")
    npt.assert_array_equal(ds.Y[:, 0], [4.0, 4.0, 6.0, 6.0])


def test_interpolation_uses_time_spacing(tmp_path):
    path = write(tmp_path, "t,a\n0,0\n1,\n4,8\n")
    npt.assert_allclose(load_csv(path, time_column="t").Y[1, 0], 2.0)


def test_header_only_is_empty_dataset(tmp_path):
    with pytest.raises(SchemaError, match="empty"):
        load_csv(write(tmp_path, "a,b\n"), targets=["b"])
    with pytest.raises(SchemaError):
        load_csv(write(tmp_path, ""), targets=["b"])


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(ParseError) as info:
        load_csv(write(tmp_path, "a,b\n1,2\n3\n"), targets=["b"])
    assert info.value.line == 3
    with pytest.raises(ParseError) as info:
        load_csv(write(tmp_path, "a,b\n1,2\n3,x\n4,5\n"), targets=["b"])
    assert info.value.line == 3


def test_all_missing_column(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(write(tmp_path, "a,b\n1,\n2,NA\n"), targets=["b"])


def test_unknown_target_column(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        load_csv(write(tmp_path, "a,b\n1,2\n"), targets=["c"])


def test_tabular_rows_with_missing_values_dropped(tmp_path):
    with pytest.warns(UserWarning):
        ds = load_csv(write(tmp_path, "a,b,y\n1,2,3\n4,,6\n7,8,9\n"), targets=["y"])
    npt.assert_array_equal(ds.X, [[1, 2], [7, 8]])
    assert ds.feature_names == ["a", "b"] and ds.target_names == ["y"]


def test_feature_selection_and_delimiter(tmp_path):
    ds = load_csv(write(tmp_path, "a;b;y\n1;2;3\n4;5;6\n"), targets=["y"], features=["b"],
                  delimiter=";")
    npt.assert_array_equal(ds.X, [[2], [5]])


def test_non_increasing_times_rejected(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(write(tmp_path, "t,a\n0,1\n0,2\n"), time_column="t")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_round_trip_bitwise(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((7, 3)) * 10.0 ** rng.integers(-30, 30, (7, 3))
    y = rng.standard_normal((7, 1))
    ds = TabularDataset(X, y, ["a", "b", "c"], ["y"])
    path = str(tmp_path_factory.mktemp("rt") / "t.csv")
    write_csv(path, ds)
    back = load_csv(path, targets=["y"])
    assert back.X.tobytes() == X.tobytes() and back.y.tobytes() == y.tobytes()


def test_time_series_round_trip(tmp_path, rng):
    ds = TimeSeriesDataset(np.arange(5.0) * 0.37, rng.standard_normal((5, 2)), ["u", "v"])
    path = str(tmp_path / "ts.csv")
    write_csv(path, ds)
    back = load_csv(path, time_column="time")
    assert back.Y.tobytes() == ds.Y.tobytes() and back.times.tobytes() == ds.times.tobytes()


# ------------------------------------------------------------- standardize


def tabular(rng, n=50, shift=0.0):
    return TabularDataset(rng.standard_normal((n, 3)) * [1, 5, 0.1] + shift,
                          rng.standard_normal((n, 1)) * 3 + 2, ["a", "b", "c"], ["y"])


def test_standardized_train_moments(rng):
    tr, _, _ = standardize(tabular(rng, shift=100.0))
    assert np.all(np.abs(tr.X.mean(0)) <= 1e-8) and np.all(np.abs(tr.X.std(0) - 1) <= 1e-8)
    assert np.all(np.abs(tr.y.mean(0)) <= 1e-8) and np.all(np.abs(tr.y.std(0) - 1) <= 1e-8)
    assert tr.standardized


def test_standardize_inverse(rng):
    ds = tabular(rng)
    tr, _, stats = standardize(ds)
    back = stats.invert(tr)
    npt.assert_allclose(back.X, ds.X, atol=1e-12)
    npt.assert_allclose(back.y, ds.y, atol=1e-12)
    npt.assert_allclose(stats.inverse_y_var(np.ones((1, 1))), stats.y_std[None] ** 2)


def test_test_set_uses_train_statistics(rng):
    train = TabularDataset(rng.uniform(0, 1, (20, 2)), rng.uniform(0, 1, (20, 1)), ["a", "b"], ["y"])
    test = TabularDataset(rng.uniform(10, 11, (5, 2)), rng.uniform(10, 11, (5, 1)), ["a", "b"], ["y"])
    _, te, stats = standardize(train, test)
    npt.assert_allclose(te.X, (test.X - train.X.mean(0)) / train.X.std(0))
    assert np.all(te.X > 5)
    # perturbing the test set never changes the statistics
    _, _, stats2 = standardize(train, TabularDataset(test.X * 100, test.y, ["a", "b"], ["y"]))
    npt.assert_array_equal(stats.x_mean, stats2.x_mean)


def test_zero_variance_feature_dropped(rng):
    ds = TabularDataset(np.c_[rng.standard_normal(10), np.ones(10)], rng.standard_normal((10, 1)),
                        ["a", "const"], ["y"])
    with pytest.warns(UserWarning, match="const"):
        tr, _, stats = standardize(ds)
    assert tr.X.shape == (10, 1) and tr.feature_names == ["a"]
    with pytest.raises(ContractError):
        stats.invert(tr)


def test_time_series_standardizer_round_trip(rng):
    ds = TimeSeriesDataset(np.arange(6.0), rng.standard_normal((6, 2)) * 4 + 1, ["u", "v"])
    stats = Standardizer.fit(ds)
    st_ds = stats.apply(ds)
    npt.assert_allclose(st_ds.Y.mean(0), 0, atol=1e-12)
    restored = Standardizer.from_arrays(stats.arrays())
    npt.assert_allclose(restored.invert(st_ds).Y, ds.Y, atol=1e-12)


def test_constant_target_left_unscaled(rng):
    ds = TimeSeriesDataset(np.arange(4.0), np.c_[np.ones(4), rng.standard_normal(4)], ["c", "v"])
    with pytest.warns(UserWarning):
        stats = Standardizer.fit(ds)
    assert stats.y_std[0] == 1.0


# ------------------------------------------------------------------- split


def test_split_sizes(rng):
    tr, te = split(tabular(rng, n=10), 0.9, seed=0)
    assert (len(tr), len(te)) == (9, 1)


def test_split_deterministic_partition():
    a_tr, a_te = split_indices(37, 0.8, seed=4)
    b_tr, b_te = split_indices(37, 0.8, seed=4)
    npt.assert_array_equal(a_tr, b_tr)
    assert set(a_tr) | set(a_te) == set(range(37)) and not set(a_tr) & set(a_te)
    assert not np.array_equal(split_indices(37, 0.8, seed=5)[0], a_tr)


def test_split_degenerate(rng):
    with pytest.raises(ContractError):
        split(tabular(rng, n=10), 1.0)
    with pytest.raises(ContractError):
        split(tabular(rng, n=2), 0.9)
