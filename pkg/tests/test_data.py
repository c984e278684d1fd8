import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trialcate.data import DataError, Dataset, SchemaConfig, load_dataset, select_columns, write_dataset


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _wide(rng, n=5):
    cols = {f"p{j}": rng.normal(size=n) for j in range(2)}
    cols.update({f"q{j}": rng.normal(size=n) for j in range(10)})
    return Dataset(cols, {"X1": ("p0", "p1"), "X2": tuple(f"q{j}" for j in range(10))})


def test_load_three_rows(tmp_path):
    f = _write(tmp_path / "t.csv", "x1_a,a,y\n0.5,1,2.0\n-1,0,3\n2,1,4.5\n")
    ds = load_dataset(f, SchemaConfig(X1=("x1_a",), treatment="a", outcome="y"))
    assert ds.n_rows == 3
    assert ds.role_vector("treatment").tolist() == [1.0, 0.0, 1.0]
    assert ds.role_columns("X1") == ("x1_a",)


def test_treatment_not_binary(tmp_path):
    f = _write(tmp_path / "t.csv", "x1_a,a,y\n0.5,2,2.0\n")
    with pytest.raises(DataError, match="treatment not binary"):
        load_dataset(f, SchemaConfig(X1=("x1_a",), treatment="a", outcome="y"))


def test_selection_not_binary():
    with pytest.raises(DataError, match="selection not binary"):
        Dataset({"s": np.array([0.0, 0.5])}, {"selection": ("s",)})


def test_weight_must_be_positive():
    with pytest.raises(DataError):
        Dataset({"w": np.array([1.0, 0.0])}, {"weight": ("w",)})


def test_roles_disjoint():
    with pytest.raises(DataError):
        Dataset({"u": np.zeros(2)}, {"X1": ("u",), "X2": ("u",)})


def test_column_lengths_checked():
    with pytest.raises(DataError):
        Dataset({"u": np.zeros(2), "v": np.zeros(3)}, {})


def test_missing_column(tmp_path):
    f = _write(tmp_path / "t.csv", "x1_a,a\n0.5,1\n")
    with pytest.raises(DataError, match="y"):
        load_dataset(f, SchemaConfig(X1=("x1_a",), treatment="a", outcome="y"))


def test_non_numeric_cell_reports_row(tmp_path):
    f = _write(tmp_path / "t.csv", "u\n1\nabc\n")
    with pytest.raises(DataError, match="row"):
        load_dataset(f, SchemaConfig(X1=("u",)))


def test_missing_value_rejected(tmp_path):
    f = _write(tmp_path / "t.csv", "u,v\n1,\n2,3\n")
    with pytest.raises(DataError):
        load_dataset(f, SchemaConfig(X1=("u", "v")))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.csv")


def test_headerless_positional_names(tmp_path):
    f = _write(tmp_path / "t.csv", "1;0;2\n3;1;4\n")
    ds = load_dataset(f, SchemaConfig(X1=("c0",), treatment="c1", outcome="c2", delimiter=";", header=False))
    assert ds.column("c2").tolist() == [2.0, 4.0]


def test_empty_dataset_writes_header_only(tmp_path):
    ds = Dataset({"u": np.array([]), "v": np.array([])}, {"X1": ("u",)})
    path = tmp_path / "e.csv"
    write_dataset(ds, path)
    assert path.read_text(encoding="utf-8").splitlines() == ["u,v"]
    back = load_dataset(path)
    assert back.n_rows == 0


def test_point_one_round_trip(tmp_path):
    path = tmp_path / "p.csv"
    write_dataset(Dataset({"u": np.array([0.1])}, {}), path)
    assert load_dataset(path).column("u")[0] == 0.1


def test_random_table_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    table = rng.standard_normal((100, 10)) * 10.0 ** rng.integers(-8, 8, size=(100, 10))
    names = [f"c{j}" for j in range(10)]
    ds = Dataset(dict(zip(names, table.T)), {"X1": tuple(names[:3]), "X2": tuple(names[3:])})
    path = tmp_path / "r.csv"
    write_dataset(ds, path)
    back = load_dataset(path, SchemaConfig(X1=tuple(names[:3]), X2=tuple(names[3:])))
    assert np.array_equal(back.to_matrix(names), table)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 8), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_property(tmp_path_factory, table):
    names = [f"v{j}" for j in range(table.shape[1])]
    ds = Dataset(dict(zip(names, table.T)), {})
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_dataset(ds, path)
    back = load_dataset(path)
    assert list(back.column_names) == names
    assert np.array_equal(back.to_matrix(names), table)


def test_select_columns_shapes_and_order():
    ds = _wide(np.random.default_rng(0))
    assert select_columns(ds, ["X1"]).shape == (5, 2)
    both = select_columns(ds, ["X2", "X1"])
    assert both.shape == (5, 12)
    assert np.array_equal(both[:, :2], ds.to_matrix(["p0", "p1"]))
    assert np.array_equal(both, select_columns(ds, ["X1", "X2"]))


def test_dataset_is_read_only():
    ds = _wide(np.random.default_rng(0))
    with pytest.raises(ValueError):
        ds.column("p0")[0] = 1.0


def test_subset_keeps_roles():
    ds = _wide(np.random.default_rng(1))
    sub = ds.subset(np.array([0, 2]))
    assert sub.n_rows == 2
    assert sub.role_columns("X1") == ("p0", "p1")
    assert sub.column("q3")[1] == ds.column("q3")[2]


def test_schema_rejects_overlap():
    with pytest.raises(DataError):
        SchemaConfig(X1=("u",), outcome="u")
