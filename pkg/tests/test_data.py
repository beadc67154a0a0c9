import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from primalfix import catalog
from primalfix.data import (
    ColumnKind,
    DataError,
    Dataset,
    DesignSpec,
    basis_width,
    design_matrix,
    expand_basis,
    load_csv,
    validate_query,
    write_csv,
)


def _small():
    rng = np.random.default_rng(0)
    n = 50
    return Dataset.from_vertices(
        {"X": rng.normal(size=n), "A": rng.integers(0, 2, n), "Y": rng.normal(size=n)},
        binary=["A"],
    )


def test_from_vertices_binds_multicolumn_vertex():
    ds = Dataset.from_vertices({"M": np.zeros((4, 2)), "A": [0, 1, 0, 1]}, binary=["A"])
    assert ds.binding["M"] == ("M1", "M2")
    assert ds.arity("M") == 2
    assert ds.vertex("M").shape == (4, 2)
    assert ds.is_binary("A") and not ds.is_binary("M")


def test_dataset_rejects_ragged_columns():
    with pytest.raises(DataError, match="different lengths"):
        Dataset({"a": [1.0, 2.0], "b": [1.0]}, {"V": ("a", "b")})


def test_dataset_rejects_missing_values():
    with pytest.raises(DataError, match="non-finite"):
        Dataset({"a": [1.0, np.nan]}, {"V": ("a",)})


def test_dataset_rejects_binary_violation():
    with pytest.raises(DataError, match="binary violation"):
        Dataset({"a": [0.0, 2.0]}, {"A": ("a",)}, {"a": ColumnKind.BINARY})


def test_matrix_override_sets_constant():
    ds = _small()
    m = ds.matrix(["X", "A"], {"A": 1})
    assert np.all(m[:, 1] == 1.0)
    np.testing.assert_array_equal(m[:, 0], ds.scalar("X"))


def test_csv_round_trip_is_exact(tmp_path):
    ds = _small()
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, {"X": ["X"], "A": ["A"], "Y": ["Y"]}, {"A": "binary"})
    for c in ("X", "A", "Y"):
        np.testing.assert_array_equal(back.columns[c], ds.columns[c])
    assert back.is_binary("A")


def test_csv_reports_missing_column_and_bad_cell(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("X,A\n1.0,0\n2.0,oops\n")
    with pytest.raises(DataError, match="missing column 'Y'"):
        load_csv(path, {"Y": ["Y"]})
    with pytest.raises(DataError, match="non-numeric cell 'oops'.*line 3"):
        load_csv(path, {"X": ["X"], "A": ["A"]})
    path.write_text("X\n1.0\nNA\n")
    with pytest.raises(DataError, match="missing value"):
        load_csv(path, {"X": ["X"]})


def test_validate_query_flags_degenerate_arm_and_arity():
    ds = Dataset.from_vertices({"X": np.zeros(5), "A": np.ones(5), "Y": np.zeros(5)}, binary=["A"])
    kinds = {d.code for d in validate_query(ds, catalog.back_door(), "A", "Y")}
    assert "degenerate treatment arm" in kinds
    g = catalog.mediators_treatment_outcome_confounded()
    kinds = {d.code for d in validate_query(ds, g, "A", "Y")}
    assert "missing vertex" in kinds


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 5), degree=st.integers(1, 3), basis=st.sampled_from(["main_terms", "interactions", "polynomial"]))
def test_basis_width_matches_expansion(k, degree, basis):
    x = np.random.default_rng(k).normal(size=(7, k))
    assert expand_basis(x, basis, degree).shape == (7, basis_width(k, basis, degree))


def test_polynomial_skips_squared_binary_columns():
    x = np.column_stack([np.array([0, 1, 1, 0.0]), np.arange(4.0)])
    d = expand_basis(x, "polynomial", 2, intercept=False, binary=[True, False])
    # a, z, a*z, z^2 (no a^2)
    assert d.shape[1] == 4


def test_design_matrix_unknown_predictor():
    with pytest.raises(DataError, match="not in the dataset"):
        design_matrix(_small(), DesignSpec(("Z",)))


def test_design_spec_rejects_unknown_basis():
    with pytest.raises(DataError, match="unknown basis"):
        DesignSpec(("X",), basis="splines")
