import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bifa.data import MultiStudyDataset, PreprocessSpec, load_dataset, preprocess, save_dataset
from bifa.errors import DimensionError, ParseError, SchemaError


def _write(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return path


def test_load_two_studies(tmp_path):
    a = _write(tmp_path / "a.csv", ["x", "y"], [[1, 2], [3, 4], [5, 6]])
    b = _write(tmp_path / "b.csv", ["x", "y"], [[1.5, 2], [3, 4.25], [5, 6]])
    ds = load_dataset([a, b])
    assert (ds.S, ds.P, ds.N) == (2, 2, (3, 3))
    assert ds.variable_names == ("x", "y")
    assert ds.studies[1][1, 1] == 4.25


def test_mismatched_headers_rejected(tmp_path):
    a = _write(tmp_path / "a.csv", ["a", "b"], [[1, 2], [3, 4]])
    b = _write(tmp_path / "b.csv", ["b", "a"], [[1, 2], [3, 4]])
    with pytest.raises(SchemaError, match="b.csv"):
        load_dataset([a, b])


def test_non_numeric_cell_reports_position(tmp_path):
    a = _write(tmp_path / "a.csv", ["a", "b"], [[1, 2], [3, "x"]])
    with pytest.raises(ParseError, match="row 2.*'b'"):
        load_dataset([a])


def test_decimal_comma_is_not_a_number(tmp_path):
    a = _write(tmp_path / "a.csv", ["a"], [["1,5"], ["2"]])
    with pytest.raises((ParseError, SchemaError)):
        load_dataset([a])


def test_empty_file_is_dimension_error(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DimensionError):
        load_dataset([p])


def test_nutrition_shaped_collection(tmp_path, rng):
    sizes = (1364, 1517, 2210, 5184, 2478, 959)
    studies = [rng.normal(size=(n, 42)) for n in sizes]
    ds = MultiStudyDataset(tuple(studies), tuple(f"n{j}" for j in range(42)), ())
    paths = save_dataset(ds, tmp_path)
    back = load_dataset(paths)
    assert back.S == 6 and back.N == sizes and back.P == 42


def test_round_trip_exact(tmp_path, rng):
    ds = MultiStudyDataset((rng.normal(size=(5, 3)) * 1e3, rng.normal(size=(4, 3)) * 1e-7), (), ())
    back = load_dataset(save_dataset(ds, tmp_path))
    for a, b in zip(ds.studies, back.studies):
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.abs(a).max())


def test_invariants_enforced():
    with pytest.raises(DimensionError):
        MultiStudyDataset((np.ones((1, 2)),), (), ())
    with pytest.raises(DimensionError):
        MultiStudyDataset((np.ones((3, 2)), np.ones((3, 3))), (), ())
    with pytest.raises(DimensionError):
        MultiStudyDataset((np.array([[1.0, np.nan], [1, 2]]),), (), ())
    with pytest.raises(DimensionError):
        MultiStudyDataset((np.ones((3, 2)),), (), (), covariates=(np.ones((2, 1)),))


def test_center_only():
    ds = MultiStudyDataset((np.array([[1.0], [2.0], [3.0]]),), (), ())
    out = preprocess(ds, PreprocessSpec(center=True))
    np.testing.assert_allclose(out.studies[0][:, 0], [-1, 0, 1], atol=1e-15)


def test_center_and_scale_unit_sd_column():
    ds = MultiStudyDataset((np.array([[1.0], [2.0], [3.0]]),), (), ())
    out = preprocess(ds, PreprocessSpec(center=True, scale=True))
    np.testing.assert_allclose(out.studies[0][:, 0], [-1, 0, 1], atol=1e-15)


def test_constant_column_warns_and_centers():
    ds = MultiStudyDataset((np.array([[5.0, 1], [5.0, 2], [5.0, 4]]),), ("c", "v"), ())
    out = preprocess(ds, PreprocessSpec(center=True, scale=True))
    np.testing.assert_array_equal(out.studies[0][:, 0], 0.0)
    assert any("c" in w for w in out.warnings)


def test_scale_requires_center():
    with pytest.raises(ValueError):
        PreprocessSpec(center=False, scale=True)


def test_log_offset():
    ds = MultiStudyDataset((np.array([[0.0], [np.e - 1]]),), (), ())
    out = preprocess(ds, PreprocessSpec(center=False, log_offset=1.0))
    np.testing.assert_allclose(out.studies[0][:, 0], [0.0, 1.0])


def test_reordered_moves_study_first():
    ds = MultiStudyDataset((np.zeros((2, 1)), np.ones((2, 1)), 2 * np.ones((2, 1))), (), ("a", "b", "c"))
    r = ds.reordered("c")
    assert r.study_names == ("c", "a", "b")
    assert r.studies[0][0, 0] == 2
    with pytest.raises(SchemaError):
        ds.reordered("zz")


matrices = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@settings(max_examples=60, deadline=None)
@given(matrices, st.booleans())
def test_preprocess_properties(y, scale):
    ds = MultiStudyDataset((y,), (), ())
    spec = PreprocessSpec(center=True, scale=scale)
    once = preprocess(ds, spec)
    twice = preprocess(once, spec)
    z = once.studies[0]
    assert np.all(np.abs(z.mean(axis=0)) < 1e-10 * max(1.0, np.abs(y).max()))
    if scale:
        sd = z.std(axis=0, ddof=1)
        ok = (np.abs(sd - 1) < 1e-10) | (np.abs(z).max(axis=0) == 0)
        assert ok.all()
    np.testing.assert_allclose(twice.studies[0], z, atol=1e-12 * max(1.0, np.abs(y).max()))
