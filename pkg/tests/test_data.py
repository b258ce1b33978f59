import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparcc.data import (
    CompleteRecord,
    Dataset,
    ObservedRecord,
    apply_scaling,
    iter_level_masks,
    load_csv,
    write_csv,
)
from sparcc.errors import DomainError, EmptyDatasetError, ParseError, SchemaError


def _write(path, text):
    path.write_text(text)
    return path


def test_records_validate():
    with pytest.raises(DomainError):
        ObservedRecord(1.0, 0.5, 2, (0.0,))
    with pytest.raises(DomainError):
        ObservedRecord(float("inf"), 0.5, 1, (0.0,))
    assert ObservedRecord(1.0, 0.5, 1, 1.0).z == (1.0,)


def test_complete_record_from_latent():
    r = CompleteRecord.from_latent(2.0, x=0.3, c=0.2, z=(1.0,))
    assert r.w == 0.2 and r.delta == 0
    r = CompleteRecord.from_latent(2.0, x=0.3, c=0.3, z=(1.0,))
    assert r.delta == 1 and r.w == 0.3


def test_from_records_keeps_latent_columns():
    recs = [CompleteRecord.from_latent(1.0, 0.2, 0.5, 0.0), CompleteRecord.from_latent(2.0, 0.7, 0.4, 1.0)]
    ds = Dataset.from_records(recs)
    assert ds.has_x and list(ds.delta) == [1, 0]
    assert ds.records[1].w == 0.4


def test_dataset_is_read_only(data_q4):
    with pytest.raises(ValueError):
        data_q4.y[0] = 3.0


def test_dataset_needs_an_event():
    with pytest.raises(EmptyDatasetError):
        Dataset(y=[1.0, 2.0], w=[0.1, 0.2], delta=[0, 0], z=[0.0, 1.0])


def test_levels_and_masks(data_q4):
    assert data_q4.z_levels == ((0.0,), (1.0,))
    total = sum(mask.sum() for _, mask in iter_level_masks(data_q4))
    assert total == data_q4.n


def test_csv_round_trip_is_exact(tmp_path, data_q4):
    path = tmp_path / "d.csv"
    write_csv(data_q4, path, include_x=True)
    back = load_csv(path)
    for col in ("y", "w", "delta", "x"):
        np.testing.assert_array_equal(getattr(back, col), getattr(data_q4, col))
    np.testing.assert_array_equal(back.zs, data_q4.zs)


def test_csv_without_x(tmp_path):
    p = _write(tmp_path / "a.csv", "y,w,delta,z\n1.5,0.2,1,0\n2.5,0.4,0,1\n")
    ds = load_csv(p)
    assert ds.n == 2 and not ds.has_x and ds.x is None


def test_csv_schema_mapping(tmp_path):
    p = _write(tmp_path / "a.csv", "out,obs,ind,grp\n1.5,0.2,1,0\n")
    ds = load_csv(p, schema={"y": "out", "w": "obs", "delta": "ind", "z": "grp"})
    assert ds.y[0] == 1.5


def test_csv_missing_column(tmp_path):
    p = _write(tmp_path / "a.csv", "y,w,z\n1,0.2,0\n")
    with pytest.raises(SchemaError, match="delta"):
        load_csv(p)


def test_csv_parse_error_names_row(tmp_path):
    p = _write(tmp_path / "a.csv", "y,w,delta,z\n1,0.2,1,0\n1,abc,1,0\n")
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.row == 2 and "row 2" in str(info.value)


def test_csv_bad_delta(tmp_path):
    p = _write(tmp_path / "a.csv", "y,w,delta,z\n1,0.2,2,0\n")
    with pytest.raises(ParseError):
        load_csv(p)


def test_csv_empty(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_csv(_write(tmp_path / "a.csv", ""))
    with pytest.raises(EmptyDatasetError):
        load_csv(_write(tmp_path / "b.csv", "y,w,delta,z\n"))


def test_scaling_is_idempotent_and_from_raw():
    ds = Dataset(y=[1.0, 2.0, 3.0], w=[2.0, 4.0, 10.0], delta=[1, 0, 1], z=[0.0, 1.0, 0.0],
                 x=[2.0, 5.0, 10.0])
    s1 = apply_scaling(ds, 0.05)
    assert s1.scale_factor == pytest.approx(10.5)
    assert s1.w.max() == pytest.approx(1 / 1.05)
    assert apply_scaling(s1, 0.05) is s1
    s2 = apply_scaling(s1, 0.1)
    np.testing.assert_allclose(s2.w, ds.w / 11.0)
    np.testing.assert_allclose(s2.x, ds.x / 11.0)
    with pytest.raises(DomainError):
        apply_scaling(ds, -0.1)


def test_scaling_rejects_nonpositive_w():
    ds = Dataset(y=[1.0, 2.0], w=[0.0, 4.0], delta=[1, 1], z=[0.0, 1.0])
    with pytest.raises(DomainError):
        apply_scaling(ds)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(1e-6, 1e3), st.integers(0, 1),
                          st.sampled_from([0.0, 1.0])), min_size=1, max_size=20))
def test_csv_round_trip_property(tmp_path_factory, rows):
    rows[0] = (rows[0][0], rows[0][1], 1, rows[0][3])
    y, w, d, z = map(list, zip(*rows))
    ds = Dataset(y=y, w=w, delta=d, z=z)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.w, ds.w)
    np.testing.assert_array_equal(back.delta, ds.delta)
