import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consensusjm.data import (DataValidationError, JointDataset, Subject, SurvivalRecord,
                              load_dataset, materialize, partition, write_dataset)


def _write(tmp_path, long_text, surv_text):
    lp, sp = tmp_path / "long.csv", tmp_path / "surv.csv"
    lp.write_text(long_text)
    sp.write_text(surv_text)
    return lp, sp


def _toy(n):
    subs = [Subject(str(i), [0.0, 1.0], [1.0, 2.0], SurvivalRecord(str(i), 2.0, 1, {"sex": 0.0, "age": 40.0}))
            for i in range(n)]
    return JointDataset(tuple(subs))


def test_load_two_subjects(tmp_path):
    lp, sp = _write(tmp_path,
                    "id,time,y\nA,0,1.0\nA,1.5,2.0\nA,0.5,1.2\nB,0,3.0\nB,2,2.5\n",
                    "id,time,event,sex,age\nA,4.0,1,0,50\nB,3.0,0,1,40\n")
    ds = load_dataset(lp, sp)
    assert len(ds) == 2
    assert ds.n_records == 5
    a = ds.subjects[0]
    assert list(a.times) == [0.0, 0.5, 1.5]  # sorted by time
    assert list(a.values) == [1.0, 1.2, 2.0]
    assert ds.subjects[1].survival.event == 0


def test_missing_event_column_names_it(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nA,0,1\n", "id,time,sex\nA,4.0,1\n")
    with pytest.raises(DataValidationError, match="event"):
        load_dataset(lp, sp)


def test_time_beyond_observed_time_names_subject(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nA,5.0,1\n", "id,time,event\nA,4.0,1\n")
    with pytest.raises(DataValidationError, match="'A'"):
        load_dataset(lp, sp)


def test_non_numeric_field(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nA,0,abc\n", "id,time,event\nA,4.0,1\n")
    with pytest.raises(DataValidationError, match="not numeric"):
        load_dataset(lp, sp)


def test_unknown_subject_in_longitudinal(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nZ,0,1\n", "id,time,event\nA,4.0,1\n")
    with pytest.raises(DataValidationError, match="'Z'"):
        load_dataset(lp, sp)


def test_extra_field_in_row(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nA,0,1,7\n", "id,time,event\nA,4.0,1\n")
    with pytest.raises(DataValidationError):
        load_dataset(lp, sp)


def test_bad_event_value(tmp_path):
    lp, sp = _write(tmp_path, "id,time,y\nA,0,1\n", "id,time,event\nA,4.0,2\n")
    with pytest.raises(DataValidationError, match="event"):
        load_dataset(lp, sp)


def test_write_load_roundtrip(tmp_path, small_data):
    write_dataset(small_data, tmp_path)
    back = load_dataset(tmp_path / "longitudinal.csv", tmp_path / "survival.csv")
    assert back.ids == small_data.ids
    for a, b in zip(back, small_data):
        assert list(a.times) == list(b.times) and list(a.values) == list(b.values)
        assert a.survival == b.survival


def test_partition_identity_for_one_split():
    ds = _toy(7)
    p = partition(ds, 1, 3)
    assert p.members(0) == ds.ids
    assert materialize(ds, p, 0).ids == ds.ids


def test_partition_ten_into_two():
    ds = _toy(10)
    p = partition(ds, 2, 123)
    a, b = set(p.members(0)), set(p.members(1))
    assert len(a) == len(b) == 5
    assert not a & b and a | b == set(ds.ids)


def test_partition_errors():
    ds = _toy(5)
    with pytest.raises(ValueError, match="more splits than subjects"):
        partition(ds, 10, 0)
    with pytest.raises(ValueError):
        partition(ds, 0, 0)


def test_materialize_range_error():
    ds = _toy(4)
    p = partition(ds, 2, 0)
    with pytest.raises(IndexError):
        materialize(ds, p, 2)


def test_materialize_law():
    ds = _toy(10)
    p = partition(ds, 2, 9)
    s0, s1 = materialize(ds, p, 0), materialize(ds, p, 1)
    assert set(s0.ids) | set(s1.ids) == set(ds.ids)
    assert not set(s0.ids) & set(s1.ids)
    for sub in (s0, s1):
        for s in sub:
            assert s is ds.subjects[ds.ids.index(s.id)]  # records untouched


def test_partition_csv(tmp_path):
    ds = _toy(6)
    p = partition(ds, 3, 1)
    text = p.write_csv(tmp_path / "partition.csv").read_text().splitlines()
    assert text[0] == "id,subsample"
    assert len(text) == 7


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.data())
def test_partition_properties(n, data):
    ds = _toy(n)
    S = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 2 ** 63 - 1))
    p = partition(ds, S, seed)
    groups = [set(p.members(s)) for s in range(S)]
    assert set().union(*groups) == set(ds.ids)
    assert sum(len(g) for g in groups) == n
    sizes = p.sizes()
    assert max(sizes) - min(sizes) <= 1
    assert partition(ds, S, seed).assignments == p.assignments
