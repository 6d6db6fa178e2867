import numpy as np
import pandas as pd
import pytest

from ipdhet.data import COLUMNS, IpdDataset, validate_dataset


def toy_dataset():
    # Two trials, two participants each, two visits.
    return IpdDataset(
        trial=[1, 1, 1, 1, 2, 2, 2, 2],
        id=[0, 0, 1, 1, 2, 2, 3, 3],
        t=[0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5],
        a=[0, 0, 1, 1, 0, 0, 1, 1],
        z=[1, 1, 1, 1, 0, 0, 0, 0],
        y=[0.11, 0.25, -0.4, 1.0, 2.0, 2.5, 0.0, -0.77],
        y0=[0.11, 0.11, -0.4, -0.4, 2.0, 2.0, 0.0, 0.0],
    )


def test_basic_properties():
    ds = toy_dataset()
    assert len(ds) == 8
    assert ds.n_trials == 2
    np.testing.assert_array_equal(ds.trial_ids, [1, 2])
    assert ds.final_time == 0.5
    assert ds.trial.dtype == np.int64
    assert ds.y.dtype == np.float64


def test_subset_and_filters():
    ds = toy_dataset()
    final = ds.at_time(0.5)
    assert len(final) == 4
    assert np.all(final.t == 0.5)
    t2 = ds.for_trial(2)
    assert len(t2) == 4
    assert np.all(t2.trial == 2)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        IpdDataset(trial=[1, 1], id=[0, 0], t=[0.0, 0.5], a=[0, 0], z=[0, 0],
                   y=[1.0, 2.0], y0=[1.0])


def test_frame_round_trip():
    ds = toy_dataset()
    frame = ds.to_frame()
    assert list(frame.columns) == list(COLUMNS)
    back = IpdDataset.from_frame(frame)
    assert ds.equals(back)


def test_from_frame_missing_column():
    frame = toy_dataset().to_frame().drop(columns=["y0"])
    with pytest.raises(ValueError):
        IpdDataset.from_frame(frame)


def test_csv_round_trip_is_exact(tmp_path):
    ds = toy_dataset()
    path = tmp_path / "ds.csv"
    ds.to_csv(path)
    back = IpdDataset.from_csv(path)
    assert ds.equals(back)
    # outcome columns are written with two decimals
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert "0.11" in lines[1]


def test_validate_accepts_good_data():
    validate_dataset(toy_dataset())


def test_validate_rejects_nonbinary_arm():
    ds = toy_dataset()
    bad = IpdDataset(trial=ds.trial, id=ds.id, t=ds.t, a=ds.a + 1, z=ds.z,
                     y=ds.y, y0=ds.y0)
    with pytest.raises(ValueError):
        validate_dataset(bad)


def test_validate_rejects_nonfinite_outcome():
    ds = toy_dataset()
    y = ds.y.copy()
    y[3] = np.nan
    bad = IpdDataset(trial=ds.trial, id=ds.id, t=ds.t, a=ds.a, z=ds.z, y=y, y0=ds.y0)
    with pytest.raises(ValueError):
        validate_dataset(bad)


def test_validate_rejects_changing_arm_within_participant():
    ds = toy_dataset()
    a = ds.a.copy()
    a[1] = 1 - a[1]
    bad = IpdDataset(trial=ds.trial, id=ds.id, t=ds.t, a=a, z=ds.z, y=ds.y, y0=ds.y0)
    with pytest.raises(ValueError):
        validate_dataset(bad)


def test_validate_rejects_participant_in_two_trials():
    ds = toy_dataset()
    trial = ds.trial.copy()
    trial[1] = 2
    bad = IpdDataset(trial=trial, id=ds.id, t=ds.t, a=ds.a, z=ds.z, y=ds.y, y0=ds.y0)
    with pytest.raises(ValueError):
        validate_dataset(bad)


def test_generated_data_round_trips_through_csv(tmp_path, sc3_data):
    path = tmp_path / "gen.csv"
    sc3_data.to_csv(path)
    back = IpdDataset.from_csv(path)
    assert sc3_data.equals(back)
