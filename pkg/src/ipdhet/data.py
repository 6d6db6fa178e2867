"""Participant-level dataset container and CSV serialisation.

A dataset is long-format: one row per participant-visit, sorted by
(trial, participant, visit time).  Outcomes are stored on the same 0.01
grid they are written with, so a CSV round trip is bit-exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

COLUMNS = ("trial", "id", "t", "a", "z", "y", "y0")


@dataclass
class IpdDataset:
    """Long-format individual participant data.

    Attributes
    ----------
    trial : int array
        1-based trial identifier.
    id : int array
        Participant identifier, unique across trials.
    t : float array
        Visit time in years; 0 is baseline.
    a : int array
        Treatment arm indicator (1 = active).
    z : int array
        Subgroup indicator.
    y : float array
        Outcome at the visit.
    y0 : float array
        Baseline outcome, repeated on every row of a participant.
    """

    trial: np.ndarray
    id: np.ndarray
    t: np.ndarray
    a: np.ndarray
    z: np.ndarray
    y: np.ndarray
    y0: np.ndarray

    def __post_init__(self) -> None:
        self.trial = np.asarray(self.trial, dtype=np.int64)
        self.id = np.asarray(self.id, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=float)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        self.y0 = np.asarray(self.y0, dtype=float)
        n = len(self.trial)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ValueError(f"column {f.name!r} has length {len(getattr(self, f.name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.trial)

    @property
    def trial_ids(self) -> np.ndarray:
        return np.unique(self.trial)

    @property
    def n_trials(self) -> int:
        return len(self.trial_ids)

    @property
    def final_time(self) -> float:
        return float(self.t.max())

    def subset(self, mask: np.ndarray) -> "IpdDataset":
        return IpdDataset(*(getattr(self, f.name)[mask] for f in fields(self)))

    def at_time(self, time: float) -> "IpdDataset":
        return self.subset(self.t == time)

    def for_trial(self, trial: int) -> "IpdDataset":
        return self.subset(self.trial == trial)

    def equals(self, other: "IpdDataset") -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({name: getattr(self, name) for name in COLUMNS})

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "IpdDataset":
        missing = [c for c in COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"missing columns: {missing}")
        ds = cls(*(frame[c].to_numpy() for c in COLUMNS))
        validate_dataset(ds)
        return ds

    def to_csv(self, path: str | Path) -> None:
        """Write the dataset; floats are formatted so a round trip is exact."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for k in range(len(self)):
                writer.writerow((
                    int(self.trial[k]), int(self.id[k]), f"{self.t[k]:g}",
                    int(self.a[k]), int(self.z[k]),
                    f"{self.y[k]:.2f}", f"{self.y0[k]:.2f}",
                ))

    @classmethod
    def from_csv(cls, path: str | Path) -> "IpdDataset":
        frame = pd.read_csv(path)
        return cls.from_frame(frame)


def validate_dataset(ds: IpdDataset) -> None:
    """Cheap structural checks; raises ValueError on malformed data."""
    for name in ("a", "z"):
        col = getattr(ds, name)
        if not np.isin(col, (0, 1)).all():
            raise ValueError(f"column {name!r} must be binary 0/1")
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if not np.all(np.isfinite(ds.y)) or not np.all(np.isfinite(ds.y0)):
        raise ValueError("non-finite outcome values")
    if ds.t.min() < 0:
        raise ValueError("negative visit times")
    # Constant a, z, y0, trial within participant (ids are global, so sort by
    # id alone; sorting by trial first would split an id across trials).
    order = np.lexsort((ds.t, ds.id))
    ids = ds.id[order]
    new = np.empty(len(ids), dtype=bool)
    new[0] = True
    new[1:] = ids[1:] != ids[:-1]
    for name in ("a", "z", "y0", "trial"):
        col = getattr(ds, name)[order]
        same = np.ones(len(ids), dtype=bool)
        same[1:] = (col[1:] == col[:-1]) | new[1:]
        if not same.all():
            raise ValueError(f"column {name!r} varies within a participant")
