"""Joint longitudinal/survival datasets: CSV ingestion and subject-level splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

__all__ = [
    "DataValidationError",
    "LongitudinalRecord",
    "SurvivalRecord",
    "Subject",
    "JointDataset",
    "Partition",
    "load_dataset",
    "write_dataset",
    "partition",
    "materialize",
]

LONGITUDINAL_COLUMNS = ("id", "time", "y")
SURVIVAL_COLUMNS = ("id", "time", "event")


class DataValidationError(ValueError):
    """Input data violate the CSV schema or the dataset invariants."""


class LongitudinalRecord(NamedTuple):
    subject_id: str
    time: float
    value: float
    time_varying_covariates: Mapping[str, float]


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    observed_time: float
    event: int
    baseline_covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.observed_time) and self.observed_time > 0):
            raise DataValidationError(
                f"subject {self.subject_id!r}: observed_time must be > 0, got {self.observed_time}")
        if self.event not in (0, 1):
            raise DataValidationError(f"subject {self.subject_id!r}: event must be 0 or 1")


@dataclass(frozen=True)
class Subject:
    """One subject: measurements sorted by time plus a survival record.

    ``covariates`` holds one array per time-varying covariate, aligned with
    ``times``.
    """

    id: str
    times: np.ndarray
    values: np.ndarray
    survival: SurvivalRecord
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise DataValidationError(f"subject {self.id!r}: times and values must be 1-d and aligned")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise DataValidationError(f"subject {self.id!r}: non-finite longitudinal time or value")
        if np.any(times < 0):
            raise DataValidationError(f"subject {self.id!r}: negative longitudinal time")
        if times.size and times.max() > self.survival.observed_time:
            raise DataValidationError(
                f"subject {self.id!r}: longitudinal time {times.max()} exceeds "
                f"observed_time {self.survival.observed_time}")
        order = np.argsort(times, kind="stable")
        covs = {k: np.asarray(v, dtype=float)[order] for k, v in self.covariates.items()}
        for k, v in covs.items():
            if v.shape != times.shape:
                raise DataValidationError(f"subject {self.id!r}: covariate {k!r} misaligned")
        times, values = times[order], values[order]
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "covariates", covs)

    @property
    def n_obs(self) -> int:
        return self.times.size

    def records(self) -> Iterator[LongitudinalRecord]:
        for j in range(self.n_obs):
            yield LongitudinalRecord(
                self.id, float(self.times[j]), float(self.values[j]),
                {k: float(v[j]) for k, v in self.covariates.items()})


@dataclass(frozen=True)
class JointDataset:
    subjects: tuple[Subject, ...]

    def __post_init__(self):
        subjects = tuple(self.subjects)
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataValidationError("subject ids must be unique")
        object.__setattr__(self, "subjects", subjects)

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def n_records(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    @property
    def longitudinal_covariates(self) -> tuple[str, ...]:
        return tuple(self.subjects[0].covariates) if self.subjects else ()

    @property
    def survival_covariates(self) -> tuple[str, ...]:
        return tuple(self.subjects[0].survival.baseline_covariates) if self.subjects else ()

    def subset(self, ids: Iterable[str]) -> "JointDataset":
        """Subjects whose id is in ``ids``, in dataset order."""
        keep = set(ids)
        return JointDataset(tuple(s for s in self.subjects if s.id in keep))

    def all_times(self) -> np.ndarray:
        if not self.subjects:
            return np.empty(0)
        return np.concatenate([s.times for s in self.subjects])


def _read_csv(path: Path, required: tuple[str, ...]) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataValidationError(f"{path}: missing required column(s) {', '.join(missing)}")
    if header[:len(required)] != list(required):
        raise DataValidationError(f"{path}: header must start with {','.join(required)}")
    if len(set(header)) != len(header):
        raise DataValidationError(f"{path}: duplicate column names")
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
    return header, rows


def _number(text: str, path: Path, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"{path}:{lineno}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise DataValidationError(f"{path}:{lineno}: column {column!r} is not finite")
    return value


def load_dataset(longitudinal_path, survival_path) -> JointDataset:
    """Read ``longitudinal.csv`` (``id,time,y[,cov...]``) and ``survival.csv``
    (``id,time,event[,cov...]``) into a validated :class:`JointDataset`.

    Subject order follows the survival file.
    """
    lpath, spath = Path(longitudinal_path), Path(survival_path)
    s_header, s_rows = _read_csv(spath, SURVIVAL_COLUMNS)
    l_header, l_rows = _read_csv(lpath, LONGITUDINAL_COLUMNS)
    s_cov = s_header[3:]
    l_cov = l_header[3:]

    survival: dict[str, SurvivalRecord] = {}
    for lineno, row in enumerate(s_rows, start=2):
        sid = row[0].strip()
        if sid in survival:
            raise DataValidationError(f"{spath}:{lineno}: duplicate subject {sid!r}")
        event = _number(row[2], spath, lineno, "event")
        if event not in (0.0, 1.0):
            raise DataValidationError(f"{spath}:{lineno}: event must be 0 or 1, got {row[2]!r}")
        survival[sid] = SurvivalRecord(
            sid, _number(row[1], spath, lineno, "time"), int(event),
            {c: _number(v, spath, lineno, c) for c, v in zip(s_cov, row[3:])})

    grouped: dict[str, list[list[float]]] = {sid: [] for sid in survival}
    for lineno, row in enumerate(l_rows, start=2):
        sid = row[0].strip()
        if sid not in survival:
            raise DataValidationError(
                f"{lpath}:{lineno}: subject {sid!r} has no record in {spath.name}")
        grouped[sid].append([_number(v, lpath, lineno, c) for c, v in zip(l_header[1:], row[1:])])

    subjects = []
    for sid, rec in survival.items():
        arr = np.array(grouped[sid], dtype=float).reshape(-1, len(l_header) - 1)
        subjects.append(Subject(
            sid, arr[:, 0], arr[:, 1], rec,
            {c: arr[:, 2 + j] for j, c in enumerate(l_cov)}))
    return JointDataset(tuple(subjects))


def write_dataset(dataset: JointDataset, directory) -> tuple[Path, Path]:
    """Write ``longitudinal.csv`` and ``survival.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lpath, spath = directory / "longitudinal.csv", directory / "survival.csv"
    l_cov = dataset.longitudinal_covariates
    s_cov = dataset.survival_covariates
    with lpath.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*LONGITUDINAL_COLUMNS, *l_cov])
        for s in dataset:
            for j in range(s.n_obs):
                w.writerow([s.id, repr(float(s.times[j])), repr(float(s.values[j])),
                            *(repr(float(s.covariates[c][j])) for c in l_cov)])
    with spath.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*SURVIVAL_COLUMNS, *s_cov])
        for s in dataset:
            r = s.survival
            w.writerow([s.id, repr(float(r.observed_time)), r.event,
                        *(repr(float(r.baseline_covariates[c])) for c in s_cov)])
    return lpath, spath


@dataclass(frozen=True)
class Partition:
    """Assignment of whole subjects to ``S`` disjoint subsamples."""

    assignments: Mapping[str, int]
    S: int
    seed: int

    def members(self, s: int) -> list[str]:
        if not 0 <= s < self.S:
            raise IndexError(f"subsample index {s} out of range for S={self.S}")
        return [sid for sid, k in self.assignments.items() if k == s]

    def sizes(self) -> list[int]:
        counts = [0] * self.S
        for k in self.assignments.values():
            counts[k] += 1
        return counts

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "subsample"])
            for sid, k in self.assignments.items():
                w.writerow([sid, k])
        return path


def partition(dataset: JointDataset, S: int, seed: int) -> Partition:
    """Shuffle subjects with a PRNG seeded by ``seed`` and deal them
    round-robin to ``S`` subsamples, so sizes differ by at most one."""
    n = len(dataset)
    if S < 1:
        raise ValueError("number of splits must be >= 1")
    if S > n:
        raise ValueError(f"more splits than subjects ({S} > {n})")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = rng.permutation(n)
    slot = np.empty(n, dtype=int)
    slot[order] = np.arange(n) % S
    return Partition({sid: int(slot[i]) for i, sid in enumerate(dataset.ids)}, S, seed)


def materialize(dataset: JointDataset, part: Partition, s: int) -> JointDataset:
    """Sub-dataset with exactly the subjects assigned to subsample ``s``."""
    return dataset.subset(part.members(s))
