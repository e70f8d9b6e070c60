"""Bounded process pool for chain jobs.

Jobs are dispatched first-in first-out: at most ``core_cap`` run at once and
a queued job starts as soon as one finishes. Each job runs in its own
process with BLAS limited to one thread, so one job is one core. Results are
keyed by job and never depend on completion order because every job carries
its own seed.
"""
from __future__ import annotations

import csv
import multiprocessing as mp
import time
import traceback
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

__all__ = ["JobPlan", "JobRecord", "TimingReport", "schedule", "peak_concurrency",
           "speedup_report", "write_timing_csv", "write_speedup_csv"]


@dataclass(frozen=True)
class JobPlan:
    """Jobs (usually ``(subsample, chain)`` pairs) and a core cap.

    ``core_cap=None`` means unlimited, i.e. one core per job.
    """

    jobs: Sequence[Hashable]
    core_cap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        if len(set(self.jobs)) != len(self.jobs):
            raise ValueError("job keys must be unique")
        if self.core_cap is not None and self.core_cap < 1:
            raise ValueError("core_cap must be >= 1 or None")

    @property
    def cap(self) -> int:
        return max(1, len(self.jobs)) if self.core_cap is None else int(self.core_cap)


@dataclass(frozen=True)
class JobRecord:
    job: Hashable
    start: float          # scheduler clock, seconds since schedule() began
    end: float
    seconds: float        # time measured inside the job
    error: str | None = None


@dataclass
class TimingReport:
    records: dict[Hashable, JobRecord]
    wall_seconds: float
    core_cap: int
    queued_initially: int = 0
    failures: dict[Hashable, str] = field(default_factory=dict)

    @property
    def peak_concurrency(self) -> int:
        return peak_concurrency([(r.start, r.end) for r in self.records.values()])

    def subsample_seconds(self) -> dict[int, float]:
        """Slowest chain per subsample (jobs keyed ``(s, k)``)."""
        out: dict[int, float] = {}
        for (s, _k), r in self.records.items():
            out[s] = max(out.get(s, 0.0), r.seconds)
        return out

    @property
    def job_seconds_total(self) -> float:
        return float(sum(r.seconds for r in self.records.values()))


def peak_concurrency(intervals: Iterable[tuple[float, float]]) -> int:
    """Largest number of simultaneously open ``[start, end)`` intervals."""
    events = []
    for a, b in intervals:
        events.append((a, 1))
        events.append((b, -1))
    events.sort(key=lambda e: (e[0], e[1]))
    cur = peak = 0
    for _, d in events:
        cur += d
        peak = max(peak, cur)
    return peak


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _run_job(runner, job):
    t0 = time.perf_counter()
    try:
        result = runner(job)
        return job, result, time.perf_counter() - t0, None
    except Exception as exc:  # reported per job, never raised here
        return job, None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def schedule(plan: JobPlan, runner: Callable, in_process: bool | None = None):
    """Run ``runner(job)`` for every job of ``plan``.

    Returns ``(TimingReport, results)`` with ``results`` keyed by job; failed
    jobs are absent from ``results`` and listed in ``report.failures``.
    ``in_process`` (default: ``core_cap == 1``) runs jobs sequentially in the
    calling process instead of a pool.
    """
    cap = plan.cap
    if in_process is None:
        in_process = cap == 1
    queue = list(plan.jobs)
    records: dict[Hashable, JobRecord] = {}
    results: dict[Hashable, object] = {}
    failures: dict[Hashable, str] = {}
    clock0 = time.perf_counter()

    def finish(job, result, seconds, error, started):
        end = time.perf_counter() - clock0
        records[job] = JobRecord(job, started, end, seconds, error)
        if error is None:
            results[job] = result
        else:
            failures[job] = error

    if in_process:
        for job in queue:
            started = time.perf_counter() - clock0
            finish(*_run_job(runner, job), started)
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=cap, mp_context=ctx, initializer=_limit_threads) as pool:
            running = {}
            pending = list(queue)
            while pending or running:
                while pending and len(running) < cap:
                    job = pending.pop(0)
                    running[pool.submit(_run_job, runner, job)] = (job, time.perf_counter() - clock0)
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: plan.jobs.index(running[f][0])):
                    job, started = running.pop(fut)
                    try:
                        finish(*fut.result(), started)
                    except Exception as exc:  # worker died
                        finish(job, None, 0.0, f"{type(exc).__name__}: {exc}", started)
    wall = time.perf_counter() - clock0
    report = TimingReport(records, wall, cap, max(0, len(queue) - cap), failures)
    if report.peak_concurrency > cap:  # scheduler bookkeeping guarantees this
        raise AssertionError("core cap exceeded")
    return report, results


def speedup_report(baseline: Mapping[Hashable, float], runs: Iterable[tuple[int, int, Hashable, float]]):
    """Relative wall time of split fits against the full-data fit.

    ``baseline`` maps ``(n, replica)`` to the full-data seconds; ``runs``
    yields ``(n, S, replica, seconds)``. Returns rows
    ``(n, S, relative_median, relative_q1, relative_q3, slower)`` where
    ``slower`` flags a median above 1.
    """
    groups: dict[tuple[int, int], list[float]] = {}
    for n, S, rep, seconds in runs:
        key = (n, rep)
        if key not in baseline:
            raise ValueError(f"missing full-data baseline for n={n}, replica={rep}")
        base = float(baseline[key])
        if not base > 0:
            raise ValueError("baseline time must be positive")
        groups.setdefault((n, S), []).append(float(seconds) / base)
    rows = []
    for (n, S), rel in sorted(groups.items()):
        q1, med, q3 = np.quantile(rel, [0.25, 0.5, 0.75])
        rows.append((n, S, float(med), float(q1), float(q3), bool(med > 1.0)))
    return rows


def write_timing_csv(path, rows: Iterable[tuple]) -> Path:
    """``timing.csv`` rows: ``(scenario, n, S, core_cap, job, seconds)``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "n", "S", "core_cap", "job", "seconds"])
        for row in rows:
            w.writerow(list(row[:5]) + [repr(float(row[5]))])
    return path


def write_speedup_csv(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "S", "relative_median", "relative_q1", "relative_q3"])
        for n, S, med, q1, q3, *_ in rows:
            w.writerow([n, S, repr(med), repr(q1), repr(q3)])
    return path
