"""End-to-end split fit: partition, sample every subsample, collect.

Seeds all derive from one master seed. The partition uses the master seed
directly and chain ``k`` of subsample ``s`` draws from
:func:`~consensusjm.sampler.chain_seed`, so a job's output never depends on
which worker ran it or when.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import JointDataset, Partition, materialize, partition
from .errors import ChainFailure
from .executor import JobPlan, TimingReport, schedule, write_timing_csv
from .model import ModelSpec
from .sampler import ChainConfig, ChainDraws, _ChainJob
from .simulator import SimulationParams

__all__ = ["SplitFit", "fit_split", "write_fit", "natural_truth", "derive_seed"]


def derive_seed(master: int, *key: int) -> int:
    """64-bit seed for a labelled sub-task of a run seeded with ``master``."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class SplitFit:
    spec: ModelSpec              # resolved on the full data
    partition: Partition
    draws: list[list[ChainDraws]]  # [s][k]
    timing: TimingReport
    seconds: float               # end to end, including model set-up

    @property
    def S(self) -> int:
        return len(self.draws)

    @property
    def names(self) -> tuple[str, ...]:
        return self.draws[0][0].names


def fit_split(dataset: JointDataset, spec: ModelSpec, config: ChainConfig, S: int,
              core_cap: int | None = None, in_process: bool | None = None) -> SplitFit:
    """Fit ``S`` subposteriors of ``dataset`` with ``config.n_chains`` chains each.

    Knots and the hazard span are fixed on the full data before splitting.
    All ``S * K`` chain jobs share one pool of at most ``core_cap`` workers.
    Raises :class:`ChainFailure` naming the first failed job.
    """
    t0 = time.perf_counter()
    spec = spec.resolved(dataset)
    part = partition(dataset, S, config.seed)
    subsets = {s: materialize(dataset, part, s) for s in range(S)}
    jobs = [(s, k) for s in range(S) for k in range(config.n_chains)]
    report, results = schedule(JobPlan(jobs, core_cap), _ChainJob(spec, subsets, config, S), in_process)
    if report.failures:
        (s, k), err = next(iter(report.failures.items()))
        raise ChainFailure(s, k, err)
    grid = [[results[(s, k)] for k in range(config.n_chains)] for s in range(S)]
    return SplitFit(spec, part, grid, report, time.perf_counter() - t0)


def write_fit(result: SplitFit, directory, n: int | None = None, scenario: str = "fit") -> list[Path]:
    """Draws, random-effect summaries, partition and timing files."""
    from .storage import write_draws, write_random_effects, write_timing_sidecar

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = [result.partition.write_csv(directory / "partition.csv")]
    for row in result.draws:
        for chain in row:
            out.append(write_draws(chain, directory))
            re_path = write_random_effects(chain, directory)
            if re_path is not None:
                out.append(re_path)
        out.append(write_timing_sidecar(row, directory, row[0].subsample))
    n = n if n is not None else len(result.partition.assignments)
    rows = [(scenario, n, result.S, result.timing.core_cap, f"s{s}_c{k}", rec.seconds)
            for (s, k), rec in result.timing.records.items()]
    rows.append((scenario, n, result.S, result.timing.core_cap, "wall", result.timing.wall_seconds))
    out.append(write_timing_csv(directory / "timing.csv", rows))
    return out


def natural_truth(params: SimulationParams, spec: ModelSpec) -> dict[str, float]:
    """Generating values keyed like ``ParamLayout.constrained_names``.

    Only parameters with a generating value are included: the P-spline
    coefficients and smoothing have none.
    """
    layout = spec.layout()
    out = {f"beta_{c}": float(v) for c, v in zip(layout.fixed, params.beta)}
    gam = dict(zip(("sex", "age"), params.gamma))
    out.update({f"gamma_{c}": float(gam[c]) for c in layout.surv if c in gam})
    out["alpha"] = float(params.alpha) if spec.survival else 0.0
    if spec.baseline == "weibull":
        out["phi"] = float(params.phi0)
        out["shape"] = float(params.sigma0)
    out["sigma_y"] = float(params.sigma_y)
    if layout.q == len(params.beta):
        for i in range(layout.q):
            for j in range(i + 1):
                out[f"Sigma_{i + 1}_{j + 1}"] = float(params.Sigma_b[i, j])
    return out
