"""Convergence diagnostics, posterior summaries and simulation-study metrics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ParamLayout

__all__ = [
    "RHAT_DEGENERATE",
    "rhat",
    "effective_sample_size",
    "Summary",
    "summarize",
    "relative_bias",
    "ScenarioResult",
    "run_scenarios",
    "write_scenario_results",
    "write_figure_tables",
]

RHAT_DEGENERATE = float("nan")
QUANTILES = (0.025, 0.975)


def _split_halves(chains) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rhat(chains) -> float:
    """Split-R-hat over ``2K`` half-chains of a ``(K, D)`` array.

    Returns :data:`RHAT_DEGENERATE` (NaN) when the within-chain variance is 0.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 4:
        raise ValueError("rhat needs a (K, D) array with D >= 4")
    h = _split_halves(x)
    n = h.shape[1]
    W = float(np.mean(np.var(h, axis=1, ddof=1)))
    if not W > 0:
        return RHAT_DEGENERATE
    B = n * float(np.var(h.mean(axis=1), ddof=1))
    var_plus = (n - 1) / n * W + B / n
    return math.sqrt(var_plus / W)


def effective_sample_size(chains) -> float:
    """Multi-chain ESS from split chains with Geyer's initial monotone sequence."""
    h = _split_halves(chains)
    m, n = h.shape
    if n < 4:
        return float(m * n)
    centred = h - h.mean(axis=1, keepdims=True)
    W = float(np.mean(np.var(h, axis=1, ddof=1)))
    if not W > 0:
        return float("nan")
    B = n * float(np.var(h.mean(axis=1), ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centred, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n
    acov_mean = acov.mean(axis=0) * n / (n - 1)
    rho = 1.0 - (W - acov_mean) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev = math.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / math.log10(max(m * n, 10))))


@dataclass(frozen=True)
class Summary:
    """Posterior summary table on the natural scale."""

    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rhat: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def row(self, name: str) -> dict[str, float]:
        j = self.names.index(name)
        return {"mean": float(self.mean[j]), "sd": float(self.sd[j]), "lower": float(self.lower[j]),
                "upper": float(self.upper[j]), "width": float(self.width[j]), "rhat": float(self.rhat[j])}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "mean", "sd", "q2.5", "q97.5", "ci_width", "rhat"])
            for j, name in enumerate(self.names):
                w.writerow([name] + [repr(float(v[j])) for v in
                                     (self.mean, self.sd, self.lower, self.upper, self.width, self.rhat)])
        return path


def summarize(chains, names: Sequence[str] | None = None, transform=None) -> Summary:
    """Summaries of ``(K, D, P)`` (or ``(D, P)``) draws.

    ``transform`` maps unconstrained draws to the natural scale (a
    :class:`ParamLayout` or a callable); it is applied draw by draw before
    any statistic, so e.g. the reported ``sigma_y`` mean is the mean of
    ``exp(log_sigma_y)``. Quantiles use linear interpolation (type 7).
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if isinstance(transform, ParamLayout):
        names = transform.constrained_names
        x = transform.to_constrained(x)
    elif transform is not None:
        x = np.asarray(transform(x), dtype=float)
    K, D, P = x.shape
    if names is None:
        names = tuple(f"p{j + 1}" for j in range(P))
    flat = x.reshape(K * D, P)
    lo, hi = np.quantile(flat, QUANTILES, axis=0, method="linear")
    if K >= 1 and D >= 4:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rh = np.array([rhat(x[:, :, j]) for j in range(P)])
    else:
        rh = np.full(P, np.nan)
    sd = flat.std(axis=0, ddof=1) if K * D > 1 else np.zeros(P)
    return Summary(tuple(names), flat.mean(axis=0), sd, lo, hi, rh)


def relative_bias(estimate: float, truth: float) -> tuple[float, bool]:
    """``((estimate - truth) / truth, True)``; for ``truth == 0`` the absolute
    bias is returned with the flag ``False``."""
    if truth == 0:
        return float(estimate - truth), False
    return float((estimate - truth) / truth), True


# simulation study ------------------------------------------------------------
@dataclass
class ScenarioResult:
    """One (n, S, method, replica) cell of a simulation study.

    Dictionaries are keyed by natural-scale parameter name. ``bias`` holds the
    relative bias where the truth is non-zero and the absolute bias otherwise
    (``bias_relative`` tells which). ``gold_mean``/``gold_sd`` are the
    full-data (S=1) posterior for the same dataset when that cell was run.
    """

    n: int
    S: int
    method: str
    replica: int
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)
    width: dict[str, float] = field(default_factory=dict)
    lower: dict[str, float] = field(default_factory=dict)
    upper: dict[str, float] = field(default_factory=dict)
    rhat: dict[str, float] = field(default_factory=dict)
    bias: dict[str, float] = field(default_factory=dict)
    bias_relative: dict[str, bool] = field(default_factory=dict)
    subsample_means: dict[str, list[float]] = field(default_factory=dict)
    gold_mean: dict[str, float] = field(default_factory=dict)
    gold_sd: dict[str, float] = field(default_factory=dict)
    weights: np.ndarray | None = None         # (S, K, P), unconstrained parameters
    pooled_weights: np.ndarray | None = None  # (S, P)
    weight_names: tuple[str, ...] = ()
    wall_seconds: float = float("nan")
    job_seconds: float = float("nan")
    core_cap: int = 0
    error: str | None = None

    @property
    def weight_gap(self) -> float:
        """Mean of ``|w - 1/S|`` over subsamples, chains and parameters."""
        if self.weights is None:
            return float("nan")
        return float(np.mean(np.abs(self.weights - 1.0 / self.S)))


def _cell_summary(result: ScenarioResult, chains, layout: ParamLayout, truth) -> None:
    summ = summarize(chains, transform=layout)
    for j, name in enumerate(summ.names):
        result.mean[name] = float(summ.mean[j])
        result.sd[name] = float(summ.sd[j])
        result.width[name] = float(summ.width[j])
        result.lower[name] = float(summ.lower[j])
        result.upper[name] = float(summ.upper[j])
        result.rhat[name] = float(summ.rhat[j])
        if name in truth:
            result.bias[name], result.bias_relative[name] = relative_bias(summ.mean[j], truth[name])


def run_scenarios(ns: Sequence[int], splits: Sequence[int], methods: Sequence[str], replicas,
                  spec, config, params=None, seed: int = 0, core_cap: int | None = None,
                  in_process: bool | None = None, progress=None) -> list[ScenarioResult]:
    """Simulate, split, fit and combine over the grid ``ns x splits x methods``.

    Dataset ``r`` is simulated with a seed derived from ``(seed, r)``, so the
    same replica index gives the same subject streams at every ``n``; the fit
    of cell ``(n, S, r)`` uses a seed derived from ``(seed, n, S, r)``. Every
    cell is therefore reproducible on its own. ``S = 1`` cells run first and
    serve as the full-data reference. A failing fit is recorded in
    ``error`` and the study continues. ``replicas`` is a count or an
    explicit sequence of replica ids.
    """
    from dataclasses import replace

    from .consensus import combine
    from .pipeline import derive_seed, fit_split, natural_truth
    from .simulator import default_params, simulate_dataset

    if not ns or not splits or not methods:
        raise ValueError("scenario grid must be non-empty")
    replica_ids = list(range(replicas)) if isinstance(replicas, int) else [int(r) for r in replicas]
    if not replica_ids:
        raise ValueError("replicas must be >= 1")
    params = params if params is not None else default_params()
    order = sorted(set(splits), key=lambda s: (s != 1, s))
    out: list[ScenarioResult] = []
    for n in ns:
        for r in replica_ids:
            data, sim = simulate_dataset(params, n, derive_seed(seed, 2, r))
            # known design: fit on the generating spline basis so beta is the simulated estimand
            cell_spec = spec
            if spec.ns_basis is None and spec.ns_df == sim.basis.df:
                cell_spec = replace(spec, ns_basis=sim.basis)
            layout = spec.layout()
            truth = natural_truth(params, spec)
            gold_mean: dict[str, float] = {}
            gold_sd: dict[str, float] = {}
            for S in order:
                cfg = replace(config, seed=derive_seed(seed, 3, n, S, r))
                cells = [ScenarioResult(n, S, m, r) for m in methods]
                try:
                    fit = fit_split(data, cell_spec, cfg, S, core_cap, in_process)
                except Exception as exc:  # recorded, the grid continues
                    for c in cells:
                        c.error = f"{type(exc).__name__}: {exc}"
                    out.extend(cells)
                    continue
                sub_means = np.array([layout.to_constrained(np.concatenate([c.draws for c in row])).mean(axis=0)
                                      for row in fit.draws])
                for cell in cells:
                    res = combine(fit.draws, cell.method)
                    _cell_summary(cell, res.draws, layout, truth)
                    cell.subsample_means = {nm: sub_means[:, j].tolist()
                                            for j, nm in enumerate(layout.constrained_names)}
                    if res.weights is not None:
                        cell.weights = res.weights.weights
                        cell.pooled_weights = res.weights.pooled
                        cell.weight_names = res.weights.names
                    cell.wall_seconds = fit.timing.wall_seconds
                    cell.job_seconds = fit.timing.job_seconds_total
                    cell.core_cap = fit.timing.core_cap
                    if S == 1 and not gold_mean:
                        gold_mean, gold_sd = dict(cell.mean), dict(cell.sd)
                    cell.gold_mean, cell.gold_sd = gold_mean, gold_sd
                out.extend(cells)
                if progress is not None:
                    progress(n, S, r, fit)
    return out


def _fmt(v) -> str:
    return repr(float(v))


def write_scenario_results(results: Iterable[ScenarioResult], path) -> Path:
    """Long format: ``n,S,method,replica,parameter,metric,value``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "S", "method", "replica", "parameter", "metric", "value"])
        for r in results:
            key = [r.n, r.S, r.method, r.replica]
            if r.error is not None:
                w.writerow(key + ["", "error", r.error.splitlines()[0]])
                continue
            for name in r.mean:
                w.writerow(key + [name, "mean", _fmt(r.mean[name])])
                w.writerow(key + [name, "sd", _fmt(r.sd[name])])
                w.writerow(key + [name, "q2.5", _fmt(r.lower[name])])
                w.writerow(key + [name, "q97.5", _fmt(r.upper[name])])
                w.writerow(key + [name, "ci_width", _fmt(r.width[name])])
                w.writerow(key + [name, "rhat", _fmt(r.rhat[name])])
                if name in r.bias:
                    kind = "relative_bias" if r.bias_relative[name] else "absolute_bias"
                    w.writerow(key + [name, kind, _fmt(r.bias[name])])
            if r.weights is not None:
                w.writerow(key + ["", "weight_gap", _fmt(r.weight_gap)])
            w.writerow(key + ["", "wall_seconds", _fmt(r.wall_seconds)])
            w.writerow(key + ["", "job_seconds", _fmt(r.job_seconds)])
    return path


def write_figure_tables(results: Sequence[ScenarioResult], directory) -> tuple[Path, Path]:
    """Plot-ready tables.

    ``figure2_data.csv`` (columns ``panel,n,S,method,replica,parameter,
    subsample,chain,value``) holds relative bias, CI width and the weights,
    the latter both per chain and pooled over chains (``chain = pooled``).
    ``figure3_data.csv`` holds the wall time of each split fit relative to
    the full-data fit of the same dataset.
    """
    directory = Path(directory)
    fig2 = directory / "figure2_data.csv"
    with fig2.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["panel", "n", "S", "method", "replica", "parameter", "subsample", "chain", "value"])
        for r in results:
            if r.error is not None:
                continue
            key = [r.n, r.S, r.method, r.replica]
            for name, b in r.bias.items():
                if r.bias_relative[name]:
                    w.writerow(["relative_bias"] + key + [name, "", "", _fmt(b)])
            for name, width in r.width.items():
                w.writerow(["ci_width"] + key + [name, "", "", _fmt(width)])
            if r.weights is not None:
                S, K, P = r.weights.shape
                for s in range(S):
                    for p, name in enumerate(r.weight_names):
                        for k in range(K):
                            w.writerow(["weight"] + key + [name, s, k, _fmt(r.weights[s, k, p])])
                        if r.pooled_weights is not None:
                            w.writerow(["weight"] + key + [name, s, "pooled", _fmt(r.pooled_weights[s, p])])
    fig3 = directory / "figure3_data.csv"
    base = {(r.n, r.replica): r.wall_seconds for r in results if r.S == 1 and r.error is None}
    seen = set()
    with fig3.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "S", "core_cap", "replica", "wall_seconds", "relative_time"])
        for r in results:
            key = (r.n, r.S, r.replica)
            if r.error is not None or key in seen:
                continue
            seen.add(key)
            b = base.get((r.n, r.replica))
            rel = r.wall_seconds / b if b else float("nan")
            w.writerow([r.n, r.S, r.core_cap, r.replica, _fmt(r.wall_seconds), _fmt(rel)])
    return fig2, fig3
