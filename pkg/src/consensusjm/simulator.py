"""Simulation of joint longitudinal/survival data from a shared-parameter model.

Each subject draws from its own PRNG stream (``SeedSequence(seed,
spawn_key=(i,))``), so a subject's data do not depend on how many other
subjects are generated or in which order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .basis import NaturalSplineBasis, ns_fit
from .data import JointDataset, Subject, SurvivalRecord
from .quadrature import adaptive_integrate, segment_edges

__all__ = [
    "SimulationParams",
    "SimulatedTruth",
    "default_params",
    "cumulative_hazard",
    "invert_survival",
    "simulate_dataset",
    "write_truth",
    "read_truth",
]

SIGMA_B_UPPER = (
    (0.71, 0.33, 0.07, 1.26),
    (2.68, 3.81, 4.35),
    (7.62, 5.40),
    (8.00,),
)

T_SEARCH_MAX = 1e3


def _symmetrize(upper) -> np.ndarray:
    p = len(upper)
    out = np.zeros((p, p))
    for i, row in enumerate(upper):
        out[i, i:] = row
    return np.triu(out) + np.triu(out, 1).T


@dataclass(frozen=True)
class SimulationParams:
    beta: tuple[float, ...] = (6.94, 1.30, 1.84, 1.82)
    sigma_y: float = 0.6
    Sigma_b: np.ndarray = field(default_factory=lambda: _symmetrize(SIGMA_B_UPPER))
    phi0: float = math.exp(-9.0)
    sigma0: float = 2.0
    gamma: tuple[float, float] = (0.5, 0.05)
    alpha: float = 0.5
    n_i: int = 15
    t_max: float = 7.0
    age_range: tuple[float, float] = (30.0, 70.0)
    ns_df: int = 3

    def __post_init__(self):
        S = np.array(self.Sigma_b, dtype=float)
        object.__setattr__(self, "Sigma_b", S)
        if self.sigma_y <= 0 or self.sigma0 <= 0 or self.phi0 <= 0 or self.t_max <= 0:
            raise ValueError("sigma_y, sigma0, phi0 and t_max must be positive")
        if S.shape != (len(self.beta),) * 2 or not np.allclose(S, S.T):
            raise ValueError("Sigma_b must be symmetric and match beta")
        np.linalg.cholesky(S)
        if self.n_i < 1:
            raise ValueError("n_i must be >= 1")

    def flat(self) -> dict[str, float]:
        out = {f"beta_{j}": float(v) for j, v in enumerate(self.beta)}
        out["sigma_y"] = float(self.sigma_y)
        p = len(self.beta)
        for i in range(p):
            for j in range(i + 1):
                out[f"Sigma_{i + 1}_{j + 1}"] = float(self.Sigma_b[i, j])
        out.update(phi0=float(self.phi0), sigma0=float(self.sigma0),
                   gamma_sex=float(self.gamma[0]), gamma_age=float(self.gamma[1]),
                   alpha=float(self.alpha), n_i=float(self.n_i), t_max=float(self.t_max))
        return out


def default_params() -> SimulationParams:
    return SimulationParams()


@dataclass(frozen=True)
class SimulatedTruth:
    params: SimulationParams
    seed: int
    basis: NaturalSplineBasis
    b: np.ndarray
    event_times: np.ndarray
    ids: tuple[str, ...]


def _linear_part(params: SimulationParams, covariates: Mapping[str, float]) -> float:
    return params.gamma[0] * covariates["sex"] + params.gamma[1] * covariates["age"]


def _hazard_fn(params, covariates, b_i, basis):
    coef = np.asarray(params.beta, dtype=float) + np.asarray(b_i, dtype=float)
    lin = _linear_part(params, covariates)
    log_scale = math.log(params.phi0 * params.sigma0)

    def h(s):
        s = np.asarray(s, dtype=float)
        X = np.column_stack([np.ones(s.size), basis.evaluate(s)])
        eta = X @ coef
        with np.errstate(over="ignore", divide="ignore"):
            return np.exp(log_scale + (params.sigma0 - 1.0) * np.log(s) + lin + params.alpha * eta)

    return h


def cumulative_hazard(params: SimulationParams, subject_covariates: Mapping[str, float],
                      b_i, basis: NaturalSplineBasis, t: float) -> float:
    """``H_i(t)``: adaptive 15-point Gauss-Legendre, split at the spline knots."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return 0.0
    h = _hazard_fn(params, subject_covariates, b_i, basis)
    edges = segment_edges(t, (*basis.interior_knots, *basis.boundary_knots))
    return adaptive_integrate(h, edges)


def invert_survival(params: SimulationParams, subject_covariates: Mapping[str, float],
                    b_i, basis: NaturalSplineBasis, u: float) -> float:
    """Solve ``exp(-H_i(t)) = u`` for ``t``; ``inf`` if no root below 1e3 years."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    target = -math.log(u)

    def g(t):
        return cumulative_hazard(params, subject_covariates, b_i, basis, t) - target

    hi = params.t_max
    while g(hi) < 0:
        if hi >= T_SEARCH_MAX:
            return math.inf
        hi = min(2.0 * hi, T_SEARCH_MAX)
    return brentq(g, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def simulate_dataset(params: SimulationParams, n: int, seed: int) -> tuple[JointDataset, SimulatedTruth]:
    """Draw ``n`` subjects from the joint model; deterministic given ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    p = len(params.beta)
    chol = np.linalg.cholesky(params.Sigma_b)
    root = np.random.SeedSequence(seed)
    b = np.empty((n, p))
    visits = np.empty((n, params.n_i))
    eps = np.empty((n, params.n_i))
    age = np.empty(n)
    sex = np.empty(n)
    u = np.empty(n)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(i,)))
        b[i] = chol @ rng.standard_normal(p)
        visits[i, 0] = 0.0
        visits[i, 1:] = np.sort(rng.uniform(0.0, params.t_max, params.n_i - 1))
        eps[i] = rng.normal(0.0, params.sigma_y, params.n_i)
        age[i] = rng.uniform(*params.age_range)
        sex[i] = float(rng.random() < 0.5)
        u[i] = rng.random()
        while u[i] == 0.0:
            u[i] = rng.random()

    basis = ns_fit(visits.ravel(), params.ns_df)
    beta = np.asarray(params.beta, dtype=float)
    X = np.concatenate([np.ones((visits.size, 1)), basis.evaluate(visits.ravel())], axis=1)
    eta = np.einsum("ijk,ik->ij", X.reshape(n, params.n_i, p), beta + b)
    y = eta + eps

    t_star = np.empty(n)
    subjects = []
    ids = tuple(str(i + 1) for i in range(n))
    for i in range(n):
        cov = {"sex": sex[i], "age": age[i]}
        t_star[i] = invert_survival(params, cov, b[i], basis, u[i])
        event = int(t_star[i] <= params.t_max)
        t_obs = t_star[i] if event else params.t_max
        keep = visits[i] <= t_obs
        subjects.append(Subject(ids[i], visits[i, keep], y[i, keep],
                                SurvivalRecord(ids[i], float(t_obs), event, cov)))
    truth = SimulatedTruth(params, seed, basis, b, t_star, ids)
    return JointDataset(tuple(subjects)), truth


def with_params(params: SimulationParams, overrides: Mapping[str, str]) -> SimulationParams:
    """Apply ``key=value`` overrides (CLI ``--param``); vector keys take commas."""
    kwargs = {}
    for key, text in overrides.items():
        if key in ("beta", "gamma"):
            kwargs[key] = tuple(float(v) for v in text.split(","))
        elif key == "Sigma_b":
            vals = [float(v) for v in text.split(",")]
            p = int(round(math.sqrt(len(vals))))
            if p * p != len(vals):
                raise ValueError("Sigma_b needs p*p comma-separated values")
            kwargs[key] = np.array(vals).reshape(p, p)
        elif key == "phi0" and text.startswith("exp(") and text.endswith(")"):
            kwargs[key] = math.exp(float(text[4:-1]))
        elif key in ("n_i", "ns_df"):
            kwargs[key] = int(text)
        elif key in SimulationParams.__dataclass_fields__:
            kwargs[key] = float(text)
        else:
            raise ValueError(f"unknown simulation parameter {key!r}")
    return replace(params, **kwargs)


def write_truth(truth: SimulatedTruth, path) -> Path:
    """``truth.csv`` in long form: ``key,subject,value``.

    Parameter rows leave ``subject`` empty; the spline knots are stored as
    ``ns_knot_*`` / ``ns_boundary_*`` so fits can reuse the generating basis.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "subject", "value"])
        w.writerow(["seed", "", truth.seed])
        for k, v in truth.params.flat().items():
            w.writerow([k, "", repr(v)])
        for j, k in enumerate(truth.basis.interior_knots):
            w.writerow([f"ns_knot_{j + 1}", "", repr(float(k))])
        w.writerow(["ns_boundary_low", "", repr(float(truth.basis.boundary_knots[0]))])
        w.writerow(["ns_boundary_high", "", repr(float(truth.basis.boundary_knots[1]))])
        for i, sid in enumerate(truth.ids):
            for j in range(truth.b.shape[1]):
                w.writerow([f"b{j + 1}", sid, repr(float(truth.b[i, j]))])
            w.writerow(["t_star", sid, repr(float(truth.event_times[i]))])
    return path


def read_truth(path) -> tuple[dict[str, float], NaturalSplineBasis]:
    """Parameter rows of ``truth.csv`` and the generating spline basis."""
    values: dict[str, float] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row["subject"] == "":
                values[row["key"]] = float(row["value"])
    knots = [values[k] for k in sorted((k for k in values if k.startswith("ns_knot_")),
                                       key=lambda k: int(k.rsplit("_", 1)[1]))]
    basis = NaturalSplineBasis(len(knots) + 1, tuple(knots),
                               (values["ns_boundary_low"], values["ns_boundary_high"]))
    return values, basis
