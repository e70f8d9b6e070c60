"""Combining subposterior draws into consensus draws.

Inputs are ``S x K`` chains of ``D`` draws of ``P`` parameters, given either
as nested sequences of :class:`~consensusjm.sampler.ChainDraws` (outer index
subsample, inner index chain) or as an array of shape ``(S, K, D, P)``.

Three rules are provided:

* union: chain ``k`` of the result concatenates chain ``k`` of every
  subsample;
* equal weights: the draw-wise average ``sum_s theta_{s,d} / S``;
* precision weights: the same average weighted, separately for every chain
  ``k`` and parameter ``p``, by the inverse sample variance of that
  subsample's chain, normalised over subsamples.

Draws are matched across subsamples by their retained-iteration index and
are averaged on the unconstrained scale, so combined covariance parameters
stay valid.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "METHODS",
    "ZERO_VARIANCE_EPS",
    "WeightTable",
    "ConsensusResult",
    "stack_draws",
    "combine_union",
    "equal_weights",
    "precision_weights",
    "combine_weighted",
    "combine",
    "gaussian_product_oracle",
]

METHODS = ("union", "equal", "precision")
ZERO_VARIANCE_EPS = 1e-12


def stack_draws(draws, names: Sequence[str] | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    """``(S, K, D, P)`` array plus parameter names; validates that every chain
    has the same shape and parameter ordering."""
    if isinstance(draws, np.ndarray):
        arr = np.asarray(draws, dtype=float)
        if arr.ndim != 4:
            raise ValueError("draw array must have shape (S, K, D, P)")
        if names is None:
            names = tuple(f"p{j + 1}" for j in range(arr.shape[3]))
        if len(names) != arr.shape[3]:
            raise ValueError("names do not match the number of parameters")
        return arr, tuple(names)
    rows = [list(chains) for chains in draws]
    if not rows or not rows[0]:
        raise ValueError("no draws to combine")
    K = len(rows[0])
    ref = rows[0][0]
    ref_names = tuple(ref.names)
    for s, chains in enumerate(rows):
        if len(chains) != K:
            raise ValueError(f"subsample {s} has {len(chains)} chains, expected {K}")
        for k, c in enumerate(chains):
            if tuple(c.names) != ref_names:
                raise ValueError(f"parameter names differ in subsample {s}, chain {k}")
            if c.draws.shape != ref.draws.shape:
                raise ValueError(f"draw matrix of subsample {s}, chain {k} has shape "
                                 f"{c.draws.shape}, expected {ref.draws.shape}")
    arr = np.array([[c.draws for c in chains] for chains in rows], dtype=float)
    if names is not None and tuple(names) != ref_names:
        raise ValueError("names do not match the draws")
    return arr, ref_names


@dataclass(frozen=True)
class WeightTable:
    """``weights[s, k, p]``; for every ``(k, p)`` the weights sum to one."""

    method: str
    weights: np.ndarray
    names: tuple[str, ...] = ()
    pooled: np.ndarray | None = None  # (S, P): variances pooled over chains

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 3:
            raise ValueError("weights must have shape (S, K, P)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if np.max(np.abs(w.sum(axis=0) - 1.0)) > 1e-12:
            raise ValueError("weights must sum to 1 over subsamples")
        object.__setattr__(self, "weights", w)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"p{j + 1}" for j in range(w.shape[2])))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape

    def rows(self):
        """``(subsample, chain, parameter, weight)`` in a fixed order."""
        S, K, P = self.weights.shape
        for s in range(S):
            for k in range(K):
                for p in range(P):
                    yield s, k, self.names[p], float(self.weights[s, k, p])


@dataclass
class ConsensusResult:
    method: str
    names: tuple[str, ...]
    chains: list[np.ndarray]
    weights: WeightTable | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def draws(self) -> np.ndarray:
        """``(K, rows, P)`` array of the combined chains."""
        return np.stack(self.chains)


def gaussian_product_oracle(means, precisions) -> tuple[float, float]:
    """Mean and variance of the normalised product of normals N(mu_s, 1/tau_s)."""
    mu = np.asarray(means, dtype=float)
    tau = np.asarray(precisions, dtype=float)
    if mu.shape != tau.shape or mu.size == 0:
        raise ValueError("means and precisions must be non-empty and aligned")
    if np.any(~(tau > 0)):
        raise ValueError("precisions must be positive")
    total = tau.sum()
    return float(np.sum(tau * mu) / total), float(1.0 / total)


def combine_union(draws, names=None) -> ConsensusResult:
    arr, names = stack_draws(draws, names)
    S, K, D, P = arr.shape
    chains = [arr[:, k].reshape(S * D, P) for k in range(K)]
    return ConsensusResult("union", names, chains, None, {"S": S, "K": K, "D": D})


def equal_weights(S: int, K: int, P: int, names=None) -> WeightTable:
    if S < 1 or K < 1 or P < 1:
        raise ValueError("S, K and P must be >= 1")
    return WeightTable("equal", np.full((S, K, P), 1.0 / S), tuple(names) if names else ())


def _normalised_precision(var: np.ndarray, what: str) -> np.ndarray:
    bad = ~(var > 0)
    if np.any(bad):
        warnings.warn(f"zero-variance {what} for {int(bad.sum())} entries; "
                      f"using precision 1/(var + {ZERO_VARIANCE_EPS:g})", RuntimeWarning)
    prec = 1.0 / (np.where(bad, 0.0, var) + np.where(bad, ZERO_VARIANCE_EPS, 0.0))
    return prec / prec.sum(axis=0, keepdims=True)


def precision_weights(draws, names=None) -> WeightTable:
    """Inverse within-chain variance weights, normalised per chain and parameter."""
    arr, names = stack_draws(draws, names)
    S, K, D, P = arr.shape
    if D < 2:
        raise ValueError("precision weights need at least 2 draws per chain")
    var = arr.var(axis=2, ddof=1)                       # (S, K, P)
    pooled_var = arr.reshape(S, K * D, P).var(axis=1, ddof=1)
    return WeightTable("precision", _normalised_precision(var, "chain"), names,
                       _normalised_precision(pooled_var, "subsample"))


def combine_weighted(draws, weights: WeightTable, names=None) -> ConsensusResult:
    arr, names = stack_draws(draws, names)
    S, K, D, P = arr.shape
    if weights.shape != (S, K, P):
        raise ValueError(f"weight table has shape {weights.shape}, draws need {(S, K, P)}")
    w = weights.weights
    chains = []
    for k in range(K):
        acc = np.zeros((D, P))
        for s in range(S):  # fixed summation order
            acc += w[s, k][None, :] * arr[s, k]
        chains.append(acc)
    return ConsensusResult(weights.method, names, chains, weights, {"S": S, "K": K, "D": D})


def combine(draws, method: str, names=None) -> ConsensusResult:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose one of {', '.join(METHODS)}")
    if method == "union":
        return combine_union(draws, names)
    arr, names = stack_draws(draws, names)
    S, K, _, P = arr.shape
    table = equal_weights(S, K, P, names) if method == "equal" else precision_weights(arr, names)
    return combine_weighted(arr, table, names)
