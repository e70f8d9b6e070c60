"""Spline bases: natural cubic splines for the marker trend and cubic
B-splines with a second-order difference penalty for the log baseline hazard.

The natural spline follows the usual ``ns()`` construction: a cubic B-spline
basis on the augmented knot sequence, with the first column dropped and the
second-derivative constraints at both boundary knots projected out through a
Householder QR. The resulting basis is zero at the lower boundary knot and
linear outside the boundary knots.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NaturalSplineBasis",
    "BSplineBasis",
    "bspline_design",
    "ns_fit",
    "ns_eval",
    "bspline_basis",
    "bspline_eval",
    "second_difference_penalty",
]


def bspline_design(knots, x, order: int, deriv: int = 0) -> np.ndarray:
    """Evaluate all B-splines of ``order`` (degree + 1) on ``knots`` at ``x``.

    Uses the Cox-de Boor recursion on the full knot sequence; derivatives are
    obtained by applying the derivative recurrence ``deriv`` times on top of
    the order ``order - deriv`` basis. The right end of the knot span is
    treated as closed. Points outside the span get zero rows.

    Returns an array of shape ``(len(x), len(knots) - order)``.
    """
    t = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_basis = len(t) - order
    if n_basis < 1:
        raise ValueError("knot sequence too short for the requested order")
    if deriv >= order:
        return np.zeros((x.size, n_basis))

    # order-1 indicators on half-open intervals, last nonempty one closed
    left = t[:-1]
    right = t[1:]
    B = ((x[:, None] >= left) & (x[:, None] < right)).astype(float)
    nonempty = np.flatnonzero(right > left)
    if nonempty.size:
        last = nonempty[-1]
        B[x == t[-1], last] = 1.0

    def _ratio(num, den):
        out = np.zeros_like(num)
        ok = den > 0
        out[..., ok] = num[..., ok] / den[ok]
        return out

    base_order = order - deriv
    for k in range(2, base_order + 1):
        nk = len(t) - k
        d1 = t[k - 1:k - 1 + nk] - t[:nk]
        d2 = t[k:k + nk] - t[1:1 + nk]
        w1 = _ratio(x[:, None] - t[:nk], d1)
        w2 = _ratio(t[k:k + nk] - x[:, None], d2)
        B = w1 * B[:, :nk] + w2 * B[:, 1:nk + 1]

    for k in range(base_order + 1, order + 1):
        nk = len(t) - k
        d1 = t[k - 1:k - 1 + nk] - t[:nk]
        d2 = t[k:k + nk] - t[1:1 + nk]
        B = (k - 1) * (_ratio(B[:, :nk], d1) - _ratio(B[:, 1:nk + 1], d2))
    return B


@dataclass(frozen=True)
class NaturalSplineBasis:
    """Natural cubic spline basis with ``df`` columns (no intercept column)."""

    df: int
    interior_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]
    _aknots: np.ndarray = field(init=False, repr=False, compare=False)
    _proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = self.boundary_knots
        knots = np.asarray(self.interior_knots, dtype=float)
        if not lo < hi:
            raise ValueError("boundary knots must satisfy low < high")
        if knots.size != self.df - 1:
            raise ValueError(f"df={self.df} requires {self.df - 1} interior knots, got {knots.size}")
        full = np.concatenate([[lo], knots, [hi]])
        if np.any(np.diff(full) <= 0):
            raise ValueError("knots must be strictly increasing and inside the boundary knots")
        aknots = np.concatenate([[lo] * 4, knots, [hi] * 4])
        const = bspline_design(aknots, [lo, hi], 4, deriv=2)[:, 1:]
        q, _ = np.linalg.qr(const.T, mode="complete")
        object.__setattr__(self, "_aknots", aknots)
        object.__setattr__(self, "_proj", q[:, 2:])

    def __call__(self, t) -> np.ndarray:
        return self.evaluate(t)

    def evaluate(self, t) -> np.ndarray:
        """Basis matrix of shape ``(len(t), df)``; linear outside the boundary."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.boundary_knots
        raw = np.empty((t.size, self._aknots.size - 4))
        inside = (t >= lo) & (t <= hi)
        if inside.any():
            raw[inside] = bspline_design(self._aknots, t[inside], 4)
        for pivot, mask in ((lo, t < lo), (hi, t > hi)):
            if mask.any():
                val = bspline_design(self._aknots, [pivot], 4)[0]
                slope = bspline_design(self._aknots, [pivot], 4, deriv=1)[0]
                raw[mask] = val + np.outer(t[mask] - pivot, slope)
        return raw[:, 1:] @ self._proj

    def to_dict(self) -> dict:
        return {
            "df": self.df,
            "interior_knots": list(self.interior_knots),
            "boundary_knots": list(self.boundary_knots),
        }


def ns_fit(times, df: int = 3) -> NaturalSplineBasis:
    """Place knots for a natural spline with ``df`` degrees of freedom.

    Boundary knots sit at the extremes of ``times``; the ``df - 1`` interior
    knots at equally spaced empirical quantiles (linear interpolation).
    """
    times = np.asarray(times, dtype=float).ravel()
    if df < 1:
        raise ValueError("df must be >= 1")
    if times.size == 0 or not np.all(np.isfinite(times)):
        raise ValueError("times must be a non-empty finite sample")
    if np.unique(times).size < df + 1:
        raise ValueError(f"need at least {df + 1} distinct times for df={df}")
    lo, hi = float(times.min()), float(times.max())
    probs = np.linspace(0.0, 1.0, df + 1)[1:-1]
    knots = np.quantile(times, probs) if probs.size else np.empty(0)
    return NaturalSplineBasis(df, tuple(float(k) for k in knots), (lo, hi))


def ns_eval(basis: NaturalSplineBasis, t) -> np.ndarray:
    """Evaluate ``basis`` at ``t``; a scalar ``t`` gives a length-``df`` vector."""
    out = basis.evaluate(t)
    return out[0] if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped B-spline basis; the knot vector repeats each boundary knot."""

    degree: int
    knot_vector: tuple[float, ...]

    @property
    def n_basis(self) -> int:
        return len(self.knot_vector) - self.degree - 1

    @property
    def span(self) -> tuple[float, float]:
        return self.knot_vector[0], self.knot_vector[-1]

    @property
    def interior_knots(self) -> tuple[float, ...]:
        return self.knot_vector[self.degree + 1:-(self.degree + 1)]

    def evaluate(self, t) -> np.ndarray:
        lo, hi = self.span
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), lo, hi)
        return bspline_design(np.asarray(self.knot_vector), t, self.degree + 1)


def bspline_basis(low: float, high: float, n_basis: int = 15, degree: int = 3) -> BSplineBasis:
    """Equally spaced clamped basis with ``n_basis`` functions on ``[low, high]``."""
    if not high > low:
        raise ValueError("need high > low")
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise ValueError(f"n_basis must be at least degree + 1 = {degree + 1}")
    inner = np.linspace(low, high, n_interior + 2)[1:-1]
    knots = np.concatenate([[low] * (degree + 1), inner, [high] * (degree + 1)])
    return BSplineBasis(degree, tuple(float(k) for k in knots))


def bspline_eval(basis: BSplineBasis, t) -> np.ndarray:
    """Basis values at ``t`` (clamped to the knot span)."""
    out = basis.evaluate(t)
    return out[0] if np.ndim(t) == 0 else out


def second_difference_penalty(n_basis: int) -> np.ndarray:
    """``D.T @ D`` for the second-order difference operator ``D``."""
    if n_basis < 3:
        raise ValueError("second-order difference penalty needs n_basis >= 3")
    D = np.diff(np.eye(n_basis), n=2, axis=0)
    return D.T @ D


def second_difference_spectrum(n_basis: int) -> np.ndarray:
    """Ascending eigenvalues of :func:`second_difference_penalty`.

    The two null directions (constants and linear trends) get exact zeros;
    the rest come from the nonsingular ``D @ D.T``, which shares them.
    """
    if n_basis < 3:
        raise ValueError("second-order difference penalty needs n_basis >= 3")
    D = np.diff(np.eye(n_basis), n=2, axis=0)
    return np.concatenate([np.zeros(2), np.linalg.eigvalsh(D @ D.T)])
