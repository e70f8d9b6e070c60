"""Composite Gauss-Legendre rules for cumulative hazards."""
from __future__ import annotations

import numpy as np

N_NODES = 15
_X, _W = np.polynomial.legendre.leggauss(N_NODES)


def segment_edges(upper: float, breakpoints=()) -> np.ndarray:
    """Edges ``0 = e0 < ... < ek = upper`` splitting at breakpoints inside (0, upper)."""
    bp = np.asarray(breakpoints, dtype=float)
    bp = bp[(bp > 0) & (bp < upper)]
    return np.unique(np.concatenate([[0.0], bp, [upper]]))


def composite_nodes(edges) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the 15-point rule on every segment of ``edges``."""
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    nodes = (a + half * (_X + 1.0)).ravel()
    weights = (half * _W).ravel()
    return nodes, weights


def adaptive_integrate(f, edges, rtol: float = 1e-13, max_depth: int = 30) -> float:
    """Integrate a vectorised ``f`` over the segments in ``edges``.

    Each segment is compared against its two halves; segments that disagree
    beyond ``rtol`` are bisected recursively.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.size < 2 or edges[-1] <= edges[0]:
        return 0.0
    pending = [(edges[i], edges[i + 1], 0) for i in range(edges.size - 1)]
    total = 0.0
    while pending:
        a = np.array([p[0] for p in pending])
        b = np.array([p[1] for p in pending])
        m = 0.5 * (a + b)
        # one vectorised call for whole segments and both halves
        lo = np.concatenate([a, a, m])
        hi = np.concatenate([b, m, b])
        half = 0.5 * (hi - lo)
        x = lo[:, None] + half[:, None] * (_X + 1.0)
        vals = np.asarray(f(x.ravel()), dtype=float).reshape(x.shape)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite integrand")
        seg = (vals * _W).sum(axis=1) * half
        k = len(pending)
        whole, split = seg[:k], seg[k:2 * k] + seg[2 * k:]
        nxt = []
        for i, (ai, bi, depth) in enumerate(pending):
            if abs(whole[i] - split[i]) <= rtol * abs(split[i]) + 1e-300 or depth >= max_depth:
                total += split[i]
            else:
                nxt.append((ai, m[i], depth + 1))
                nxt.append((m[i], bi, depth + 1))
        pending = nxt
    return float(total)
