"""Shared-parameter joint model: Gaussian linear mixed model for the marker,
proportional hazards for the event, linked through the current value of the
marker's true trajectory.

All densities are on the unconstrained parameter scale described by
:class:`ParamLayout`. ``log_prior(theta, S)`` is the full unconstrained prior
log density (Jacobians included) multiplied by ``1/S``, so that the product of
``S`` subposteriors equals the full-data posterior on the scale the consensus
step averages on.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import gammaln, multigammaln

from .basis import (BSplineBasis, NaturalSplineBasis, bspline_basis, ns_fit,
                    second_difference_penalty, second_difference_spectrum)
from .data import JointDataset
from .quadrature import composite_nodes, segment_edges

__all__ = [
    "Priors",
    "ModelSpec",
    "ParamLayout",
    "JointModel",
    "loglik_longitudinal",
    "loglik_survival",
    "log_prior",
    "log_posterior",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Priors:
    """Prior hyperparameters.

    ``re_df=None`` means ``q + 1`` for a ``q``-dimensional random effect.
    """

    coef_sd: float = 10.0
    sigma2_shape: float = 1.0
    sigma2_rate: float = 1.0
    re_df: float | None = None
    re_scale: float = 1.0
    log_phi_sd: float = 10.0
    log_shape_sd: float = 2.0
    tau_shape: float = 1.0
    tau_rate: float = 0.005
    spline_ridge: float = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """Model structure shared by every subsample fit.

    ``ns_basis`` and ``baseline_span`` must be fixed before splitting so all
    subposteriors refer to the same parameters; :meth:`resolved` fills them
    from a full dataset.
    """

    ns_df: int = 3
    ns_basis: NaturalSplineBasis | None = None
    longitudinal_covariates: tuple[str, ...] = ()
    random_effects: tuple[str, ...] | None = None
    survival_covariates: tuple[str, ...] = ("sex", "age")
    association: str = "value"
    baseline: str = "pspline"
    n_basis: int = 15
    baseline_span: tuple[float, float] | None = None
    priors: Priors = field(default_factory=Priors)
    survival: bool = True  # False drops the event submodel (alpha held at 0)

    def __post_init__(self):
        if self.association != "value":
            raise ValueError("only the current-value association is supported")
        if self.baseline not in ("weibull", "pspline"):
            raise ValueError("baseline must be 'weibull' or 'pspline'")
        if self.ns_basis is not None and self.ns_basis.df != self.ns_df:
            raise ValueError("ns_basis.df does not match ns_df")
        bad = [c for c in self.re_columns if c not in self.fixed_columns]
        if bad:
            raise ValueError(f"random-effect columns not in the fixed design: {bad}")

    @property
    def fixed_columns(self) -> tuple[str, ...]:
        return ("intercept", *(f"ns{j + 1}" for j in range(self.ns_df)), *self.longitudinal_covariates)

    @property
    def re_columns(self) -> tuple[str, ...]:
        if self.random_effects is None:
            return ("intercept", *(f"ns{j + 1}" for j in range(self.ns_df)))
        return tuple(self.random_effects)

    @property
    def baseline_basis(self) -> BSplineBasis | None:
        if self.baseline != "pspline" or self.baseline_span is None:
            return None
        return bspline_basis(*self.baseline_span, n_basis=self.n_basis)

    def resolved(self, dataset: JointDataset) -> "ModelSpec":
        """Fix the spline knots (and hazard span) from ``dataset``."""
        spec = self
        if spec.ns_basis is None:
            spec = replace(spec, ns_basis=ns_fit(dataset.all_times(), spec.ns_df))
        if spec.baseline == "pspline" and spec.baseline_span is None:
            t_max = max(s.survival.observed_time for s in dataset)
            spec = replace(spec, baseline_span=(0.0, float(t_max)))
        return spec

    def layout(self) -> "ParamLayout":
        return ParamLayout(self.fixed_columns, self.survival_covariates, len(self.re_columns),
                           self.baseline, self.n_basis)


class ParamLayout:
    """Ordering of the flattened unconstrained parameter vector.

    Blocks in order: ``beta_*`` (fixed effects), ``gamma_*`` (survival
    coefficients), ``alpha``, baseline (``log_phi, log_shape`` or
    ``bh_1..bh_m, log_tau``), ``log_sigma_y``, then the log-Cholesky factor of
    the random-effects covariance row by row (``logL_i_i`` on the diagonal,
    ``L_i_j`` below it).
    """

    def __init__(self, fixed, surv, q: int, baseline: str, n_basis: int = 15):
        self.fixed = tuple(fixed)
        self.surv = tuple(surv)
        self.q = int(q)
        self.baseline = baseline
        self.n_basis = int(n_basis)
        if baseline == "weibull":
            base_names = ["log_phi", "log_shape"]
        else:
            base_names = [f"bh_{j + 1}" for j in range(self.n_basis)] + ["log_tau"]
        chol_names = []
        for i in range(self.q):
            for j in range(i + 1):
                chol_names.append(f"logL_{i + 1}_{i + 1}" if i == j else f"L_{i + 1}_{j + 1}")
        names = ([f"beta_{c}" for c in self.fixed] + [f"gamma_{c}" for c in self.surv]
                 + ["alpha"] + base_names + ["log_sigma_y"] + chol_names)
        self.names = tuple(names)
        p, r, nb = len(self.fixed), len(self.surv), len(base_names)
        self.beta = slice(0, p)
        self.gamma = slice(p, p + r)
        self.alpha = p + r
        self.base = slice(p + r + 1, p + r + 1 + nb)
        self.log_sigma_y = p + r + 1 + nb
        self.chol = slice(self.log_sigma_y + 1, self.log_sigma_y + 1 + len(chol_names))
        self.survival_block = slice(p, p + r + 1 + nb)
        self._tril = np.tril_indices(self.q)
        self._diag_pos = np.array([i * (i + 1) // 2 + i for i in range(self.q)], dtype=int)

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.names == other.names

    @classmethod
    def from_names(cls, names) -> "ParamLayout":
        names = list(names)
        fixed = [n[5:] for n in names if n.startswith("beta_")]
        surv = [n[6:] for n in names if n.startswith("gamma_")]
        q = sum(1 for n in names if n.startswith("logL_"))
        if "log_phi" in names:
            layout = cls(fixed, surv, q, "weibull")
        else:
            layout = cls(fixed, surv, q, "pspline", sum(1 for n in names if n.startswith("bh_")))
        if list(layout.names) != names:
            raise ValueError("parameter names do not follow the expected layout")
        return layout

    # covariance <-> log-Cholesky
    def chol_factor(self, theta) -> np.ndarray:
        """Lower Cholesky factor(s); ``theta`` may be ``(P,)`` or ``(D, P)``."""
        theta = np.asarray(theta, dtype=float)
        v = theta[..., self.chol]
        L = np.zeros(v.shape[:-1] + (self.q, self.q))
        L[..., self._tril[0], self._tril[1]] = v
        d = np.arange(self.q)
        L[..., d, d] = np.exp(L[..., d, d])
        return L

    def covariance(self, theta) -> np.ndarray:
        L = self.chol_factor(theta)
        return L @ np.swapaxes(L, -1, -2)

    def chol_params(self, Sigma) -> np.ndarray:
        L = np.linalg.cholesky(np.asarray(Sigma, dtype=float))
        v = L[..., self._tril[0], self._tril[1]].copy()
        v[..., self._diag_pos] = np.log(v[..., self._diag_pos])
        return v

    @property
    def constrained_names(self) -> tuple[str, ...]:
        out = [f"beta_{c}" for c in self.fixed] + [f"gamma_{c}" for c in self.surv] + ["alpha"]
        if self.baseline == "weibull":
            out += ["phi", "shape"]
        else:
            out += [f"bh_{j + 1}" for j in range(self.n_basis)] + ["tau"]
        out.append("sigma_y")
        out += [f"Sigma_{i + 1}_{j + 1}" for i in range(self.q) for j in range(i + 1)]
        return tuple(out)

    def to_constrained(self, theta) -> np.ndarray:
        """Map unconstrained draws ``(D, P)`` (or ``(P,)``) to the natural scale,
        columns ordered as :attr:`constrained_names`."""
        theta = np.asarray(theta, dtype=float)
        out = theta[..., :self.log_sigma_y + 1].copy()
        if self.baseline == "weibull":
            out[..., self.base] = np.exp(out[..., self.base])
        else:
            out[..., self.base.stop - 1] = np.exp(out[..., self.base.stop - 1])
        out[..., self.log_sigma_y] = np.exp(out[..., self.log_sigma_y])
        Sigma = self.covariance(theta)
        return np.concatenate([out, Sigma[..., self._tril[0], self._tril[1]]], axis=-1)

    def from_constrained(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = values[..., :self.log_sigma_y + 1].copy()
        if self.baseline == "weibull":
            out[..., self.base] = np.log(out[..., self.base])
        else:
            out[..., self.base.stop - 1] = np.log(out[..., self.base.stop - 1])
        out[..., self.log_sigma_y] = np.log(out[..., self.log_sigma_y])
        tri = values[..., self.log_sigma_y + 1:]
        S = np.zeros(tri.shape[:-1] + (self.q, self.q))
        S[..., self._tril[0], self._tril[1]] = tri
        S = S + np.swapaxes(np.tril(S, -1), -1, -2)
        return np.concatenate([out, self.chol_params(S)], axis=-1)

    def log_jacobian_chol(self, theta) -> float:
        """log |d Sigma / d (log-Cholesky params)|."""
        v = np.asarray(theta, dtype=float)[..., self.chol]
        logdiag = v[..., self._diag_pos]
        powers = self.q - np.arange(self.q) + 1.0
        return self.q * math.log(2.0) + np.sum(powers * logdiag, axis=-1)


def _locf(times: np.ndarray, values: np.ndarray, at: np.ndarray) -> np.ndarray:
    if times.size == 0:
        return np.zeros_like(at)
    idx = np.searchsorted(times, at, side="right") - 1
    return values[np.clip(idx, 0, times.size - 1)]


class JointModel:
    """A :class:`ModelSpec` compiled against one dataset for fast evaluation.

    ``b`` arguments are ``(n_subjects, q)`` arrays in dataset order.
    """

    def __init__(self, spec: ModelSpec, dataset: JointDataset):
        if spec.ns_basis is None:
            spec = spec.resolved(dataset)
        if spec.baseline == "pspline" and spec.baseline_span is None:
            spec = spec.resolved(dataset)
        self.spec = spec
        self.layout = spec.layout()
        self.dataset = dataset
        self.ids = tuple(dataset.ids)
        self.n = n = len(dataset)
        fixed = spec.fixed_columns
        self.p = p = len(fixed)
        self.re_idx = np.array([fixed.index(c) for c in spec.re_columns], dtype=int)
        self.q = q = self.re_idx.size
        self.r = len(spec.survival_covariates)

        basis = spec.ns_basis
        covs = spec.longitudinal_covariates

        def design(t, subject=None, at=None):
            cols = [np.ones((t.size, 1)), basis.evaluate(t)]
            for c in covs:
                src = subject.covariates[c]
                cols.append((src if at is None else _locf(subject.times, src, at))[:, None])
            return np.concatenate(cols, axis=1)

        X_rows, y, sid = [], [], []
        for i, s in enumerate(dataset):
            if s.n_obs:
                X_rows.append(design(s.times, s))
                y.append(s.values)
                sid.append(np.full(s.n_obs, i))
        self.X = np.concatenate(X_rows) if X_rows else np.empty((0, p))
        self.y = np.concatenate(y) if y else np.empty(0)
        self.sid = np.concatenate(sid) if sid else np.empty(0, dtype=int)
        self.N = self.y.size
        self.nobs = np.bincount(self.sid, minlength=n).astype(float)
        Z = self.X[:, self.re_idx]
        self.ZtZ = np.zeros((n, q, q))
        np.add.at(self.ZtZ, self.sid, Z[:, :, None] * Z[:, None, :])

        self.T = np.array([s.survival.observed_time for s in dataset], dtype=float)
        self.delta = np.array([s.survival.event for s in dataset], dtype=float)
        self.W = np.array([[s.survival.baseline_covariates[c] for c in spec.survival_covariates]
                           for s in dataset], dtype=float).reshape(n, self.r)

        self.hazard_basis = spec.baseline_basis
        breaks = list(basis.interior_knots) + list(basis.boundary_knots)
        if self.hazard_basis is not None:
            breaks += list(self.hazard_basis.interior_knots)
        nodes, weights = [], []
        for Ti in self.T:
            nd, wt = composite_nodes(segment_edges(Ti, breaks))
            nodes.append(nd)
            weights.append(wt)
        Q = max((nd.size for nd in nodes), default=1)
        self.s_q = np.empty((n, Q))
        self.w_q = np.zeros((n, Q))
        for i, (nd, wt) in enumerate(zip(nodes, weights)):
            self.s_q[i, :nd.size] = nd
            self.s_q[i, nd.size:] = nd[-1]
            self.w_q[i, :nd.size] = wt
        self.X_T = np.empty((n, p))
        self.X_q = np.empty((n, Q, p))
        for i, s in enumerate(dataset):
            self.X_T[i] = design(self.T[i:i + 1], s, self.T[i:i + 1])[0]
            self.X_q[i] = design(self.s_q[i], s, self.s_q[i])
        self.log_T = np.log(self.T)
        self.log_s_q = np.log(self.s_q)
        if self.hazard_basis is not None:
            nb = self.hazard_basis.n_basis
            self.B_T = self.hazard_basis.evaluate(self.T).reshape(n, nb)
            self.B_q = self.hazard_basis.evaluate(self.s_q.ravel()).reshape(n, Q, nb)
            self._Bq_flat = self.B_q.reshape(n * Q, nb)
            self.penalty = second_difference_penalty(nb)
            self.penalty_eig = second_difference_spectrum(nb)

    # linear predictors -------------------------------------------------
    def subject_coef(self, beta, b) -> np.ndarray:
        C = np.repeat(np.asarray(beta, dtype=float)[None, :], self.n, axis=0)
        if self.n:
            C[:, self.re_idx] += b
        return C

    def predictors(self, beta, b):
        """``(mu, eta_T, eta_q)``: marker means at observations, true trajectory
        at the event time and at the quadrature nodes."""
        C = self.subject_coef(beta, b)
        mu = np.einsum("ij,ij->i", self.X, C[self.sid])
        eta_T = np.einsum("ij,ij->i", self.X_T, C)
        eta_q = np.matmul(self.X_q, C[:, :, None])[:, :, 0]
        return mu, eta_T, eta_q

    # per-subject likelihood terms --------------------------------------
    def long_terms(self, mu, sigma_y: float) -> np.ndarray:
        r2 = np.bincount(self.sid, weights=(self.y - mu) ** 2, minlength=self.n)
        return -0.5 * self.nobs * (LOG_2PI + 2.0 * math.log(sigma_y)) - 0.5 * r2 / sigma_y ** 2

    def log_baseline(self, base):
        """``log h0`` at the event times and at the quadrature nodes."""
        base = np.asarray(base, dtype=float)
        if self.spec.baseline == "weibull":
            log_phi, log_k = base
            k = math.exp(log_k)
            const = log_phi + log_k
            return const + (k - 1.0) * self.log_T, const + (k - 1.0) * self.log_s_q
        coef = base[:-1]
        return self.B_T @ coef, (self._Bq_flat @ coef).reshape(self.s_q.shape)

    def surv_terms(self, eta_T, eta_q, gamma, alpha: float, base) -> np.ndarray:
        if not self.spec.survival:
            return np.zeros(self.n)
        lh0_T, lh0_q = self.log_baseline(base)
        lin = self.W @ np.asarray(gamma, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            log_h_T = lh0_T + lin + alpha * eta_T
            H = np.sum(self.w_q * np.exp(lh0_q + lin[:, None] + alpha * eta_q), axis=1)
            out = self.delta * log_h_T - H
        out[~np.isfinite(out)] = -np.inf
        return out

    def cumulative_hazards(self, eta_q, gamma, alpha: float, base) -> np.ndarray:
        """``H_i(T_i)`` for every subject."""
        _, lh0_q = self.log_baseline(base)
        lin = self.W @ np.asarray(gamma, dtype=float)
        with np.errstate(over="ignore"):
            return np.sum(self.w_q * np.exp(lh0_q + lin[:, None] + alpha * eta_q), axis=1)

    def re_terms(self, b, L) -> np.ndarray:
        if self.n == 0:
            return np.empty(0)
        z = np.linalg.solve(L, np.asarray(b, dtype=float).T).T
        return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(np.diag(L))) - 0.5 * self.q * LOG_2PI

    # full-vector interface ---------------------------------------------
    def _split(self, theta):
        lay = self.layout
        theta = np.asarray(theta, dtype=float)
        return (theta[lay.beta], theta[lay.gamma], float(theta[lay.alpha]), theta[lay.base],
                math.exp(theta[lay.log_sigma_y]), lay.chol_factor(theta))

    def loglik_longitudinal(self, theta, b, per_subject: bool = False):
        beta, _, _, _, sigma_y, _ = self._split(theta)
        mu, _, _ = self.predictors(beta, b)
        out = self.long_terms(mu, sigma_y)
        return out if per_subject else float(out.sum())

    def loglik_survival(self, theta, b, per_subject: bool = False):
        beta, gamma, alpha, base, _, _ = self._split(theta)
        _, eta_T, eta_q = self.predictors(beta, b)
        out = self.surv_terms(eta_T, eta_q, gamma, alpha, base)
        return out if per_subject else float(out.sum())

    def log_random_effects(self, theta, b, per_subject: bool = False):
        out = self.re_terms(b, self._split(theta)[5])
        return out if per_subject else float(out.sum())

    def log_prior_parts(self, theta) -> dict[str, float]:
        """Unscaled prior log density per block (Jacobians included)."""
        return prior_parts(self.spec, self.layout, theta,
                           getattr(self, "penalty", None), getattr(self, "penalty_eig", None))

    def log_prior(self, theta, S: int = 1) -> float:
        if S < 1:
            raise ValueError("S must be >= 1")
        return sum(self.log_prior_parts(theta).values()) / S

    def log_posterior(self, theta, b, S: int = 1) -> float:
        return (self.loglik_longitudinal(theta, b) + self.loglik_survival(theta, b)
                + self.log_random_effects(theta, b) + self.log_prior(theta, S))


def _normal_logpdf(x, sd):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return -x.size * (0.5 * LOG_2PI + math.log(sd)) - 0.5 * float(x @ x) / (sd * sd)


@lru_cache(maxsize=64)
def _iw_const(nu: float, q: int, scale: float) -> float:
    return (0.5 * nu * q * math.log(scale) - 0.5 * nu * q * math.log(2.0)
            - float(multigammaln(0.5 * nu, q)))


def prior_parts(spec: ModelSpec, layout: ParamLayout, theta, penalty=None, penalty_eig=None) -> dict[str, float]:
    pr = spec.priors
    theta = np.asarray(theta, dtype=float)
    parts = {}
    parts["coef"] = _normal_logpdf(theta[:layout.alpha + 1], pr.coef_sd)

    base = theta[layout.base]
    if layout.baseline == "weibull":
        parts["baseline"] = _normal_logpdf(base[0], pr.log_phi_sd) + _normal_logpdf(base[1], pr.log_shape_sd)
    else:
        if penalty is None:
            penalty = second_difference_penalty(layout.n_basis)
            penalty_eig = second_difference_spectrum(layout.n_basis)
        coef, log_tau = base[:-1], base[-1]
        tau = math.exp(log_tau)
        prec = tau * penalty + pr.spline_ridge * np.eye(coef.size)
        logdet = float(np.sum(np.log(tau * penalty_eig + pr.spline_ridge)))
        parts["baseline"] = 0.5 * logdet - 0.5 * coef @ prec @ coef - 0.5 * coef.size * LOG_2PI
        a, r = pr.tau_shape, pr.tau_rate
        parts["smoothing"] = a * math.log(r) - gammaln(a) + a * log_tau - r * tau

    # sigma_y^2 ~ IG(shape, rate), parameterised by log sigma_y
    a, r = pr.sigma2_shape, pr.sigma2_rate
    ls = theta[layout.log_sigma_y]
    parts["sigma_y"] = (a * math.log(r) - gammaln(a) - (a + 1.0) * 2.0 * ls - r * math.exp(-2.0 * ls)
                        + math.log(2.0) + 2.0 * ls)

    # Sigma_b ~ IW(nu, Psi), parameterised by its log-Cholesky factor
    q = layout.q
    nu = pr.re_df if pr.re_df is not None else q + 1.0
    L = layout.chol_factor(theta)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    Linv = np.linalg.inv(L)
    tr = pr.re_scale * float(np.sum(Linv * Linv))
    parts["Sigma_b"] = (_iw_const(float(nu), q, float(pr.re_scale))
                        - 0.5 * (nu + q + 1.0) * logdet - 0.5 * tr + float(layout.log_jacobian_chol(theta)))
    return {k: float(v) for k, v in parts.items()}


# module-level conveniences ---------------------------------------------
def loglik_longitudinal(spec: ModelSpec, theta, b, dataset: JointDataset) -> float:
    return JointModel(spec, dataset).loglik_longitudinal(theta, b)


def loglik_survival(spec: ModelSpec, theta, b, dataset: JointDataset, per_subject: bool = False):
    return JointModel(spec, dataset).loglik_survival(theta, b, per_subject=per_subject)


def log_prior(spec: ModelSpec, theta, S: int = 1) -> float:
    if S < 1:
        raise ValueError("S must be >= 1")
    return sum(prior_parts(spec, spec.layout(), theta).values()) / S


def log_posterior(spec: ModelSpec, theta, b, dataset: JointDataset, S: int = 1) -> float:
    return JointModel(spec, dataset).log_posterior(theta, b, S)


def truth_vector(layout: ParamLayout, values: Mapping[str, float]) -> np.ndarray:
    """Unconstrained vector from natural-scale values keyed by
    :attr:`ParamLayout.constrained_names` (missing baseline keys are an error)."""
    return layout.from_constrained(np.array([values[k] for k in layout.constrained_names]))
