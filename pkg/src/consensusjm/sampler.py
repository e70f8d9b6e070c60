"""Metropolis-within-Gibbs sampler for one subsample's subposterior.

One iteration runs, in order:

1. random-walk Metropolis on the fixed effects ``beta``;
2. random-walk Metropolis on the survival block (``gamma``, ``alpha`` and the
   baseline coefficients) jointly;
3. per-subject random-walk Metropolis on ``b_i`` (all subjects in one
   vectorised sweep, independent accept/reject);
4. an interweaving draw of the ``beta`` entries that carry random effects,
   exact given ``c_i = beta + b_i``;
5. the conjugate inverse-gamma draw of ``sigma_y^2``;
6. the inverse-Wishart draw of ``Sigma_b`` (exact when ``S = 1``; for
   ``S > 1`` a Metropolis correction accounts for the log-Cholesky Jacobian
   that the power-scaled prior leaves behind);
7. P-spline baseline only: a Gamma draw of the smoothing precision with a
   Metropolis correction for the ridge term.

Proposal scales adapt (Robbins-Monro towards 0.234, or 0.44 for scalar
blocks) during warm-up only; block proposal covariances are re-estimated from
the warm-up history every ``adapt_window`` iterations.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import invwishart

from .data import JointDataset
from .errors import ChainFailure, NumericalError, SingularDesignError
from .model import JointModel, ModelSpec

__all__ = ["ChainConfig", "ChainDraws", "chain_seed", "initialize", "run_chain", "run_subsample"]

JITTER_SD = 0.1
# random-walk moves of the survival block per iteration (cheap: the marker
# trajectory is cached)
SURVIVAL_SUBSTEPS = 5


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 3
    n_iter: int = 3500
    n_warmup: int = 500
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    keep_random_effects: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.n_warmup < self.n_iter:
            raise ValueError("need 0 <= n_warmup < n_iter")
        if self.thin < 1 or (self.n_iter - self.n_warmup) % self.thin:
            raise ValueError("thin must divide n_iter - n_warmup")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.n_warmup) // self.thin


@dataclass
class ChainDraws:
    """Retained draws of one chain on the unconstrained scale."""

    names: tuple[str, ...]
    draws: np.ndarray
    subsample: int = 0
    chain: int = 0
    acceptance: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    re_ids: tuple[str, ...] = ()
    re_mean: np.ndarray | None = None
    re_sd: np.ndarray | None = None
    re_draws: np.ndarray | None = None
    scales_warmup_end: dict[str, np.ndarray] = field(default_factory=dict)
    scales_final: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def chain_seed(seed: int, subsample: int, chain: int, stream: int) -> np.random.SeedSequence:
    """Seed for one stream of one chain: ``stream`` 0 initialises, 1 samples."""
    return np.random.SeedSequence(seed, spawn_key=(1, subsample, chain, stream))


# initial values ---------------------------------------------------------
def _weibull_profile_fit(T, delta):
    """Censored Weibull MLE without covariates: (log phi, log shape)."""
    d = float(delta.sum())
    if T.size == 0:
        return 0.0, 0.0
    if d == 0:
        return math.log(0.5 / T.sum()), 0.0
    logT = np.log(T)
    sdl = float(delta @ logT)

    def negll(log_k):
        k = math.exp(log_k)
        phi = d / np.sum(T ** k)
        return -(d * math.log(phi) + d * log_k + (k - 1.0) * sdl - d)

    res = minimize_scalar(negll, bounds=(-3.0, 3.0), method="bounded")
    log_k = float(res.x)
    return math.log(d / np.sum(T ** math.exp(log_k))), log_k


def initialize(spec: ModelSpec, data: JointDataset, chain: int, seed: int, subsample: int = 0,
               model: JointModel | None = None):
    """Initial ``(theta, b)`` for one chain: least-squares ``beta``, zero
    survival coefficients, residual-SD ``sigma_y``, identity ``Sigma_b``,
    a censored Weibull fit for the baseline, ``b = 0``; then every
    unconstrained coordinate is jittered by N(0, 0.1^2) from the chain's own
    stream."""
    m = model if model is not None else JointModel(spec, data)
    lay = m.layout
    theta = np.zeros(len(lay))
    if m.N:
        if np.linalg.matrix_rank(m.X) < m.p:
            raise SingularDesignError("fixed-effects design matrix is rank deficient")
        beta, *_ = np.linalg.lstsq(m.X, m.y, rcond=None)
        theta[lay.beta] = beta
        resid = m.y - m.X @ beta
        dof = m.N - m.p
        sd = math.sqrt(float(resid @ resid) / dof) if dof > 0 else 1.0
        theta[lay.log_sigma_y] = math.log(max(sd, 1e-8))
    log_phi, log_k = _weibull_profile_fit(m.T, m.delta)
    if lay.baseline == "weibull":
        theta[lay.base] = (log_phi, log_k)
    else:
        hb = m.hazard_basis
        lo, hi = hb.span
        grid = np.linspace(lo + 0.02 * (hi - lo), hi, 60)
        target = log_phi + log_k + (math.exp(log_k) - 1.0) * np.log(grid)
        coef, *_ = np.linalg.lstsq(hb.evaluate(grid), target, rcond=None)
        theta[lay.base] = np.append(coef, 0.0)
    theta[lay.chol] = lay.chol_params(np.eye(lay.q))
    rng = np.random.default_rng(chain_seed(seed, subsample, chain, 0))
    theta += rng.normal(0.0, JITTER_SD, theta.size)
    b = np.zeros((m.n, m.q))
    if not spec.survival:
        theta[lay.alpha] = 0.0
    elif m.delta.sum() > 0:
        # jitter on gamma (uncentred covariates) can move the hazard by orders
        # of magnitude; re-anchor the baseline level so expected events match
        _, eta_T, eta_q = m.predictors(theta[lay.beta], b)
        H = m.cumulative_hazards(eta_q, theta[lay.gamma], theta[lay.alpha], theta[lay.base])
        shift = math.log(m.delta.sum() / H.sum())
        if lay.baseline == "weibull":
            theta[lay.base.start] += shift
        else:
            theta[lay.base.start:lay.base.stop - 1] += shift
    return theta, b


# adaptive random-walk block --------------------------------------------
class _RWBlock:
    def __init__(self, name, cov, n_warmup, window):
        cov = np.atleast_2d(cov)
        self.name = name
        self.d = cov.shape[0]
        self.target = 0.44 if self.d == 1 else 0.234
        self.base_log_scale = math.log(2.38 / math.sqrt(self.d))
        self.log_scale = self.base_log_scale
        self.L = _safe_chol(cov)
        self.n_warmup = n_warmup
        self.window = window
        self.history = []
        self.t_reset = 0
        self.accepted = 0
        self.tried = 0

    def propose(self, rng, x):
        return x + math.exp(self.log_scale) * (self.L @ rng.standard_normal(self.d))

    def update(self, it, accepted, x, refresh=None):
        """Record the outcome; during warm-up adapt the scale and, every
        ``window`` iterations, the proposal covariance (empirical, or from
        ``refresh()`` when given)."""
        if it >= self.n_warmup:
            self.tried += 1
            self.accepted += accepted
            return
        self.log_scale += (float(accepted) - self.target) * (it - self.t_reset + 1) ** -0.6
        self.log_scale = min(max(self.log_scale, -20.0), 5.0)
        n = it + 1
        if refresh is not None:
            if n % self.window == 0:
                self.L = _safe_chol(refresh())
            return
        self.history.append(x.copy())
        if n % self.window == 0 and n >= 2 * self.window:
            H = np.asarray(self.history[len(self.history) // 2:])
            if H.shape[0] > self.d + 1:
                cov = np.atleast_2d(np.cov(H.T))
                if np.all(np.isfinite(cov)) and np.all(np.diag(cov) > 0):
                    L = _safe_chol(cov + 1e-10 * np.diag(np.diag(cov)), None)
                    if L is not None:
                        self.L = L
                        self.log_scale = self.base_log_scale
                        self.t_reset = n

    @property
    def rate(self):
        return self.accepted / self.tried if self.tried else float("nan")


def _safe_chol(cov, fallback="diag"):
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        if fallback is None:
            return None
        d = np.abs(np.diag(cov))
        d[~(d > 0)] = 1e-2
        return np.diag(np.sqrt(d))


def _neg_inverse(H):
    """Covariance from a (negative definite) curvature matrix."""
    H = 0.5 * (H + H.T)
    try:
        return np.linalg.inv(np.linalg.cholesky(-H)).T @ np.linalg.inv(np.linalg.cholesky(-H))
    except np.linalg.LinAlgError:
        d = -np.diag(H)
        d[~(d > 0)] = 1.0
        return np.diag(1.0 / d)


# the sampler -----------------------------------------------------------
class _Sampler:
    def __init__(self, model: JointModel, config: ChainConfig, theta, b, S, rng):
        self.m = model
        self.lay = model.layout
        self.cfg = config
        self.S = S
        self.rng = rng
        self.theta = np.array(theta, dtype=float)
        self.b = np.array(b, dtype=float)
        pr = model.spec.priors
        self.pr = pr
        self.nu0 = pr.re_df if pr.re_df is not None else self.lay.q + 1.0
        self.nu_S = (self.nu0 + self.lay.q + 1.0) / S - self.lay.q - 1.0
        if model.n and self.nu_S + model.n <= self.lay.q - 1:
            raise NumericalError("too few subjects for a proper random-effects covariance update")
        self._refresh()
        if not math.isfinite(self.logpost()):
            raise NumericalError("log posterior is not finite at the initial values")
        nw, win = config.n_warmup, config.adapt_window
        self.blocks = {"beta": _RWBlock("beta", self._beta_cov(), nw, win)}
        if model.spec.survival:
            self.survival_idx = np.arange(len(self.lay))[self.lay.survival_block]
            if self.lay.baseline == "pspline":
                self.survival_idx = self.survival_idx[:-1]  # log tau has its own Gibbs step
            self.blocks["survival"] = _RWBlock("survival", self._survival_cov(), nw, win)
        q = self.lay.q
        self.b_log_scale = np.full(model.n, math.log(2.38 / math.sqrt(q)))
        self.b_target = 0.44 if q == 1 else 0.234
        self.b_acc = np.zeros(model.n)
        self.ind_acc = np.zeros(model.n)
        self.gibbs_acc = {"Sigma_b": [0, 0], "Sigma_b_nc": [0, 0], "tau": [0, 0]}

    # caches -------------------------------------------------------------
    def _refresh(self):
        m, th = self.m, self.theta
        self.mu, self.eta_T, self.eta_q = m.predictors(th[self.lay.beta], self.b)
        self.sigma_y = math.exp(th[self.lay.log_sigma_y])
        self.L = self.lay.chol_factor(th)
        self.long = m.long_terms(self.mu, self.sigma_y)
        self.surv = self._surv(th, self.eta_T, self.eta_q)
        self.re = m.re_terms(self.b, self.L)
        self.lprior = m.log_prior(th, self.S)

    def _surv(self, th, eta_T, eta_q):
        lay = self.lay
        return self.m.surv_terms(eta_T, eta_q, th[lay.gamma], th[lay.alpha], th[lay.base])

    def logpost(self):
        return float(self.long.sum() + self.surv.sum() + self.re.sum() + self.lprior)

    # proposal covariances from analytic curvature ------------------------
    def _hazard_at_nodes(self):
        lay, th, m = self.lay, self.theta, self.m
        lh0_T, lh0_q = m.log_baseline(th[lay.base])
        lin = m.W @ th[lay.gamma]
        return m.w_q * np.exp(lh0_q + lin[:, None] + th[lay.alpha] * self.eta_q)

    def _beta_cov(self):
        m, lay = self.m, self.lay
        p = m.p
        H = -np.eye(p) / (self.pr.coef_sd ** 2 * self.S)
        if m.N:
            H -= m.X.T @ m.X / self.sigma_y ** 2
        if m.n and m.spec.survival:
            wh = self._hazard_at_nodes()
            a = self.theta[lay.alpha]
            H -= a * a * np.einsum("iq,iqj,iqk->jk", wh, m.X_q, m.X_q)
        return _neg_inverse(H)

    def _survival_cov(self):
        m, lay, th = self.m, self.lay, self.theta
        idx = self.survival_idx
        d = idx.size
        H = np.zeros((d, d))
        r = m.r
        if m.n:
            wh = self._hazard_at_nodes()
            n, Q = wh.shape
            feats = [np.repeat(m.W[:, None, :], Q, axis=1), self.eta_q[:, :, None]]
            if lay.baseline == "weibull":
                k = math.exp(th[lay.base][1])
                feats += [np.ones((n, Q, 1)), (1.0 + k * m.log_s_q)[:, :, None]]
            else:
                feats.append(m.B_q)
            F = np.concatenate(feats, axis=2)
            H -= np.einsum("iq,iqj,iqk->jk", wh, F, F)
            if lay.baseline == "weibull":
                # log h is not linear in log shape
                H[r + 2, r + 2] += k * (float(m.delta @ m.log_T) - float(np.sum(wh * m.log_s_q)))
        H[:r + 1, :r + 1] -= np.eye(r + 1) / (self.pr.coef_sd ** 2 * self.S)
        if lay.baseline == "weibull":
            H[r + 1, r + 1] -= 1.0 / (self.pr.log_phi_sd ** 2 * self.S)
            H[r + 2, r + 2] -= 1.0 / (self.pr.log_shape_sd ** 2 * self.S)
        else:
            tau = math.exp(th[lay.base][-1])
            H[r + 1:, r + 1:] -= (tau * m.penalty + self.pr.spline_ridge * np.eye(m.penalty.shape[0])) / self.S
        return _neg_inverse(H)

    # steps ---------------------------------------------------------------
    def _accept(self, log_ratio):
        return bool(np.isfinite(log_ratio) and math.log(self.rng.random()) < log_ratio)

    def step_beta(self, it):
        lay, m = self.lay, self.m
        blk = self.blocks["beta"]
        prop = self.theta.copy()
        prop[lay.beta] = blk.propose(self.rng, self.theta[lay.beta])
        mu, eT, eq = m.predictors(prop[lay.beta], self.b)
        long = m.long_terms(mu, self.sigma_y)
        surv = self._surv(prop, eT, eq)
        lprior = m.log_prior(prop, self.S)
        old = self.long.sum() + self.surv.sum() + self.lprior
        ok = self._accept(long.sum() + surv.sum() + lprior - old)
        if ok:
            self.theta, self.mu, self.eta_T, self.eta_q = prop, mu, eT, eq
            self.long, self.surv, self.lprior = long, surv, lprior
        blk.update(it, ok, self.theta[lay.beta], refresh=self._beta_cov)

    def step_survival(self, it):
        blk = self.blocks["survival"]
        idx = self.survival_idx
        prop = self.theta.copy()
        prop[idx] = blk.propose(self.rng, self.theta[idx])
        surv = self._surv(prop, self.eta_T, self.eta_q)
        lprior = self.m.log_prior(prop, self.S)
        ok = self._accept(surv.sum() + lprior - self.surv.sum() - self.lprior)
        if ok:
            self.theta, self.surv, self.lprior = prop, surv, lprior
        blk.update(it, ok, self.theta[idx], refresh=self._survival_cov)

    def step_random_effects(self, it):
        m = self.m
        if m.n == 0:
            return
        Linv = np.linalg.inv(self.L)
        prec = m.ZtZ / self.sigma_y ** 2 + (Linv.T @ Linv)[None]
        C = np.linalg.cholesky(np.linalg.inv(prec))
        z = self.rng.standard_normal(self.b.shape)
        step = np.exp(self.b_log_scale)[:, None] * np.einsum("ijk,ik->ij", C, z)
        prop = self.b + step
        mu, eT, eq = m.predictors(self.theta[self.lay.beta], prop)
        long = m.long_terms(mu, self.sigma_y)
        surv = self._surv(self.theta, eT, eq)
        re = m.re_terms(prop, self.L)
        diff = (long + surv + re) - (self.long + self.surv + self.re)
        u = self.rng.random(m.n)
        with np.errstate(divide="ignore"):
            acc = np.isfinite(diff) & (np.log(u) < diff)
        self.b[acc] = prop[acc]
        self.long[acc], self.surv[acc], self.re[acc] = long[acc], surv[acc], re[acc]
        self.eta_T[acc], self.eta_q[acc] = eT[acc], eq[acc]
        rows = acc[m.sid]
        self.mu[rows] = mu[rows]
        if it < self.cfg.n_warmup:
            self.b_log_scale += (acc - self.b_target) * (it + 1) ** -0.6
            np.clip(self.b_log_scale, -20.0, 5.0, out=self.b_log_scale)
        else:
            self.b_acc += acc

    def step_random_effects_conditional(self):
        """Independence proposal from the Gaussian full conditional of ``b_i``
        under the marker model alone; the survival term enters through the
        acceptance ratio."""
        m = self.m
        Linv = np.linalg.inv(self.L)
        prec = m.ZtZ / self.sigma_y ** 2 + (Linv.T @ Linv)[None]
        V = np.linalg.inv(prec)
        beta = self.theta[self.lay.beta]
        resid = m.y - m.X @ beta
        Z = m.X[:, m.re_idx]
        score = np.zeros((m.n, m.q))
        np.add.at(score, m.sid, Z * resid[:, None])
        mean = np.einsum("ijk,ik->ij", V, score) / self.sigma_y ** 2
        prop = mean + np.einsum("ijk,ik->ij", np.linalg.cholesky(V), self.rng.standard_normal(self.b.shape))
        mu, eT, eq = m.predictors(beta, prop)
        surv = self._surv(self.theta, eT, eq)
        diff = surv - self.surv
        u = self.rng.random(m.n)
        with np.errstate(divide="ignore", invalid="ignore"):
            acc = np.isfinite(diff) & (np.log(u) < diff)
        self.b[acc] = prop[acc]
        self.surv[acc] = surv[acc]
        self.eta_T[acc], self.eta_q[acc] = eT[acc], eq[acc]
        rows = acc[m.sid]
        self.mu[rows] = mu[rows]
        self.long = m.long_terms(self.mu, self.sigma_y)
        self.re = m.re_terms(self.b, self.L)
        self.ind_acc += acc

    def step_interweave(self):
        """Redraw the random-effect entries of beta holding c_i = beta + b_i fixed."""
        m, lay = self.m, self.lay
        ridx = np.arange(len(lay))[lay.beta][m.re_idx]
        beta_re = self.theta[ridx]
        c = self.b + beta_re
        Linv = np.linalg.inv(self.L)
        Sinv = Linv.T @ Linv
        prec = m.n * Sinv + np.eye(m.q) / (self.pr.coef_sd ** 2 * self.S)
        cov = np.linalg.inv(prec)
        mean = cov @ (Sinv @ c.sum(axis=0))
        new = mean + np.linalg.cholesky(cov) @ self.rng.standard_normal(m.q)
        self.theta[ridx] = new
        self.b = c - new
        self.re = m.re_terms(self.b, self.L)
        self.lprior = m.log_prior(self.theta, self.S)

    def step_sigma_y(self):
        m = self.m
        rss = float(np.sum((m.y - self.mu) ** 2))
        shape = self.pr.sigma2_shape / self.S + 0.5 * m.N
        rate = self.pr.sigma2_rate / self.S + 0.5 * rss
        sigma2 = rate / self.rng.gamma(shape)
        self.theta[self.lay.log_sigma_y] = 0.5 * math.log(sigma2)
        self.sigma_y = math.sqrt(sigma2)
        self.long = m.long_terms(self.mu, self.sigma_y)
        self.lprior = m.log_prior(self.theta, self.S)

    def step_sigma_b(self):
        m, lay = self.m, self.lay
        q = lay.q
        scale = self.pr.re_scale * np.eye(q) / self.S + self.b.T @ self.b
        df = self.nu_S + m.n
        Sigma = np.atleast_2d(invwishart.rvs(df=df, scale=scale, random_state=self.rng))
        new = self.theta.copy()
        try:
            new[lay.chol] = lay.chol_params(Sigma)
        except np.linalg.LinAlgError:
            return
        kappa = 1.0 / self.S - 1.0
        stats = self.gibbs_acc["Sigma_b"]
        stats[1] += 1
        if kappa != 0.0:
            log_ratio = kappa * (lay.log_jacobian_chol(new) - lay.log_jacobian_chol(self.theta))
            if not self._accept(log_ratio):
                return
        stats[0] += 1
        self.theta = new
        self.L = lay.chol_factor(new)
        self.re = m.re_terms(self.b, self.L)
        self.lprior = m.log_prior(self.theta, self.S)

    def step_sigma_b_noncentred(self):
        """Redraw the Cholesky factor holding ``z_i = L^-1 b_i`` fixed.

        Given ``z`` the marker model is linear in the entries of ``L``, so
        the proposal is their Gaussian least-squares conditional; prior,
        survival term and the log-diagonal Jacobian enter the acceptance
        ratio. Proposals with a non-positive diagonal are rejected.
        """
        m, lay = self.m, self.lay
        z = np.linalg.solve(self.L, self.b.T).T
        rows, cols = lay._tril
        Z = m.X[:, m.re_idx]
        F = np.concatenate([m.X, Z[:, rows] * z[m.sid][:, cols]], axis=1)
        s2 = self.sigma_y ** 2
        stats = self.gibbs_acc["Sigma_b_nc"]
        try:
            R = np.linalg.cholesky(F.T @ F / s2)
        except np.linalg.LinAlgError:
            return
        mean = np.linalg.solve(R.T, np.linalg.solve(R, F.T @ m.y / s2))
        draw = mean + np.linalg.solve(R.T, self.rng.standard_normal(mean.size))
        ell = draw[m.p:]
        stats[1] += 1
        diag = ell[lay._diag_pos]
        if np.any(diag <= 0):
            return
        new = self.theta.copy()
        v = ell.copy()
        v[lay._diag_pos] = np.log(diag)
        new[lay.beta] = draw[:m.p]
        new[lay.chol] = v
        L_new = lay.chol_factor(new)
        b_new = z @ L_new.T
        mu, eT, eq = m.predictors(new[lay.beta], b_new)
        surv = self._surv(new, eT, eq)
        lprior = m.log_prior(new, self.S)
        old_diag = np.diag(self.L)
        log_ratio = (surv.sum() + lprior - np.sum(np.log(diag))
                     - self.surv.sum() - self.lprior + np.sum(np.log(old_diag)))
        if not self._accept(log_ratio):
            return
        stats[0] += 1
        self.theta, self.b, self.L = new, b_new, L_new
        self.mu, self.eta_T, self.eta_q = mu, eT, eq
        self.long = m.long_terms(mu, self.sigma_y)
        self.surv, self.lprior = surv, lprior
        self.re = m.re_terms(self.b, self.L)

    def step_tau(self):
        m, lay, pr, S = self.m, self.lay, self.pr, self.S
        base = self.theta[lay.base]
        coef = base[:-1]
        eig = m.penalty_eig
        pos = eig > 1e-9 * eig.max()
        shape = (pr.tau_shape + 0.5 * pos.sum()) / S
        rate = (pr.tau_rate + 0.5 * float(coef @ m.penalty @ coef)) / S
        tau_new = self.rng.gamma(shape) / rate
        tau_old = math.exp(base[-1])

        def log_w(tau):
            return 0.5 / S * float(np.sum(np.log1p(pr.spline_ridge / (tau * eig[pos]))))

        stats = self.gibbs_acc["tau"]
        stats[1] += 1
        if not (tau_new > 0) or not self._accept(log_w(tau_new) - log_w(tau_old)):
            return
        stats[0] += 1
        self.theta[lay.base.stop - 1] = math.log(tau_new)
        self.lprior = m.log_prior(self.theta, S)

    # driver ----------------------------------------------------------------
    def scales(self):
        out = {k: np.array([blk.log_scale]) for k, blk in self.blocks.items()}
        out.update({f"{k}_chol": blk.L.copy() for k, blk in self.blocks.items()})
        out["b"] = self.b_log_scale.copy()
        return out

    def run(self):
        cfg, m = self.cfg, self.m
        draws = np.empty((cfg.n_draws, len(self.lay)))
        keep_b = np.empty((cfg.n_draws,) + self.b.shape) if cfg.keep_random_effects else None
        b_mean = np.zeros_like(self.b)
        b_m2 = np.zeros_like(self.b)
        row = 0
        scales_warm = self.scales()
        for it in range(cfg.n_iter):
            if it == cfg.n_warmup:
                scales_warm = self.scales()
            self.step_beta(it)
            if m.spec.survival:
                for _ in range(SURVIVAL_SUBSTEPS):
                    self.step_survival(it)
            self.step_random_effects(it)
            if m.n:
                self.step_interweave()
            self.step_sigma_y()
            self.step_sigma_b()
            if m.N:
                self.step_sigma_b_noncentred()
            if m.n:
                self.step_random_effects_conditional()
            if self.lay.baseline == "pspline" and m.spec.survival:
                self.step_tau()
            if it >= cfg.n_warmup and (it - cfg.n_warmup) % cfg.thin == 0:
                draws[row] = self.theta
                if keep_b is not None:
                    keep_b[row] = self.b
                delta = self.b - b_mean
                b_mean += delta / (row + 1)
                b_m2 += delta * (self.b - b_mean)
                row += 1
        if not np.all(np.isfinite(draws)):
            raise NumericalError("non-finite draws")
        post = cfg.n_iter - cfg.n_warmup
        acc = {k: blk.rate for k, blk in self.blocks.items()}
        acc["b"] = float(np.mean(self.b_acc / post)) if m.n else float("nan")
        if m.n:
            acc["b_conditional"] = float(np.mean(self.ind_acc)) / cfg.n_iter
        for k, (a, t) in self.gibbs_acc.items():
            if t:
                acc[k] = a / t
        dead = [k for k, v in acc.items() if v == 0.0]
        if dead:
            warnings.warn(f"zero post-warmup acceptance in block(s) {', '.join(dead)}", RuntimeWarning)
        b_sd = np.sqrt(b_m2 / (row - 1)) if row > 1 else np.zeros_like(self.b)
        return draws, acc, b_mean, b_sd, keep_b, scales_warm, self.scales()


def run_chain(spec: ModelSpec, data: JointDataset, config: ChainConfig, chain: int = 0,
              S: int = 1, subsample: int = 0, model: JointModel | None = None) -> ChainDraws:
    """Run one chain on ``data`` targeting the subposterior with prior power ``1/S``.

    ``spec`` should already be resolved on the full dataset; an unresolved
    spec gets its spline knots from ``data``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    t0 = time.perf_counter()
    m = model if model is not None else JointModel(spec.resolved(data), data)
    theta, b = initialize(m.spec, data, chain, config.seed, subsample, model=m)
    rng = np.random.default_rng(chain_seed(config.seed, subsample, chain, 1))
    sampler = _Sampler(m, config, theta, b, S, rng)
    draws, acc, b_mean, b_sd, keep_b, sw, sf = sampler.run()
    return ChainDraws(
        names=m.layout.names, draws=draws, subsample=subsample, chain=chain, acceptance=acc,
        seconds=time.perf_counter() - t0, re_ids=m.ids, re_mean=b_mean, re_sd=b_sd,
        re_draws=keep_b, scales_warmup_end=sw, scales_final=sf)


def run_subsample(spec: ModelSpec, data: JointDataset, config: ChainConfig, S: int = 1,
                  subsample: int = 0, core_cap: int | None = None) -> list[ChainDraws]:
    """All ``config.n_chains`` chains of one subsample, run concurrently
    through the executor (one process per chain, at most ``core_cap``)."""
    from .executor import JobPlan, schedule

    spec = spec.resolved(data)
    jobs = [(subsample, k) for k in range(config.n_chains)]
    if config.n_chains == 1:
        return [run_chain(spec, data, config, 0, S, subsample)]
    plan = JobPlan(jobs, core_cap if core_cap is not None else len(jobs))
    report, results = schedule(plan, _ChainJob(spec, {subsample: data}, config, S))
    failed = [(key, err) for key, err in report.failures.items()]
    if failed:
        (s, k), err = failed[0]
        raise ChainFailure(s, k, err)
    return [results[key] for key in jobs]


class _ChainJob:
    """Picklable job runner: ``(s, k) -> ChainDraws``."""

    def __init__(self, spec, data_by_subsample, config, S):
        self.spec = spec
        self.data = data_by_subsample
        self.config = config
        self.S = S

    def __call__(self, job):
        s, k = job
        return run_chain(self.spec, self.data[s], self.config, k, self.S, s)
