"""Multinomial log-normal scale-conditional estimand.

Model, with ``psi`` the ``D x N`` log abundances::

    Y_.j ~ Multinomial(closure(exp psi_.j))
    psi  = B X + E,   E ~ MN(0, Omega, I_N)
    B    ~ MN(M, Omega, Gamma),   Omega ~ IW(nu, Xi)

The log-ratio coordinates ``psi_par = F psi`` have a matrix-T prior
``T(nu - 1, F M X, F Xi F^T, I + X^T Gamma X)`` (one row is integrated out, so
the inverse-Wishart dof drops by one). Its posterior is approximated by a
Laplace fit around the MAP. Given full ``psi`` draws the regression
parameters are conjugate and drawn exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import gammaln, logsumexp

from . import coda, decisions
from .numkit import (
    MatrixTParams,
    ParameterError,
    as_generator,
    as_rng,
    cholesky,
    matrix_t_logpdf,
    sample_inverse_wishart_batch,
)
from .scale_models import sample_log_scale

log = logging.getLogger(__name__)

MAX_LAPLACE_DIM = 4000


class MlnFitError(RuntimeError):
    """The MAP search failed; ``diagnostics`` holds the optimizer state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class MlnPrior:
    M: np.ndarray  # D x Q
    Gamma: np.ndarray  # Q x Q
    nu: float
    Xi: np.ndarray  # D x D
    X: np.ndarray  # Q x N

    def __post_init__(self):
        for name in ("M", "Gamma", "Xi"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        object.__setattr__(self, "X", X)
        D, Q = self.M.shape
        if self.Gamma.shape != (Q, Q):
            raise ParameterError(f"Gamma must be {Q}x{Q}")
        if self.Xi.shape != (D, D):
            raise ParameterError(f"Xi must be {D}x{D}")
        if X.shape[0] != Q:
            raise ParameterError(f"X must have {Q} rows")
        if not self.nu > D - 1:
            raise ParameterError(f"nu must exceed D-1={D - 1}, got {self.nu}")
        cholesky(self.Gamma, "Gamma")
        cholesky(self.Xi, "Xi")

    @property
    def D(self):
        return self.M.shape[0]

    @property
    def Q(self):
        return self.M.shape[1]

    @property
    def N(self):
        return self.X.shape[1]

    @classmethod
    def weak_default(cls, D, X, intercept_var=10.0, effect_var=1.0):
        """``nu = D + 3``, ``Xi = I``, ``M = 0`` and a block-diagonal ``Gamma``
        with ``intercept_var`` on every covariate but the last, which gets
        ``effect_var``."""
        X = np.asarray(X, dtype=float)
        Q = X.shape[0]
        g = np.full(Q, float(intercept_var))
        g[-1] = effect_var
        return cls(np.zeros((D, Q)), np.diag(g), D + 3.0, np.eye(D), X)

    def collapsed_prior(self):
        F = coda.contrast_maps(self.D).F
        A = np.eye(self.N) + self.X.T @ self.Gamma @ self.X
        return MatrixTParams(self.nu - 1.0, F @ self.M @ self.X, F @ self.Xi @ F.T, 0.5 * (A + A.T))


# ---------------------------------------------------------------------------
# collapsed objective
# ---------------------------------------------------------------------------

class CollapsedModel:
    """Log posterior of ``psi_par`` with analytic gradient and Hessian.

    Vectors are ``psi_par.ravel()`` in C order, so entry ``a * N + j``
    is log-ratio ``a`` of sample ``j``.
    """

    def __init__(self, counts, prior: MlnPrior):
        Y = np.asarray(getattr(counts, "counts", counts), dtype=float)
        if Y.ndim != 2 or Y.shape[0] != prior.D:
            raise ValueError(f"counts must be {prior.D} x N")
        if Y.shape[1] != prior.N:
            raise ValueError("counts and covariates disagree on N")
        if np.any(Y < 0):
            raise ValueError("counts must be non-negative")
        self.Y = Y
        self.n = Y.sum(axis=0)
        self.prior = prior
        self.tprior = prior.collapsed_prior()
        self.P, self.N = prior.D - 1, prior.N
        self.nu_c = self.tprior.dof + self.N
        self.S_inv_col = linalg.cho_solve((cholesky(self.tprior.col_scale), True), np.eye(self.N))
        self.mult_const = float(np.sum(gammaln(self.n + 1)) - np.sum(gammaln(Y + 1)))

    def _unpack(self, x):
        return np.asarray(x, dtype=float).reshape(self.P, self.N)

    def _probs(self, psi_par):
        z = np.vstack([psi_par, np.zeros((1, self.N))])
        lse = logsumexp(z, axis=0)
        return z, lse, np.exp(z - lse)

    def log_likelihood(self, psi_par):
        z, lse, _ = self._probs(psi_par)
        return float(np.sum(self.Y * z) - np.sum(self.n * lse)) + self.mult_const

    def log_prior(self, psi_par):
        return matrix_t_logpdf(psi_par, self.tprior)

    def value(self, x):
        psi = self._unpack(x)
        return self.log_likelihood(psi) + self.log_prior(psi)

    def _prior_pieces(self, psi):
        R = psi - self.tprior.mean
        K = self.tprior.row_scale + R @ self.S_inv_col @ R.T
        P = linalg.cho_solve((np.linalg.cholesky(K), True), np.eye(self.P))
        U = P @ R @ self.S_inv_col
        return R, P, U

    def gradient(self, x):
        psi = self._unpack(x)
        _, _, pi = self._probs(psi)
        g_lik = self.Y[:-1] - self.n * pi[:-1]
        _, _, U = self._prior_pieces(psi)
        return (g_lik - self.nu_c * U).ravel()

    def value_and_gradient(self, x):
        return self.value(x), self.gradient(x)

    def hessian(self, x):
        psi = self._unpack(x)
        P_, N = self.P, self.N
        R, Pk, U = self._prior_pieces(psi)
        Sc = self.S_inv_col
        Qm = Sc - Sc @ R.T @ U
        H4 = np.einsum("ab,kj->ajbk", Pk, Qm) - np.einsum("ak,bj->ajbk", U, U)
        H = -self.nu_c * H4.reshape(P_ * N, P_ * N)
        _, _, pi = self._probs(psi)
        p = pi[:-1]
        idx = np.arange(P_) * N
        for j in range(N):
            blk = self.n[j] * (np.diag(p[:, j]) - np.outer(p[:, j], p[:, j]))
            H[np.ix_(idx + j, idx + j)] -= blk
        return 0.5 * (H + H.T)


def collapsed_log_posterior(psi_par, counts, prior, with_gradient=True):
    """Value (and gradient, same shape as ``psi_par``) of the collapsed log
    posterior, up to the evidence."""
    model = CollapsedModel(counts, prior)
    psi_par = np.asarray(psi_par, dtype=float)
    v = model.value(psi_par.ravel())
    if not with_gradient:
        return v
    return v, model.gradient(psi_par.ravel()).reshape(psi_par.shape)


# ---------------------------------------------------------------------------
# MAP + Laplace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollapsedPosterior:
    map_psi_par: np.ndarray
    neg_hessian_chol: np.ndarray
    prior_mean: np.ndarray
    prior_row_scale: np.ndarray
    prior_col_scale: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def covariance(self):
        Li = linalg.solve_triangular(self.neg_hessian_chol, np.eye(self.neg_hessian_chol.shape[0]), lower=True)
        return Li.T @ Li


def fit_collapsed(counts, prior: MlnPrior, tol=1e-6, max_iter=2000, newton_steps=50, init=None):
    """MAP of the collapsed posterior and the Cholesky factor of ``-H`` there.

    Quasi-Newton (L-BFGS) gets close, Newton steps with backtracking finish.
    Converged when ``||grad||_2 < tol * (D-1) * N``.
    """
    model = CollapsedModel(counts, prior)
    dim = model.P * model.N
    if model.N == 0:
        raise ValueError("fit_collapsed needs at least one sample")
    if dim > MAX_LAPLACE_DIM:
        raise ValueError(f"(D-1)*N = {dim} exceeds the dense Laplace limit {MAX_LAPLACE_DIM}")
    if init is None:
        init = coda.alr(coda.closure(model.Y + 0.5))
    x0 = np.asarray(init, dtype=float).ravel()
    threshold = tol * dim

    def f(x):
        v, g = model.value_and_gradient(x)
        return -v, -g

    res = optimize.minimize(
        f, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": 1e-10 * max(1.0, model.n.max()), "ftol": 1e-15},
    )
    x = res.x
    val = model.value(x)
    g = model.gradient(x)
    steps = 0
    while np.linalg.norm(g) >= threshold and steps < newton_steps:
        H = model.hessian(x)
        try:
            L = np.linalg.cholesky(-H)
            step = linalg.cho_solve((L, True), g)
        except np.linalg.LinAlgError:
            step = g / max(1.0, np.abs(np.diag(H)).max())
        t = 1.0
        while t > 1e-10:
            xn = x + t * step
            vn = model.value(xn)
            if np.isfinite(vn) and vn >= val - 1e-12 * abs(val):
                break
            t *= 0.5
        x, val = xn, vn
        g = model.gradient(x)
        steps += 1
    gnorm = float(np.linalg.norm(g))
    diag = {
        "lbfgs_iterations": int(res.nit),
        "lbfgs_message": str(res.message),
        "newton_steps": steps,
        "grad_norm": gnorm,
        "threshold": threshold,
        "log_posterior": float(val),
    }
    if not gnorm < threshold:
        raise MlnFitError(f"MAP search did not converge (|grad|={gnorm:.3g} >= {threshold:.3g})", diag)
    H = model.hessian(x)
    try:
        L = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError as exc:
        raise MlnFitError("negative Hessian at the optimum is not positive definite (saddle point)", diag) from exc
    log.debug("collapsed fit: %s", diag)
    tp = model.tprior
    return CollapsedPosterior(
        x.reshape(model.P, model.N), L, tp.mean, tp.row_scale, tp.col_scale, diag
    )


def sample_collapsed_psi(cp: CollapsedPosterior, S, rng):
    """``S x (D-1) x N`` Laplace draws ``MAP + L^{-T} z``."""
    gen = as_generator(rng)
    P, N = cp.map_psi_par.shape
    z = gen.standard_normal((P * N, int(S)))
    dev = linalg.solve_triangular(cp.neg_hessian_chol, z, lower=True, trans="T")
    return cp.map_psi_par[None] + dev.T.reshape(int(S), P, N)


def sample_collapsed(cp: CollapsedPosterior, S, rng):
    from .aldex import CompositionDraws

    psi = sample_collapsed_psi(cp, S, rng)
    full = np.concatenate([psi, np.zeros_like(psi[:, :1])], axis=1)
    logs = full - logsumexp(full, axis=1, keepdims=True)
    return CompositionDraws(np.exp(logs), None, logs)


# ---------------------------------------------------------------------------
# uncollapse
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterDraws:
    B_draws: np.ndarray  # S x D x Q
    Omega_draws: np.ndarray  # S x D x D


@dataclass(frozen=True)
class UncollapseMoments:
    nu_N: float
    Gamma_N: np.ndarray
    B_N: np.ndarray  # (S,) D x Q
    Xi_N: np.ndarray  # (S,) D x D


def uncollapse_moments(psi, prior: MlnPrior):
    """Conjugate posterior parameters for one ``psi`` (D x N) or a stack."""
    psi = np.asarray(psi, dtype=float)
    X = prior.X
    Gi = linalg.cho_solve((cholesky(prior.Gamma, "Gamma"), True), np.eye(prior.Q))
    prec = X @ X.T + Gi
    try:
        Lp = np.linalg.cholesky(0.5 * (prec + prec.T))
    except np.linalg.LinAlgError as exc:
        raise ParameterError("X X^T + Gamma^{-1} is singular") from exc
    Gamma_N = linalg.cho_solve((Lp, True), np.eye(prior.Q))
    Gamma_N = 0.5 * (Gamma_N + Gamma_N.T)
    B_N = (psi @ X.T + prior.M @ Gi) @ Gamma_N
    E = psi - B_N @ X
    dB = B_N - prior.M
    Xi_N = prior.Xi + E @ np.swapaxes(E, -1, -2) + dB @ Gi @ np.swapaxes(dB, -1, -2)
    Xi_N = 0.5 * (Xi_N + np.swapaxes(Xi_N, -1, -2))
    return UncollapseMoments(prior.nu + prior.N, Gamma_N, B_N, Xi_N)


def uncollapse_batch(psi, prior: MlnPrior, rng):
    """One ``(B, Omega)`` draw per slice of ``psi`` (S x D x N)."""
    gen = as_generator(rng)
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 3 or psi.shape[1:] != (prior.D, prior.N):
        raise ValueError(f"psi must be S x {prior.D} x {prior.N}")
    S = psi.shape[0]
    mom = uncollapse_moments(psi, prior)
    Lxi = np.linalg.cholesky(mom.Xi_N)
    Omega = sample_inverse_wishart_batch(mom.nu_N, Lxi, gen, S)
    Omega = 0.5 * (Omega + np.swapaxes(Omega, -1, -2))
    Lo = np.linalg.cholesky(Omega)
    Lg = np.linalg.cholesky(mom.Gamma_N)
    Z = gen.standard_normal((S, prior.D, prior.Q))
    B = mom.B_N + Lo @ Z @ Lg.T
    return ParameterDraws(B, Omega)


def uncollapse(psi, prior: MlnPrior, rng):
    """A single ``(B, Omega)`` draw given log abundances ``psi`` (D x N)."""
    d = uncollapse_batch(np.asarray(psi, dtype=float)[None], prior, rng)
    return d.B_draws[0], d.Omega_draws[0]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class MlnResult:
    params: ParameterDraws
    table: decisions.DecisionTable
    collapsed: CollapsedPosterior
    logscale: Optional[np.ndarray] = None


def run_mln_scale_sim(
    counts,
    prior: MlnPrior,
    model,
    S=2000,
    rng=0,
    coef=-1,
    alpha_level=decisions.DEFAULT_ALPHA,
    cp: Optional[CollapsedPosterior] = None,
    taxa=None,
):
    """Collapse, augment with scale draws, uncollapse, and summarize the
    ``coef`` column of ``B`` with interval-based calls."""
    rng = as_rng(rng)
    if cp is None:
        cp = fit_collapsed(counts, prior)
    comp = sample_collapsed(cp, S, rng.child("collapsed"))
    logscale = sample_log_scale(model, S, rng.child("scale").generator(), comp_draws=comp, counts=counts)
    psi = comp.log_values + logscale[:, None, :]
    params = uncollapse_batch(psi, prior, rng.child("uncollapse").generator())
    lfc = params.B_draws[:, :, coef]
    if taxa is None:
        taxa = getattr(counts, "taxa", None)
    table = decisions.decide_lfc(lfc, alpha_level=alpha_level, taxa=taxa)
    return MlnResult(params, table, cp, logscale)
