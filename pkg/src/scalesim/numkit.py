"""Random variates and matrix-variate distributions.

Conventions
-----------
Inverse Wishart ``IW(nu, Xi)`` is the standard one: density proportional to
``|S|^{-(nu+p+1)/2} exp(-tr(Xi S^{-1})/2)``, mean ``Xi / (nu - p - 1)``.

The matrix-T ``T(nu, M, Xi, A)`` for a ``p x n`` matrix is the marginal of
``X | S ~ MN(M, S, A)`` with ``S ~ IW(nu, Xi)``.  Its kernel is
``|Xi + (X-M) A^{-1} (X-M)^T|^{-(nu+n)/2}``; a ``1 x 1`` matrix-T is a
Student-t with ``nu`` degrees of freedom and squared scale ``Xi * A / nu``.
Under this convention dropping ``k`` rows lowers the dof by ``k`` while
conditioning on rows leaves it unchanged.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, multigammaln


class ParameterError(ValueError):
    """A distribution parameter is outside its domain."""


# ---------------------------------------------------------------------------
# RNG substreams
# ---------------------------------------------------------------------------

def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream key must be int or str, not {type(key).__name__}")


def derive_substream(seed, path=()):
    """Generator for the substream ``path`` of ``seed``.

    Pure in ``(seed, path)``: the same pair always yields the same variate
    sequence, independent of which other substreams were drawn before.
    """
    keys = tuple(_key_to_int(k) for k in path)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=keys)
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Rng:
    master_seed: int
    stream_path: tuple = field(default_factory=tuple)

    def child(self, *keys) -> "Rng":
        return Rng(self.master_seed, tuple(self.stream_path) + tuple(keys))

    def generator(self) -> np.random.Generator:
        return derive_substream(self.master_seed, self.stream_path)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Rng):
        return rng.generator()
    return np.random.default_rng(rng)


def as_rng(rng) -> Rng:
    """Coerce an int seed or ``Rng`` into an ``Rng`` (substream-capable)."""
    if isinstance(rng, Rng):
        return rng
    if rng is None:
        return Rng(0)
    if isinstance(rng, (int, np.integer)):
        return Rng(int(rng))
    raise TypeError("expected an Rng or an integer seed")


# ---------------------------------------------------------------------------
# SPD helpers
# ---------------------------------------------------------------------------

def cholesky(a, name="matrix"):
    """Lower Cholesky factor; failure is the SPD test."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"{name} must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise ParameterError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ParameterError(f"{name} is not positive definite") from exc


def logdet_spd(a, name="matrix"):
    L = cholesky(a, name)
    return 2.0 * np.log(np.diag(L)).sum()


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixNormalParams:
    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", M)
        object.__setattr__(self, "row_cov", np.atleast_2d(np.asarray(self.row_cov, dtype=float)))
        object.__setattr__(self, "col_cov", np.atleast_2d(np.asarray(self.col_cov, dtype=float)))
        p, q = M.shape
        if self.row_cov.shape != (p, p) or self.col_cov.shape != (q, q):
            raise ParameterError("covariance shapes do not match the mean")
        cholesky(self.row_cov, "row covariance")
        cholesky(self.col_cov, "column covariance")


@dataclass(frozen=True)
class InverseWishartParams:
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        Xi = np.atleast_2d(np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "scale", Xi)
        p = Xi.shape[0]
        if not self.dof > p - 1:
            raise ParameterError(f"inverse Wishart dof must exceed p-1={p - 1}, got {self.dof}")
        cholesky(Xi, "inverse Wishart scale")


@dataclass(frozen=True)
class MatrixTParams:
    dof: float
    mean: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", M)
        object.__setattr__(self, "row_scale", np.atleast_2d(np.asarray(self.row_scale, dtype=float)))
        object.__setattr__(self, "col_scale", np.atleast_2d(np.asarray(self.col_scale, dtype=float)))
        p, n = M.shape
        if self.row_scale.shape != (p, p) or self.col_scale.shape != (n, n):
            raise ParameterError("scale shapes do not match the mean")
        if not self.dof > p - 1:
            raise ParameterError(f"matrix-T dof must exceed p-1={p - 1}, got {self.dof}")
        cholesky(self.row_scale, "row scale")
        cholesky(self.col_scale, "column scale")


# ---------------------------------------------------------------------------
# univariate-family samplers
# ---------------------------------------------------------------------------

def log_gamma_variates(shape, rng):
    """``log`` of Gamma(shape, 1) variates, stable for small shapes.

    For ``shape < 1`` uses ``G(a) = G(a+1) * U^(1/a)`` in log space so tiny
    shapes never underflow to an exact zero.
    """
    gen = as_generator(rng)
    a = np.asarray(shape, dtype=float)
    small = a < 1.0
    g = gen.standard_gamma(np.where(small, a + 1.0, a))
    out = np.log(g)
    if np.any(small):
        u = gen.random(a.shape)
        out = np.where(small, out + np.log(u) / np.where(small, a, 1.0), out)
    return out


def sample_dirichlet(alpha, rng, size=None, axis=-1, log=False):
    """Dirichlet draws; ``alpha`` may be a vector or an array of parameter
    vectors laid out along ``axis``. ``size`` prepends sample dimensions.

    With ``log=True`` the log-composition is returned instead. Shapes far
    below one produce components that underflow to zero on the linear scale
    but remain finite in log space.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size == 0 or not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise ParameterError("Dirichlet parameters must be positive and finite")
    shape = alpha.shape if size is None else tuple(np.atleast_1d(size)) + alpha.shape
    ax = axis if axis < 0 else axis + (len(shape) - alpha.ndim)
    lg = log_gamma_variates(np.broadcast_to(alpha, shape), rng)
    if log:
        return lg - logsumexp(lg, axis=ax, keepdims=True)
    lg = lg - lg.max(axis=ax, keepdims=True)
    w = np.exp(lg)
    return w / w.sum(axis=ax, keepdims=True)


def sample_multinomial(p, n, rng):
    """Multinomial counts. ``p`` is a simplex vector, or a ``D x N`` matrix
    whose columns are simplex vectors paired with the entries of ``n``."""
    gen = as_generator(rng)
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=0) - 1.0) > 1e-9):
        raise ParameterError("multinomial probabilities must lie on the simplex")
    p = np.clip(p, 0.0, None)
    p = p / p.sum(axis=0)
    n = np.asarray(n)
    if np.any(n < 0) or np.any(n != np.round(n)):
        raise ParameterError("multinomial size must be a non-negative integer")
    if p.ndim == 1:
        return gen.multinomial(int(n), p)
    n = np.broadcast_to(n, (p.shape[1],)).astype(np.int64)
    return gen.multinomial(n, p.T).T


# ---------------------------------------------------------------------------
# matrix-variate samplers
# ---------------------------------------------------------------------------

def sample_matrix_normal(params: MatrixNormalParams, rng, size=None):
    """``M + L_U Z L_V^T`` with ``Z`` standard normal; ``vec`` covariance V (x) U."""
    gen = as_generator(rng)
    Lu = cholesky(params.row_cov, "row covariance")
    Lv = cholesky(params.col_cov, "column covariance")
    p, q = params.mean.shape
    shape = (p, q) if size is None else (int(size), p, q)
    Z = gen.standard_normal(shape)
    return params.mean + Lu @ Z @ Lv.T


def _bartlett_factor(gen, dof, p, S):
    A = np.zeros((S, p, p))
    ii = np.arange(p)
    A[:, ii, ii] = np.sqrt(gen.chisquare(dof - ii, size=(S, p)))
    rows, cols = np.tril_indices(p, -1)
    if rows.size:
        A[:, rows, cols] = gen.standard_normal((S, rows.size))
    return A


def sample_inverse_wishart_batch(dof, chol_scale, rng, S):
    """``S`` inverse-Wishart draws given the lower Cholesky factor of the
    scale. ``chol_scale`` may be ``(p, p)`` or a stack ``(S, p, p)``."""
    gen = as_generator(rng)
    L = np.asarray(chol_scale, dtype=float)
    p = L.shape[-1]
    A = _bartlett_factor(gen, dof, p, S)
    # Omega^{-1} = L^{-T} A A^T L^{-1}  =>  Omega = K^T K with K = A^{-1} L^T
    K = np.linalg.solve(A, np.broadcast_to(np.swapaxes(L, -1, -2), (S, p, p)))
    return np.swapaxes(K, -1, -2) @ K


def sample_inverse_wishart(params: InverseWishartParams, rng, size=None):
    L = cholesky(params.scale, "inverse Wishart scale")
    S = 1 if size is None else int(size)
    out = sample_inverse_wishart_batch(params.dof, L, rng, S)
    return out[0] if size is None else out


def sample_matrix_t(params: MatrixTParams, rng, size=None):
    """Compositional draw: ``S ~ IW(nu, row_scale)``, then ``MN(mean, S, col_scale)``."""
    gen = as_generator(rng)
    S = 1 if size is None else int(size)
    p, n = params.mean.shape
    Lr = cholesky(params.row_scale, "row scale")
    Lc = cholesky(params.col_scale, "column scale")
    Sig = sample_inverse_wishart_batch(params.dof, Lr, gen, S)
    Ls = np.linalg.cholesky(Sig)
    Z = gen.standard_normal((S, p, n))
    X = params.mean + Ls @ Z @ Lc.T
    return X[0] if size is None else X


# ---------------------------------------------------------------------------
# matrix-T density and conditioning
# ---------------------------------------------------------------------------

def matrix_t_logpdf(x, params: MatrixTParams):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape != params.mean.shape:
        raise ParameterError(f"x has shape {x.shape}, expected {params.mean.shape}")
    p, n = x.shape
    nu = params.dof
    R = x - params.mean
    Lc = cholesky(params.col_scale, "column scale")
    W = linalg.solve_triangular(Lc, R.T, lower=True)  # Lc^{-1} R^T
    K = params.row_scale + W.T @ W
    return (
        multigammaln((nu + n) / 2.0, p)
        - multigammaln(nu / 2.0, p)
        - 0.5 * p * n * np.log(np.pi)
        + 0.5 * nu * logdet_spd(params.row_scale, "row scale")
        - 0.5 * p * 2.0 * np.log(np.diag(Lc)).sum()
        - 0.5 * (nu + n) * logdet_spd(K, "row scale + quadratic form")
    )


def marginal_matrix_t(params: MatrixTParams, rows):
    """Matrix-T of a subset of rows (dof drops by the number of rows removed)."""
    rows = np.asarray(rows)
    p = params.mean.shape[0]
    k = p - rows.size
    return MatrixTParams(
        params.dof - k,
        params.mean[rows],
        params.row_scale[np.ix_(rows, rows)],
        params.col_scale,
    )


def conditional_matrix_t(params: MatrixTParams, observed, n_observed=None):
    """Distribution of the trailing rows given the leading ``n_observed`` rows.

    With ``R = observed - M1`` the result is
    ``T(nu, M2 + Xi21 Xi11^{-1} R, Xi22 - Xi21 Xi11^{-1} Xi12, A + R^T Xi11^{-1} R)``.
    """
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    q = observed.shape[0] if n_observed is None else int(n_observed)
    p, n = params.mean.shape
    if observed.shape != (q, n) or not 0 < q < p:
        raise ParameterError(
            f"observed block must be (q, {n}) with 0 < q < {p}, got {observed.shape}"
        )
    Xi = params.row_scale
    X11, X12 = Xi[:q, :q], Xi[:q, q:]
    X21, X22 = Xi[q:, :q], Xi[q:, q:]
    try:
        L11 = cholesky(X11, "observed-block scale")
    except ParameterError as exc:
        raise ParameterError("observed-block scale is singular") from exc
    R = observed - params.mean[:q]
    # Xi11^{-1} via triangular solves
    iR = linalg.cho_solve((L11, True), R)
    iX12 = linalg.cho_solve((L11, True), X12)
    mean = params.mean[q:] + X21 @ iR
    row = X22 - X21 @ iX12
    row = 0.5 * (row + row.T)
    col = params.col_scale + R.T @ iR
    col = 0.5 * (col + col.T)
    return MatrixTParams(params.dof, mean, row, col)
