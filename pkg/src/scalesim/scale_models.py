"""Probability models for the unmeasured log scale ``log W_perp``.

Each variant is a frozen dataclass. :func:`sample_log_scale` turns a variant
into an ``S x N`` array of draws. Variants that need the composition draws
(CLR, PIM) take them as an ``S x D x N`` array; the median-of-ratios
restriction needs the raw counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import coda
from .numkit import MatrixTParams, as_generator, cholesky, conditional_matrix_t, sample_matrix_t

#: Standard deviation used when a family is asked for ``alpha = inf``.
OPERATIONAL_INFINITY = 1e3


class ScaleModelError(ValueError):
    pass


def _vec(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim != 1:
        raise ScaleModelError(f"{name} must be a 1-d vector")
    return a


def _nonneg(x, name):
    if not (x >= 0):
        raise ScaleModelError(f"{name} must be >= 0, got {x}")


@dataclass(frozen=True)
class ClrRestriction:
    pass


@dataclass(frozen=True)
class MedianOfRatiosRestriction:
    pass


@dataclass(frozen=True)
class LogNormalFamily:
    mu: np.ndarray
    alpha: float
    c: float = 0.0

    def __post_init__(self):
        mu = _vec(self.mu, "mu")
        if abs(mu.sum()) > 1e-10 * max(1.0, np.abs(mu).sum()):
            raise ScaleModelError("LogNormalFamily requires sum(mu) == 0")
        object.__setattr__(self, "mu", mu)
        _nonneg(self.alpha, "alpha")

    @property
    def effective_alpha(self):
        return OPERATIONAL_INFINITY if math.isinf(self.alpha) else float(self.alpha)


@dataclass(frozen=True)
class Relaxed:
    """Condition-level shift ``beta ~ N(0, gamma^2)`` on top of within-condition
    noise ``alpha``. ``gamma = 0`` reduces to :class:`LogNormalFamily` with
    ``mu = 0``, draw for draw."""

    gamma: float
    alpha: float
    design: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        d = _vec(self.design, "design")
        if not np.all((d == 0) | (d == 1)):
            raise ScaleModelError("Relaxed design must be a binary vector")
        object.__setattr__(self, "design", d)
        _nonneg(self.gamma, "gamma")
        _nonneg(self.alpha, "alpha")


@dataclass(frozen=True)
class Informed:
    z: np.ndarray
    alpha: float

    def __post_init__(self):
        z = _vec(self.z, "z")
        if not np.all(np.isfinite(z)):
            raise ScaleModelError("Informed z must be finite")
        object.__setattr__(self, "z", z)
        _nonneg(self.alpha, "alpha")


@dataclass(frozen=True)
class DesignBased:
    """Early-over-late log scale ratio ``~ N(dbar, tau^2)``.

    ``timepoint`` is 0 for the early and 1 for the late sample. Each
    timepoint receives an independent ``N(0, tau^2/2)`` deviation around
    ``c +/- dbar/2``; the deviation is shared by every vessel within a draw.
    """

    dbar: float
    tau: float
    timepoint: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        t = _vec(self.timepoint, "timepoint")
        if not np.all((t == 0) | (t == 1)):
            raise ScaleModelError("timepoint labels must be 0/1")
        object.__setattr__(self, "timepoint", t)
        if not self.tau > 0:
            raise ScaleModelError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class FlowEmpirical:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _vec(self.mu, "mu")
        sigma = _vec(self.sigma, "sigma")
        if mu.shape != sigma.shape:
            raise ScaleModelError("mu and sigma must have the same length")
        if np.any(sigma < 0):
            raise ScaleModelError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_replicates(cls, log_measurements):
        """Plug-in moments from a list of per-sample replicate arrays.

        Samples with a single replicate get ``sigma = 0``.
        """
        mu = np.array([np.mean(r) for r in log_measurements])
        sigma = np.array([np.std(r, ddof=1) if len(r) > 1 else 0.0 for r in log_measurements])
        return cls(mu, sigma)


@dataclass(frozen=True)
class PimImplied:
    """Scale implied by the conditional matrix-T of the sum-of-logs
    coordinate given the log-ratio coordinates."""

    M: np.ndarray
    Gamma: np.ndarray
    nu: float
    Xi: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        for name in ("M", "Gamma", "Xi", "X"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        D, Q = self.M.shape
        if self.Xi.shape != (D, D) or self.Gamma.shape != (Q, Q) or self.X.shape[0] != Q:
            raise ScaleModelError("PimImplied prior shapes are inconsistent")
        cholesky(self.Gamma, "Gamma")
        cholesky(self.Xi, "Xi")

    def joint(self):
        """Matrix-T over ``G psi = [psi_par; psi_perp]``."""
        D = self.M.shape[0]
        G = coda.contrast_maps(D).G
        A = np.eye(self.X.shape[1]) + self.X.T @ self.Gamma @ self.X
        return MatrixTParams(self.nu, G @ self.M @ self.X, G @ self.Xi @ G.T, 0.5 * (A + A.T))


@dataclass(frozen=True)
class EffectiveFromEstimates:
    """Scale model implied by an external point estimator.

    Each draw samples per-taxon estimates ``N(theta_hat, se^2)`` and keeps
    their mean across taxa, the part of the estimate that the composition
    cannot inform. ``design`` maps that scalar onto samples.
    """

    theta_hat: np.ndarray
    se: np.ndarray
    design: Optional[np.ndarray] = None

    def __post_init__(self):
        th = _vec(self.theta_hat, "theta_hat")
        se = _vec(self.se, "se")
        if th.shape != se.shape:
            raise ScaleModelError("theta_hat and se must have the same length")
        if np.any(se < 0):
            raise ScaleModelError("se must be non-negative")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "se", se)
        if self.design is not None:
            object.__setattr__(self, "design", _vec(self.design, "design"))


ScaleModel = (
    ClrRestriction
    | MedianOfRatiosRestriction
    | LogNormalFamily
    | Relaxed
    | Informed
    | DesignBased
    | FlowEmpirical
    | PimImplied
    | EffectiveFromEstimates
)


def is_identifying_restriction(model) -> bool:
    if isinstance(model, (ClrRestriction, MedianOfRatiosRestriction)):
        return True
    if isinstance(model, LogNormalFamily):
        return model.alpha == 0
    if isinstance(model, Relaxed):
        return model.alpha == 0 and model.gamma == 0
    if isinstance(model, Informed):
        return model.alpha == 0
    if isinstance(model, FlowEmpirical):
        return bool(np.all(model.sigma == 0))
    if isinstance(model, EffectiveFromEstimates):
        return bool(np.all(model.se == 0))
    return False


# ---------------------------------------------------------------------------
# median of ratios
# ---------------------------------------------------------------------------

def median_of_ratios_size_factors(counts):
    """Size factors ``s_j`` from taxa with no zero counts."""
    Y = np.asarray(counts, dtype=float)
    keep = np.all(Y > 0, axis=1)
    if not keep.any():
        raise ScaleModelError("median of ratios needs at least one taxon with no zero counts")
    logY = np.log(Y[keep])
    ref = logY.mean(axis=1, keepdims=True)
    return np.exp(np.median(logY - ref, axis=0))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _comp_logs(comp_draws):
    """Log compositions as ``(S, D, N)``, preferring exact stored logs."""
    if comp_draws is None:
        return None
    if hasattr(comp_draws, "log_values"):
        v = np.asarray(comp_draws.log_values, dtype=float)
    else:
        v = np.log(np.asarray(comp_draws, dtype=float))
    if v.ndim == 2:
        v = v[None]
    return v


def _counts_array(counts):
    if counts is None:
        return None
    return np.asarray(getattr(counts, "counts", counts))


def _need_N(model, comp, counts):
    for v, ax in ((comp, 2), (counts, 1)):
        if v is not None:
            return v.shape[ax]
    raise ScaleModelError(f"{type(model).__name__}: sample count is unknown")


def sample_log_scale(model, S, rng, comp_draws=None, counts=None):
    """``S x N`` draws of ``log W_perp`` under ``model``.

    Parameters
    ----------
    model : ScaleModel variant
    S : int
    rng : Generator, Rng or int seed
    comp_draws : CompositionDraws or ndarray (S, D, N), optional
        Required by :class:`ClrRestriction` and :class:`PimImplied`.
    counts : CountTable or ndarray (D, N), optional
        Required by :class:`MedianOfRatiosRestriction`.
    """
    S = int(S)
    if S < 1:
        raise ScaleModelError("S must be >= 1")
    comp = _comp_logs(comp_draws)
    Y = _counts_array(counts)

    if isinstance(model, ClrRestriction):
        if comp is None:
            raise ScaleModelError("ClrRestriction requires composition draws")
        if comp.shape[0] != S:
            raise ScaleModelError(f"composition draws have S={comp.shape[0]}, expected {S}")
        return -comp.mean(axis=1)

    if isinstance(model, MedianOfRatiosRestriction):
        if Y is None:
            raise ScaleModelError("MedianOfRatiosRestriction requires counts")
        depth = Y.sum(axis=0).astype(float)
        if np.any(depth <= 0):
            raise ScaleModelError("every sample needs a positive total count")
        row = np.log(depth) - np.log(median_of_ratios_size_factors(Y))
        return np.broadcast_to(row, (S, row.size)).copy()

    gen = as_generator(rng)

    if isinstance(model, LogNormalFamily):
        z = gen.standard_normal((S, model.mu.size))
        return model.c + model.mu + model.effective_alpha * z

    if isinstance(model, Relaxed):
        alpha = OPERATIONAL_INFINITY if math.isinf(model.alpha) else model.alpha
        z = gen.standard_normal((S, model.design.size))
        beta = gen.standard_normal(S) * model.gamma
        mu = beta[:, None] * model.design
        mu = mu - mu.mean(axis=1, keepdims=True)
        return model.c + mu + alpha * z

    if isinstance(model, Informed):
        z = gen.standard_normal((S, model.z.size))
        return model.z + model.alpha * z

    if isinstance(model, DesignBased):
        u = gen.standard_normal((S, 2)) * (model.tau / math.sqrt(2.0))
        early = model.c + 0.5 * model.dbar + u[:, :1]
        late = model.c - 0.5 * model.dbar + u[:, 1:]
        return np.where(model.timepoint == 0, early, late)

    if isinstance(model, FlowEmpirical):
        z = gen.standard_normal((S, model.mu.size))
        return model.mu + model.sigma * z

    if isinstance(model, PimImplied):
        if comp is None:
            raise ScaleModelError("PimImplied requires composition draws")
        return _sample_pim(model, comp, gen)

    if isinstance(model, EffectiveFromEstimates):
        D = model.theta_hat.size
        draws = model.theta_hat + model.se * gen.standard_normal((S, D))
        perp = draws.mean(axis=1)
        design = model.design
        if design is None:
            N = _need_N(model, comp, Y)
            design = np.ones(N)
        return perp[:, None] * design

    raise ScaleModelError(f"unknown scale model {type(model).__name__}")


def _sample_pim(model, comp, gen):
    S, D, N = comp.shape
    if model.M.shape[0] != D or model.X.shape[1] != N:
        raise ScaleModelError("PimImplied prior does not match the composition draws")
    joint = model.joint()
    out = np.empty((S, N))
    for s in range(S):
        par = comp[s, :-1] - comp[s, -1:]
        cond = conditional_matrix_t(joint, par)
        perp = sample_matrix_t(cond, gen)
        psi = coda.reassemble(par, perp)
        # arithmetic total of exp(psi) per sample
        out[s] = logsumexp(psi, axis=0)
    return out


def pim_psi_draws(model, comp, rng):
    """Full log-abundance draws ``psi`` (S x D x N) under the PIM."""
    gen = as_generator(rng)
    comp = _comp_logs(comp)
    joint = model.joint()
    out = np.empty(comp.shape)
    for s in range(comp.shape[0]):
        par = comp[s, :-1] - comp[s, -1:]
        perp = sample_matrix_t(conditional_matrix_t(joint, par), gen)
        out[s] = coda.reassemble(par, perp)
    return out


# ---------------------------------------------------------------------------
# construction from plain dicts (config files)
# ---------------------------------------------------------------------------

_VARIANTS = {
    "clr": ClrRestriction,
    "mor": MedianOfRatiosRestriction,
    "lognormal": LogNormalFamily,
    "relaxed": Relaxed,
    "informed": Informed,
    "design": DesignBased,
    "flow": FlowEmpirical,
    "pim": PimImplied,
    "effective": EffectiveFromEstimates,
}


def variant_names():
    return sorted(_VARIANTS)


def from_config(spec: dict, **context):
    """Build a variant from ``{"kind": name, **params}``.

    ``context`` supplies data-dependent arrays (``design``, ``timepoint``,
    ``z``, ``N``) that a config file cannot know in advance; explicit keys in
    ``spec`` take precedence.
    """
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in _VARIANTS:
        raise ScaleModelError(f"unknown scale model '{kind}'; choose from {variant_names()}")
    cls = _VARIANTS[kind]
    if kind in ("clr", "mor"):
        return cls()
    if kind == "lognormal":
        mu = spec.get("mu")
        if mu is None:
            mu = np.zeros(int(context["N"]))
        return cls(mu=np.asarray(mu, float), alpha=float(spec["alpha"]), c=float(spec.get("c", 0.0)))
    if kind == "relaxed":
        return cls(
            gamma=float(spec["gamma"]),
            alpha=float(spec["alpha"]),
            design=np.asarray(spec.get("design", context.get("design")), float),
            c=float(spec.get("c", 0.0)),
        )
    if kind == "informed":
        return cls(z=np.asarray(spec.get("z", context.get("z")), float), alpha=float(spec["alpha"]))
    if kind == "design":
        return cls(
            dbar=float(spec["dbar"]),
            tau=float(spec["tau"]),
            timepoint=np.asarray(spec.get("timepoint", context.get("timepoint")), float),
            c=float(spec.get("c", 0.0)),
        )
    if kind == "flow":
        return cls(mu=np.asarray(spec["mu"], float), sigma=np.asarray(spec["sigma"], float))
    if kind == "effective":
        design = spec.get("design", context.get("design"))
        return cls(
            theta_hat=np.asarray(spec["theta_hat"], float),
            se=np.asarray(spec["se"], float),
            design=None if design is None else np.asarray(design, float),
        )
    # pim
    return cls(
        M=np.asarray(spec.get("M", context.get("M")), float),
        Gamma=np.asarray(spec.get("Gamma", context.get("Gamma")), float),
        nu=float(spec.get("nu", context.get("nu"))),
        Xi=np.asarray(spec.get("Xi", context.get("Xi")), float),
        X=np.asarray(spec.get("X", context.get("X")), float),
    )
