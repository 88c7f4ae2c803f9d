"""Dirichlet-multinomial scale-conditional estimand.

Posterior compositions are drawn per sample from ``Dirichlet(Y + gamma)``
and combined with a scale model into log-abundance draws ``eta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decisions
from .numkit import ParameterError, as_rng, sample_dirichlet
from .scale_models import sample_log_scale

DEFAULT_GAMMA = 0.5
DEFAULT_S = 128


@dataclass(frozen=True)
class CompositionDraws:
    values: np.ndarray  # (S, D, N)
    gamma: np.ndarray  # (D,)
    logs: np.ndarray | None = None  # log of values, kept when computed exactly

    @property
    def shape(self):
        return self.values.shape

    @property
    def log_values(self):
        return np.log(self.values) if self.logs is None else self.logs


@dataclass(frozen=True)
class EtaDraws:
    values: np.ndarray  # (S, D, N)


def _counts(counts):
    Y = np.asarray(getattr(counts, "counts", counts))
    if Y.ndim != 2:
        raise ValueError("counts must be a D x N table")
    if np.any(Y < 0) or np.any(Y != np.round(Y)):
        raise ValueError("counts must be non-negative integers")
    return Y.astype(float)


def _gamma_vector(gamma, D):
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (D,)).copy()
    if not np.all(g > 0):
        raise ParameterError("Dirichlet prior gamma must be positive")
    return g


def sample_compositions(counts, gamma=DEFAULT_GAMMA, S=DEFAULT_S, rng=0):
    """``S`` independent posterior draws of every sample's composition."""
    Y = _counts(counts)
    g = _gamma_vector(gamma, Y.shape[0])
    rng = as_rng(rng)
    logW = sample_dirichlet(Y + g[:, None], rng.generator(), size=int(S), axis=0, log=True)
    return CompositionDraws(np.exp(logW), g, logW)


def compose_eta(comp, logscale):
    logW = comp.log_values if isinstance(comp, CompositionDraws) else np.log(np.asarray(comp, dtype=float))
    L = np.asarray(getattr(logscale, "values", logscale), dtype=float)
    W = logW
    if W.ndim != 3 or L.shape != (W.shape[0], W.shape[2]):
        raise ValueError(
            f"log scale draws of shape {L.shape} do not match compositions {W.shape}"
        )
    return EtaDraws(logW + L[:, None, :])


def run_aldex_scale_sim(
    counts,
    model,
    labels,
    S=DEFAULT_S,
    rng=0,
    gamma=DEFAULT_GAMMA,
    alpha_level=decisions.DEFAULT_ALPHA,
    mode="test",
    comp=None,
    taxa=None,
):
    """Compositions, scale draws, ``eta``, then per-taxon decisions.

    Randomness is split into the ``"compositions"`` and ``"scale"``
    substreams of ``rng``, so passing a precomputed ``comp`` (drawn from the
    same substream) gives results identical to drawing it here.
    """
    rng = as_rng(rng)
    if comp is None:
        comp = sample_compositions(counts, gamma, S, rng.child("compositions"))
    S = comp.values.shape[0]
    logscale = sample_log_scale(
        model, S, rng.child("scale").generator(), comp_draws=comp, counts=counts
    )
    eta = compose_eta(comp, logscale)
    if taxa is None:
        taxa = getattr(counts, "taxa", None)
    return decisions.decide(eta.values, labels, alpha_level=alpha_level, mode=mode, taxa=taxa)
