"""Differential-abundance calls from posterior draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import stdtr

from . import kernels

VAR_FLOOR = 1e-12
EFFECT_EPS = 1e-8
DEFAULT_ALPHA = 0.05


class DecisionError(ValueError):
    pass


def _welch_from_moments(m_a, v_a, n_a, m_b, v_b, n_b):
    va = np.maximum(v_a, VAR_FLOOR) / n_a
    vb = np.maximum(v_b, VAR_FLOOR) / n_b
    se2 = va + vb
    t = (m_a - m_b) / np.sqrt(se2)
    df = se2**2 / (va**2 / (n_a - 1) + vb**2 / (n_b - 1))
    p = 2.0 * stdtr(df, -np.abs(t))
    return t, df, np.minimum(p, 1.0)


def welch_t(group_a, group_b):
    """Welch's unequal-variance t test of ``mean(a) - mean(b)``.

    Returns ``(t, df, p)`` with a two-sided p-value.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DecisionError("each group needs at least two observations")
    t, df, p = _welch_from_moments(a.mean(), a.var(ddof=1), a.size, b.mean(), b.var(ddof=1), b.size)
    return float(t), float(df), float(p)


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise DecisionError("bh_adjust expects a vector")
    if p.size == 0:
        return p.copy()
    return kernels.bh_adjust_rows_numpy(p[None])[0]


def logit_ecdf_at_zero(lfc_draws, axis=0):
    """Log-odds of the posterior mass at or below zero.

    The proportion is clamped to ``[1/(2S), 1 - 1/(2S)]`` so the result is
    finite when every draw falls on one side.
    """
    x = np.asarray(lfc_draws, dtype=float)
    S = x.shape[axis]
    p = (x <= 0).sum(axis=axis) / S
    p = np.clip(p, 1.0 / (2 * S), 1.0 - 1.0 / (2 * S))
    return np.log(p / (1.0 - p))


def _labels(labels):
    lab = np.asarray(labels)
    levels = np.unique(lab)
    if levels.size != 2:
        raise DecisionError(f"labels must have exactly two levels, found {levels.size}")
    g = (lab == levels[1]).astype(np.int64)
    if min(g.sum(), (1 - g).sum()) < 2:
        raise DecisionError("each condition needs at least two samples")
    return g


def effect_size(eta_draws, labels):
    """Median over draws of the between-group mean difference divided by the
    larger within-group standard deviation."""
    eta = np.asarray(eta_draws, dtype=float)
    g = _labels(labels)
    m0, v0, m1, v1 = kernels.group_moments(eta, g)
    return _effect(m0, v0, m1, v1)


def _effect(m0, v0, m1, v1):
    sd = np.maximum(np.sqrt(np.maximum(v0, v1)), EFFECT_EPS)
    return np.median((m1 - m0) / sd, axis=0)


@dataclass
class DecisionTable:
    """Per-taxon summary. Arrays all have length ``D``.

    ``p_like`` and ``p_bh`` are averages over draws of the raw and the
    BH-adjusted per-draw p-values; for summaries built from lfc draws they
    are the two-sided posterior tail mass and its BH adjustment.
    """

    taxa: list
    effect_size: np.ndarray
    p_like: np.ndarray
    p_bh: np.ndarray
    significant: np.ndarray
    lfc_mean: np.ndarray
    lfc_lo: np.ndarray
    lfc_hi: np.ndarray
    logit_ecdf0: np.ndarray
    mode: str = "test"

    @property
    def direction(self):
        d = np.where(self.lfc_mean > 0, "increase", "decrease")
        return np.where(self.significant, d, "none")

    def to_frame(self):
        return pd.DataFrame(
            {
                "taxon": self.taxa,
                "effect_size": self.effect_size,
                "p_like": self.p_like,
                "p_bh": self.p_bh,
                "significant": self.significant.astype(bool),
                "lfc_mean": self.lfc_mean,
                "lfc_lo": self.lfc_lo,
                "lfc_hi": self.lfc_hi,
                "logit_ecdf0": self.logit_ecdf0,
                "direction": self.direction,
            }
        )


COLUMNS = (
    "taxon",
    "effect_size",
    "p_like",
    "p_bh",
    "significant",
    "lfc_mean",
    "lfc_lo",
    "lfc_hi",
    "logit_ecdf0",
    "direction",
)


def _taxa(taxa, D):
    if taxa is None:
        return [f"taxon_{i + 1}" for i in range(D)]
    taxa = list(taxa)
    if len(taxa) != D:
        raise DecisionError("taxa ids do not match the number of rows")
    return taxa


def decide(eta_draws, labels, alpha_level=DEFAULT_ALPHA, mode="test", taxa=None):
    """Per-draw Welch tests with BH inside each draw, averaged over draws.

    Parameters
    ----------
    eta_draws : ndarray (S, D, N)
        Log-abundance draws.
    labels : array (N,)
        Two-level condition labels; the lexicographically larger level is
        the "case" group, so the lfc is ``case - control``.
    mode : {"test", "interval"}
        ``"test"``: significant when the averaged BH value is below
        ``alpha_level``. ``"interval"``: significant when the central
        ``1 - alpha_level`` interval of the lfc draws excludes zero.
    """
    eta = np.asarray(eta_draws, dtype=float)
    if eta.ndim == 2:
        eta = eta[None]
    if eta.ndim != 3:
        raise DecisionError("eta draws must be S x D x N")
    if mode not in ("test", "interval"):
        raise DecisionError(f"unknown significance mode '{mode}'")
    g = _labels(labels)
    if g.size != eta.shape[2]:
        raise DecisionError("labels do not match the number of samples")
    n1 = int(g.sum())
    n0 = g.size - n1
    m0, v0, m1, v1 = kernels.group_moments(eta, g)
    _, _, p = _welch_from_moments(m1, v1, n1, m0, v0, n0)
    p_bh = kernels.bh_adjust_rows(p)
    lfc = m1 - m0
    lo, hi = np.percentile(lfc, [100 * alpha_level / 2, 100 * (1 - alpha_level / 2)], axis=0)
    lfc_mean = lfc.mean(axis=0)
    p_bh_mean = p_bh.mean(axis=0)
    if mode == "test":
        sig = p_bh_mean < alpha_level
    else:
        sig = (lo > 0) | (hi < 0)
    return DecisionTable(
        taxa=_taxa(taxa, eta.shape[1]),
        effect_size=_effect(m0, v0, m1, v1),
        p_like=p.mean(axis=0),
        p_bh=p_bh_mean,
        significant=sig,
        lfc_mean=lfc_mean,
        lfc_lo=np.minimum(lo, lfc_mean),
        lfc_hi=np.maximum(hi, lfc_mean),
        logit_ecdf0=logit_ecdf_at_zero(lfc, axis=0),
        mode=mode,
    )


def decide_lfc(lfc_draws, alpha_level=DEFAULT_ALPHA, taxa=None):
    """Interval-based calls straight from ``S x D`` lfc draws (MLN pipeline)."""
    lfc = np.asarray(lfc_draws, dtype=float)
    if lfc.ndim != 2:
        raise DecisionError("lfc draws must be S x D")
    S = lfc.shape[0]
    below = (lfc <= 0).mean(axis=0)
    p = np.minimum(1.0, 2.0 * np.minimum(below, 1.0 - below))
    lo, hi = np.percentile(lfc, [100 * alpha_level / 2, 100 * (1 - alpha_level / 2)], axis=0)
    mean = lfc.mean(axis=0)
    sd = lfc.std(axis=0, ddof=1) if S > 1 else np.zeros_like(mean)
    return DecisionTable(
        taxa=_taxa(taxa, lfc.shape[1]),
        effect_size=mean / np.maximum(sd, EFFECT_EPS),
        p_like=p,
        p_bh=bh_adjust(p),
        significant=(lo > 0) | (hi < 0),
        lfc_mean=mean,
        lfc_lo=np.minimum(lo, mean),
        lfc_hi=np.maximum(hi, mean),
        logit_ecdf0=logit_ecdf_at_zero(lfc, axis=0),
        mode="interval",
    )


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def fdr(self):
        return self.fp / max(self.tp + self.fp, 1)

    @property
    def sensitivity(self):
        return self.tp / max(self.tp + self.fn, 1)

    @property
    def specificity(self):
        return self.tn / max(self.tn + self.fp, 1)

    def as_dict(self):
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "fdr": self.fdr,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
        }


def confusion(calls, truth):
    c = np.asarray(calls, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if c.shape != t.shape:
        raise DecisionError("calls and truth must have the same length")
    return ConfusionMetrics(
        tp=int(np.sum(c & t)),
        fp=int(np.sum(c & ~t)),
        tn=int(np.sum(~c & ~t)),
        fn=int(np.sum(~c & t)),
    )
