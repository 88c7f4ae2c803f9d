"""Simulated antibiotic study: 21 taxa, 4 of which decrease after treatment.

Samples are Poisson draws of the true abundances, re-sampled to a fixed
sequencing depth, so the total abundance is lost in the observed counts.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.stats import gaussian_kde

from .. import aldex, coda, decisions
from ..io import CountTable
from ..numkit import as_rng, sample_multinomial
from ..scale_models import (
    ClrRestriction,
    EffectiveFromEstimates,
    Informed,
    LogNormalFamily,
    MedianOfRatiosRestriction,
    Relaxed,
    median_of_ratios_size_factors,
    sample_log_scale,
)

N_TAXA = 21
DA_TAXA = (2, 3, 14, 20)
# relative sizes of the four decreases; the first is deliberately weak
DA_SHAPE = np.array([0.3, 0.6, 0.6, 0.6])
DEFAULT_DEPTH = 5000
DEFAULT_N = 50

# baseline rates, log-spaced between 10 and 300; the affected taxa get low
# to moderate rates so the true total barely moves
_ORDER = np.array([6, 20, 3, 5, 10, 12, 1, 14, 0, 11, 8, 19, 18, 17, 7, 2, 16, 9, 13, 15, 4])
BASELINE = np.geomspace(10.0, 300.0, N_TAXA)[_ORDER]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class AntibioticScenario:
    lam: np.ndarray  # 21 x 2, columns pre / post
    truth: np.ndarray  # 21 booleans
    depth: int = DEFAULT_DEPTH
    n: int = DEFAULT_N
    seed: int = 0
    target_delta: float = 0.1

    @property
    def true_lfc(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self.lam[:, 1] / self.lam[:, 0])

    @property
    def true_log_scale_ratio(self):
        return float(np.log(self.lam[:, 1].sum() / self.lam[:, 0].sum()))

    def delta(self):
        lam = self.lam
        return coda.delta_discrepancy(
            np.log(lam[:, 1].sum()), np.log(lam[:, 0].sum()),
            coda.closure(lam[:, 1]), coda.closure(lam[:, 0]),
        )

    def labels(self, n=None):
        n = self.n if n is None else int(n)
        return (np.arange(n) >= n // 2).astype(int)

    def with_n(self, n):
        return AntibioticScenario(self.lam, self.truth, self.depth, int(n), self.seed, self.target_delta)

    def describe(self):
        return pd.DataFrame(
            {
                "taxon": [f"taxon_{i + 1}" for i in range(self.lam.shape[0])],
                "lambda_pre": self.lam[:, 0],
                "lambda_post": self.lam[:, 1],
                "truth": self.truth,
            }
        )


def _post_column(m):
    post = BASELINE.copy()
    post[list(DA_TAXA)] *= np.exp(-m * DA_SHAPE)
    return post


def build_scenario(target_delta=0.1, seed=0, n=DEFAULT_N, depth=DEFAULT_DEPTH):
    """Rates whose plug-in discrepancy between the geometric-mean scale and
    the true scale equals ``target_delta``.

    The decrease of the four affected taxa is scaled by a common factor found
    by root finding; with ``target_delta = 0`` nothing changes.
    """
    if not target_delta >= 0:
        raise ScenarioError("target_delta must be >= 0")
    truth = np.zeros(N_TAXA, dtype=bool)
    if target_delta == 0:
        lam = np.column_stack([BASELINE, BASELINE])
        return AntibioticScenario(lam, truth, int(depth), int(n), int(seed), 0.0)

    def gap(m):
        lam = np.column_stack([BASELINE, _post_column(m)])
        return AntibioticScenario(lam, truth).delta() - target_delta

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2
        if hi > 1e3:
            raise ScenarioError(f"target_delta={target_delta} is not reachable")
    m = optimize.brentq(gap, 0.0, hi, xtol=1e-14)
    truth[list(DA_TAXA)] = True
    sc = AntibioticScenario(np.column_stack([BASELINE, _post_column(m)]), truth, int(depth), int(n), int(seed), float(target_delta))
    if abs(sc.delta() - target_delta) > 1e-3:  # pragma: no cover - brentq guarantees this
        raise ScenarioError("failed to reach the target discrepancy")
    return sc


def simulate_counts(scenario: AntibioticScenario, rng, n=None):
    """Poisson abundances per sample, then multinomial re-sampling to depth.

    The metadata keeps the condition label and ``log_scale``, the log of each
    sample's true total abundance.
    """
    gen = as_rng(rng).generator()
    labels = scenario.labels(n)
    rates = scenario.lam[:, labels]
    abundance = gen.poisson(rates)
    totals = abundance.sum(axis=0)
    if np.any(totals == 0):
        raise ScenarioError("a simulated sample has zero total abundance")
    probs = abundance / totals
    counts = sample_multinomial(probs, np.full(labels.size, scenario.depth), gen)
    samples = [f"s{j + 1}" for j in range(labels.size)]
    md = pd.DataFrame(
        {"condition": labels, "log_scale": np.log(totals)},
        index=pd.Index(samples, name="sample"),
    )
    return CountTable(counts, [f"taxon_{i + 1}" for i in range(counts.shape[0])], samples, md)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def make_model(name, table: CountTable, alpha=0.6, gamma=0.2, informed_alpha=0.5):
    labels = table.covariate("condition").astype(float)
    N = labels.size
    if name == "clr":
        return ClrRestriction()
    if name == "mor":
        return MedianOfRatiosRestriction()
    if name == "relaxed":
        return Relaxed(gamma=gamma, alpha=alpha, design=labels)
    if name == "informed":
        return Informed(z=table.covariate("log_scale").astype(float), alpha=informed_alpha)
    if name == "coda":
        return LogNormalFamily(mu=np.zeros(N), alpha=np.inf)
    raise ScenarioError(f"unknown estimator '{name}'")


ESTIMATORS = ("clr", "mor", "relaxed", "informed", "coda")

# restriction estimators stand in for the normalise-then-test tools and use
# averaged BH values; scale models call a taxon when its 95% interval
# excludes zero
DEFAULT_MODES = {"clr": "test", "mor": "test", "relaxed": "interval", "informed": "interval", "coda": "interval"}


def run_estimator(name, table, rng, S=aldex.DEFAULT_S, mode=None, **model_kw):
    model = make_model(name, table, **model_kw)
    mode = DEFAULT_MODES[name] if mode is None else mode
    return aldex.run_aldex_scale_sim(table, model, table.covariate("condition"), S=S, rng=rng, mode=mode)


def _map(fn, items, threads):
    if threads is None or threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as ex:
        return list(ex.map(fn, items))


def fdr_vs_n(scenario, estimators=("clr", "relaxed"), n_grid=(50, 200, 800), replicates=10, rng=0, S=aldex.DEFAULT_S, threads=1):
    """One row per estimator, n and replicate with confusion metrics.

    Each (n, replicate) pair owns the substream ``("fdr", n, replicate)`` so
    the table does not depend on ``threads``.
    """
    rng = as_rng(rng)
    jobs = [(int(n), r) for n in n_grid for r in range(int(replicates))]

    def job(key):
        n, r = key
        sub = rng.child("fdr", n, r)
        table = simulate_counts(scenario, sub.child("counts"), n=n)
        rows = []
        for name in estimators:
            dt = run_estimator(name, table, sub.child(name), S=S)
            cm = decisions.confusion(dt.significant, scenario.truth)
            rows.append({"estimator": name, "n": n, "replicate": r, **cm.as_dict()})
        return rows

    rows = [row for chunk in _map(job, jobs, threads) for row in chunk]
    return pd.DataFrame(rows)


def summarize_fdr(table):
    g = table.groupby(["estimator", "n"], sort=True)["fdr"]
    out = g.agg(["mean", "std", "count"]).reset_index()
    out["se"] = out["std"].fillna(0.0) / np.sqrt(out["count"])
    return out.rename(columns={"mean": "mean_fdr", "count": "replicates"})[["estimator", "n", "mean_fdr", "se", "replicates"]]


# ---------------------------------------------------------------------------
# sensitivity analysis
# ---------------------------------------------------------------------------

@dataclass
class SensitivityGrid:
    parameter: str
    grid: np.ndarray
    taxa: list
    effect: np.ndarray  # G x D
    significant: np.ndarray  # G x D
    lfc_mean: np.ndarray  # G x D
    logit_ecdf0: np.ndarray  # G x D
    extra: dict = field(default_factory=dict)

    def to_frame(self):
        G, D = self.effect.shape
        return pd.DataFrame(
            {
                "parameter": self.parameter,
                "value": np.repeat(self.grid, D),
                "taxon": np.tile(np.asarray(self.taxa, dtype=object), G),
                "effect_size": self.effect.ravel(),
                "lfc_mean": self.lfc_mean.ravel(),
                "logit_ecdf0": self.logit_ecdf0.ravel(),
                "significant": self.significant.ravel().astype(bool),
            }
        )


def sensitivity_sweep(
    table: CountTable,
    labels=None,
    parameter="gamma",
    grid=None,
    base_gamma=0.2,
    base_alpha=0.6,
    S=aldex.DEFAULT_S,
    rng=0,
    reuse=True,
    gamma_prior=aldex.DEFAULT_GAMMA,
    alpha_level=decisions.DEFAULT_ALPHA,
    threads=1,
):
    """Relaxed-model decisions across a grid of ``gamma`` or ``alpha``.

    Compositions come from the ``"compositions"`` substream and are drawn
    once when ``reuse`` is true, or redrawn for every grid point otherwise;
    grid point ``k`` uses scale substream ``("scale", k)``. Significance is
    interval based.
    """
    if parameter not in ("gamma", "alpha"):
        raise ValueError("parameter must be 'gamma' or 'alpha'")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("sensitivity grid must be a non-empty vector")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("sensitivity grid must be strictly increasing")
    rng = as_rng(rng)
    labels = table.covariate("condition") if labels is None else np.asarray(labels)
    design = (labels == np.unique(labels)[-1]).astype(float)
    shared = aldex.sample_compositions(table, gamma_prior, S, rng.child("compositions")) if reuse else None

    def point(k):
        comp = shared if reuse else aldex.sample_compositions(table, gamma_prior, S, rng.child("compositions"))
        g = grid[k] if parameter == "gamma" else base_gamma
        a = grid[k] if parameter == "alpha" else base_alpha
        model = Relaxed(gamma=g, alpha=a, design=design)
        ls = sample_log_scale(model, S, rng.child("scale", k).generator(), comp_draws=comp, counts=table)
        eta = aldex.compose_eta(comp, ls)
        return decisions.decide(eta.values, labels, alpha_level=alpha_level, mode="interval", taxa=table.taxa)

    tables = _map(point, range(grid.size), threads)
    return SensitivityGrid(
        parameter,
        grid,
        list(table.taxa),
        np.array([t.effect_size for t in tables]),
        np.array([t.significant for t in tables]),
        np.array([t.lfc_mean for t in tables]),
        np.array([t.logit_ecdf0 for t in tables]),
    )


# ---------------------------------------------------------------------------
# effective scale of a normalisation-based estimator
# ---------------------------------------------------------------------------

def mor_point_estimates(table: CountTable, labels=None, pseudocount=0.5):
    """Per-taxon log fold changes and standard errors on median-of-ratios
    normalised counts (a plain stand-in for a size-factor based method)."""
    Y = table.counts.astype(float)
    s = median_of_ratios_size_factors(Y)
    logn = np.log(Y + pseudocount) - np.log(s)
    labels = table.covariate("condition") if labels is None else np.asarray(labels)
    g = labels == np.unique(labels)[-1]
    a, b = logn[:, g], logn[:, ~g]
    theta = a.mean(axis=1) - b.mean(axis=1)
    se = np.sqrt(a.var(axis=1, ddof=1) / a.shape[1] + b.var(axis=1, ddof=1) / b.shape[1])
    return theta, se


def effective_scale_report(theta_hat, se, S=4000, rng=0, grid_points=201):
    """Summary of the scale log-ratio implied by point estimates.

    Returns a dict with moments, the central 95% interval and, unless the
    draws are degenerate, a Gaussian KDE evaluated on an even grid.
    """
    model = EffectiveFromEstimates(theta_hat, se, design=np.ones(1))
    draws = sample_log_scale(model, S, as_rng(rng).child("effective").generator())[:, 0]
    lo, hi = np.percentile(draws, [2.5, 97.5])
    out = {
        "mean": float(draws.mean()),
        "sd": float(draws.std(ddof=1)) if S > 1 else 0.0,
        "q025": float(lo),
        "q975": float(hi),
        "draws": draws,
    }
    if out["sd"] > 0:
        kde = gaussian_kde(draws)
        xs = np.linspace(draws.min() - 3 * out["sd"], draws.max() + 3 * out["sd"], grid_points)
        out["grid"] = xs
        out["density"] = kde(xs)
    else:
        out["grid"] = np.array([out["mean"]])
        out["density"] = np.array([np.inf])
    return out
