"""Synthetic paired bioreactor study.

Six vessels are sampled early and late. Most taxa keep their absolute
abundance; a handful of low-abundance taxa bloom and two decline, so the
total load grows by a known factor. Each sample carries 2-3 noisy flow
measurements of its log total. Abundances are expressed in units of the
early total, so log scales are of order one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import optimize

from .. import decisions
from ..io import CountTable
from ..mln import MlnPrior, fit_collapsed, run_mln_scale_sim
from ..numkit import as_rng, sample_multinomial
from ..scale_models import (
    ClrRestriction,
    DesignBased,
    FlowEmpirical,
    MedianOfRatiosRestriction,
    PimImplied,
)
from .antibiotic import _map

#: expected log(early total / late total) in the synthetic truth
TARGET_LOG_RATIO = -1.22
DESIGN_DBAR = float(np.log(100.0 / 400.0))
DESIGN_TAU = 1.0


@dataclass(frozen=True)
class BioreactorScenario:
    log_base: np.ndarray  # D, early log abundance
    lfc: np.ndarray  # D, late minus early
    n_vessels: int = 6
    vessel_sd: float = 0.3
    sample_sd: float = 0.15
    flow_sd: float = 0.1
    depth: int = 10000

    @property
    def D(self):
        return self.log_base.size

    @property
    def truth(self):
        return self.lfc != 0

    @property
    def log_scale_ratio(self):
        """``log(total early / total late)`` of the noise-free rates."""
        return float(
            np.log(np.exp(self.log_base).sum()) - np.log(np.exp(self.log_base + self.lfc).sum())
        )


def build_bioreactor(target=TARGET_LOG_RATIO, D=20, n_up=9, n_down=2, **kw):
    """Rates whose early-over-late total ratio is ``exp(target)``.

    The first ``n_up`` taxa start rare and increase; the last ``n_down`` are
    the most abundant and decrease. Increases share a common multiplier chosen by root
    finding.
    """
    if n_up + n_down > D:
        raise ValueError("more changed taxa than taxa")
    rare = np.geomspace(0.004, 0.012, n_up)
    common = np.geomspace(0.02, 0.15, D - n_up)
    base = np.concatenate([rare, common])
    base = base / base.sum()
    up_shape = np.linspace(3.0, 4.0, n_up)
    down = -np.linspace(3.0, 3.5, n_down) if n_down else np.zeros(0)

    def lfc_for(m):
        lfc = np.zeros(D)
        lfc[:n_up] = m * up_shape
        lfc[D - n_down:] = down
        return lfc

    def gap(m):
        return BioreactorScenario(np.log(base), lfc_for(m), **kw).log_scale_ratio - target

    m = optimize.brentq(gap, 0.0, 5.0, xtol=1e-14)
    return BioreactorScenario(np.log(base), lfc_for(m), **kw)


def simulate_bioreactor(scenario: BioreactorScenario, rng):
    """Counts for every (vessel, timepoint) sample plus flow replicates."""
    gen = as_rng(rng).generator()
    V, D = scenario.n_vessels, scenario.D
    vessel_eff = gen.normal(0.0, scenario.vessel_sd, size=(D, V))
    vessel = np.repeat(np.arange(V), 2)
    timepoint = np.tile([0, 1], V)
    loga = (
        scenario.log_base[:, None]
        + scenario.lfc[:, None] * timepoint
        + vessel_eff[:, vessel]
        + gen.normal(0.0, scenario.sample_sd, size=(D, 2 * V))
    )
    a = np.exp(loga)
    totals = a.sum(axis=0)
    counts = sample_multinomial(a / totals, np.full(2 * V, scenario.depth), gen)
    n_rep = gen.integers(2, 4, size=2 * V)
    reps = [np.log(totals[j]) + gen.normal(0.0, scenario.flow_sd, size=n_rep[j]) for j in range(2 * V)]
    flow = FlowEmpirical.from_replicates(reps)
    samples = [f"v{v + 1}_t{'early' if t == 0 else 'late'}" for v, t in zip(vessel, timepoint)]
    md = pd.DataFrame(
        {
            "vessel": vessel,
            "timepoint": timepoint,
            "log_scale": np.log(totals),
            "flow_mean": flow.mu,
            "flow_sd": flow.sigma,
            "flow_n": n_rep,
        },
        index=pd.Index(samples, name="sample"),
    )
    return CountTable(counts, [f"taxon_{i + 1}" for i in range(D)], samples, md)


def design_matrix(table: CountTable):
    """One-hot vessel indicators followed by the timepoint indicator."""
    vessel = table.covariate("vessel")
    levels = np.unique(vessel)
    X = (vessel[None, :] == levels[:, None]).astype(float)
    return np.vstack([X, table.covariate("timepoint").astype(float)[None, :]])


def default_prior(table: CountTable):
    return MlnPrior.weak_default(table.shape[0], design_matrix(table))


BIOREACTOR_ESTIMATORS = ("flow", "design", "clr", "mor", "pim")


def make_model(name, table: CountTable, prior: MlnPrior, dbar=DESIGN_DBAR, tau=DESIGN_TAU):
    if name == "flow":
        return FlowEmpirical(table.covariate("flow_mean").astype(float), table.covariate("flow_sd").astype(float))
    if name == "design":
        return DesignBased(dbar=dbar, tau=tau, timepoint=table.covariate("timepoint").astype(float))
    if name == "clr":
        return ClrRestriction()
    if name == "mor":
        return MedianOfRatiosRestriction()
    if name == "pim":
        return PimImplied(prior.M, prior.Gamma, prior.nu, prior.Xi, prior.X)
    raise ValueError(f"unknown bioreactor estimator '{name}'")


def run_bioreactor(table: CountTable, estimators=BIOREACTOR_ESTIMATORS, S=1000, rng=0, prior=None):
    """Fit the collapsed posterior once and run every scale model on it.

    Returns ``{name: DecisionTable}`` for the timepoint coefficient.
    """
    rng = as_rng(rng)
    prior = default_prior(table) if prior is None else prior
    cp = fit_collapsed(table, prior)
    out = {}
    for name in estimators:
        model = make_model(name, table, prior)
        out[name] = run_mln_scale_sim(table, prior, model, S=S, rng=rng.child(name), cp=cp).table
    return out


def bootstrap_vessels(table: CountTable, n_vessels, rng):
    """Resample whole vessels with replacement and redraw their counts.

    Each chosen vessel contributes both of its samples; counts are redrawn
    from the observed proportions at the observed depth and flow summaries
    are carried along.
    """
    gen = as_rng(rng).generator()
    vessel = table.covariate("vessel")
    levels = np.unique(vessel)
    chosen = gen.choice(levels, size=int(n_vessels), replace=True)
    cols, new_vessel = [], []
    for k, v in enumerate(chosen):
        idx = np.flatnonzero(vessel == v)
        cols.extend(idx.tolist())
        new_vessel.extend([k] * idx.size)
    cols = np.asarray(cols)
    Y = table.counts[:, cols].astype(float)
    depth = Y.sum(axis=0)
    counts = sample_multinomial(Y / depth, depth.astype(np.int64), gen)
    md = table.metadata.iloc[cols].copy()
    md["vessel"] = new_vessel
    samples = [f"b{k + 1}_{s}" for k, s in zip(new_vessel, md.index)]
    md.index = pd.Index(samples, name="sample")
    return CountTable(counts, table.taxa, samples, md)


def vessel_bootstrap(
    table: CountTable,
    truth,
    n_vessels_grid=(1, 6, 12),
    replicates=10,
    estimators=("clr", "mor", "design"),
    S=500,
    rng=0,
    threads=1,
):
    """Mean FDR per estimator and vessel count over bootstrap replicates.

    With a single vessel the timepoint effect is still estimable from the
    pair, so the output is defined for every grid value.
    """
    rng = as_rng(rng)
    truth = np.asarray(truth, dtype=bool)
    jobs = [(int(v), r) for v in n_vessels_grid for r in range(int(replicates))]

    def job(key):
        v, r = key
        sub = rng.child("bootstrap", v, r)
        boot = bootstrap_vessels(table, v, sub.child("resample"))
        res = run_bioreactor(boot, estimators, S=S, rng=sub.child("fit"))
        rows = []
        for name, dt in res.items():
            cm = decisions.confusion(dt.significant, truth)
            rows.append({"estimator": name, "n_vessels": v, "replicate": r, **cm.as_dict()})
        return rows

    rows = [row for chunk in _map(job, jobs, threads) for row in chunk]
    return pd.DataFrame(rows)
