import numpy as np
import pytest

from scalesim.numkit import Rng
from scalesim.studies import antibiotic as ab
from scalesim.studies import bioreactor as br


@pytest.fixture(scope="module")
def scenario():
    return ab.build_scenario(0.1, n=100)


def test_target_delta_is_met(scenario):
    assert scenario.delta() == pytest.approx(0.1, abs=1e-3)
    assert scenario.truth.sum() == 4
    assert np.all(scenario.true_lfc[~scenario.truth] == 0)
    assert np.all(scenario.true_lfc[scenario.truth] < 0)


def test_zero_target_is_null():
    sc = ab.build_scenario(0.0)
    assert np.array_equal(sc.lam[:, 0], sc.lam[:, 1])
    assert sc.delta() == 0.0 and not sc.truth.any()


def test_target_range():
    # the discrepancy grows without bound as the affected taxa vanish, so
    # only negative targets are infeasible
    assert ab.build_scenario(5.0).delta() == pytest.approx(5.0, abs=1e-3)
    with pytest.raises(ab.ScenarioError):
        ab.build_scenario(-0.1)


def test_simulated_depth_and_proportions(scenario):
    t = ab.simulate_counts(scenario, Rng(1), n=400)
    assert np.all(t.counts.sum(axis=0) == 5000)
    pre = t.counts[:, t.covariate("condition") == 0]
    target = scenario.lam[:, 0] / scenario.lam[:, 0].sum()
    # Poisson abundances then multinomial: per-sample share varies a little
    emp = pre.sum(axis=1) / pre.sum()
    assert np.all(np.abs(emp - target) < 0.003)


def test_zero_rate_taxon_gives_zero_counts(scenario):
    lam = scenario.lam.copy()
    lam[0] = 0.0
    sc = ab.AntibioticScenario(lam, scenario.truth)
    t = ab.simulate_counts(sc, Rng(2), n=10)
    assert np.all(t.counts[0] == 0)


def test_fdr_curve_shape_and_threads(scenario):
    kw = dict(estimators=("clr", "relaxed"), n_grid=(20,), replicates=2, rng=Rng(3), S=16)
    a = ab.fdr_vs_n(scenario, threads=1, **kw)
    b = ab.fdr_vs_n(scenario, threads=3, **kw)
    assert a.equals(b)
    s = ab.summarize_fdr(a)
    assert list(s.columns) == ["estimator", "n", "mean_fdr", "se", "replicates"]


def test_sensitivity_gamma_zero_matches_fixed_mu(scenario):
    t = ab.simulate_counts(scenario, Rng(4), n=40)
    sg = ab.sensitivity_sweep(t, grid=[0.0, 0.5], S=32, rng=Rng(5))
    assert sg.to_frame().shape == (2 * 21, 7)
    # the gamma = 0 point is the mu = 0 log-normal family member, draw for draw
    from scalesim import aldex, decisions
    from scalesim.scale_models import LogNormalFamily, sample_log_scale

    r = Rng(5)
    comp = aldex.sample_compositions(t, 0.5, 32, r.child("compositions"))
    ls = sample_log_scale(LogNormalFamily(np.zeros(40), 0.6), 32, r.child("scale", 0).generator())
    ref = decisions.decide(aldex.compose_eta(comp, ls).values, t.covariate("condition"), mode="interval")
    assert np.array_equal(sg.significant[0], ref.significant)
    assert np.allclose(sg.effect[0], ref.effect_size)
    with pytest.raises(ValueError):
        ab.sensitivity_sweep(t, grid=[], S=4)


def test_effective_scale_point_mass():
    rep = ab.effective_scale_report(np.array([0.2, -0.4, 0.1]), np.zeros(3), S=10, rng=0)
    assert rep["sd"] == 0.0 and rep["mean"] == pytest.approx(-0.1 / 3)


def test_effective_scale_sign_on_scenario(scenario):
    t = ab.simulate_counts(scenario, Rng(6), n=100)
    theta, se = ab.mor_point_estimates(t)
    rep = ab.effective_scale_report(theta, se, S=4000, rng=1)
    # the abundant-taxon losses shrink the true scale; the implied shift is negative
    assert rep["q975"] < 0


def test_bioreactor_target():
    sc = br.build_bioreactor()
    assert sc.log_scale_ratio == pytest.approx(br.TARGET_LOG_RATIO, abs=1e-10)
    assert sc.truth.sum() == 11
    t = br.simulate_bioreactor(sc, Rng(7))
    assert t.shape == (20, 12)
    assert set(t.metadata.columns) >= {"vessel", "timepoint", "flow_mean", "flow_sd", "flow_n"}
    assert np.all(t.covariate("flow_n") >= 2)
    X = br.design_matrix(t)
    assert X.shape == (7, 12) and np.all(X[:6].sum(axis=0) == 1)


def test_bootstrap_resamples_whole_vessels():
    sc = br.build_bioreactor()
    t = br.simulate_bioreactor(sc, Rng(8))
    b = br.bootstrap_vessels(t, 4, Rng(9))
    assert b.shape == (20, 8)
    assert np.array_equal(np.bincount(b.covariate("vessel")), [2, 2, 2, 2])
    assert np.all(b.counts.sum(axis=0) == t.counts.sum(axis=0)[0])
