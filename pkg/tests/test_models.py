import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mfglab.autodiff as ad
from mfglab import models
from mfglab.models import (CrowdedTradeParams, GaussianInit, MeasureSummary,
                           MissingSummaryError, PriceImpactParams,
                           SystemicRiskParams, UnsupportedModelError,
                           build_model)


def test_price_impact_running_cost_substitutions():
    m = build_model("price_impact")
    s = MeasureSummary(control_mean=0.0)
    assert models.evaluate_running_cost(m, 0.0, s, 0.0) == 0.0
    # c_alpha=1, c_x=2, x=1, alpha=1, mean control 0: 0.5 + 1.0 - 0 = 1.5
    assert models.evaluate_running_cost(m, 1.0, s, 1.0) == 1.5


def test_price_impact_drift_is_alpha():
    m = build_model("price_impact")
    rng = np.random.default_rng(0)
    s = MeasureSummary(control_mean=0.3)
    for _ in range(100):
        x, a = rng.normal(size=2)
        assert models.evaluate_drift(m, x, s, a) == a


def test_systemic_risk_drift_substitutions():
    m = build_model("systemic_risk")
    assert models.evaluate_drift(m, 0.0, MeasureSummary(state_mean=0.0), 0.0) == 0.0
    # a=1, mbar=1, x=0, alpha=0.5 -> 1.5
    assert models.evaluate_drift(m, 0.0, MeasureSummary(state_mean=1.0), 0.5) == 1.5


def test_systemic_risk_completed_square():
    # at alpha = q (mbar - x) the running cost collapses to (eps-q^2)(mbar-x)^2/2
    m = build_model("systemic_risk")
    p = m.p
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, mbar = rng.normal(size=2)
        a = p.q * (mbar - x)
        got = models.evaluate_running_cost(m, x, MeasureSummary(state_mean=mbar), a)
        want = 0.5 * (p.eps - p.q ** 2) * (mbar - x) ** 2
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_crowded_trade_minimizer_convention():
    # in the profit form of the broker problem the control is grad_v/(2 kappa);
    # here the value is a cost (u = -v), so the same point grad_v = 2 means
    # p = -2 and the minimizer comes out at +1, with the control term
    # contributing p^2/(4 kappa) = 1 in magnitude
    m = build_model("crowded_trade")
    s = MeasureSummary(control_mean=0.0)
    h, a = models.optimized_hamiltonian(m, 0.0, s, -2.0)
    assert a == 1.0
    h0, _ = models.optimized_hamiltonian(m, 0.0, s, 0.0)
    assert h0 - h == pytest.approx((-2.0) ** 2 / 4.0, abs=1e-15)


def test_crowded_trade_reproduces_reduced_hjb_identity():
    # with v the profit value and u = -v its cost twin, dt(v) = H*(q, du) and
    # the published identity dt(v) - phi q^2 + (dv)^2/(4 kappa) = -gamma mubar q
    # must hold pointwise
    m = build_model("crowded_trade")
    p = m.p
    rng = np.random.default_rng(3)
    for _ in range(100):
        q, pv, mubar = rng.normal(size=3) * 3.0
        s = MeasureSummary(control_mean=mubar)
        hstar, astar = models.optimized_hamiltonian(m, q, s, -pv)
        assert astar == pytest.approx(pv / (2 * p.kappa), rel=1e-12, abs=1e-12)
        lhs = hstar - p.phi * q ** 2 + pv ** 2 / (4 * p.kappa)
        assert lhs == pytest.approx(-p.gamma * mubar * q, rel=1e-12, abs=1e-9)


def _summary_for(m):
    if m.interaction == "control-distribution":
        return MeasureSummary(state_mean=0.2, control_mean=-0.4)
    return MeasureSummary(state_mean=0.2, control_mean=-0.4)


@pytest.mark.parametrize("name", ["price_impact", "price_impact_coop",
                                  "systemic_risk", "crowded_trade"])
def test_hamiltonian_matches_brute_force_grid(name):
    m = build_model(name)
    s = _summary_for(m)
    rng = np.random.default_rng(7)
    agrid = np.linspace(-10.0, 10.0, 4001)
    for _ in range(100):
        x = rng.normal() * 2.0
        p = rng.normal() * 2.0
        hstar, astar = models.optimized_hamiltonian(m, x, s, p)
        vals = (models.evaluate_running_cost(m, x, s, agrid)
                + p * models.evaluate_drift(m, x, s, agrid * np.ones_like(agrid)))
        k = int(np.argmin(vals))
        assert astar == pytest.approx(agrid[k], abs=1e-2)
        # grid minimum cannot beat the closed-form value, and the closed-form
        # value cannot exceed the cost at its own minimizer
        at_min = (models.evaluate_running_cost(m, x, s, astar)
                  + p * models.evaluate_drift(m, x, s, astar))
        assert hstar <= vals[k] + 1e-8
        assert hstar == pytest.approx(at_min, rel=1e-12, abs=1e-12)


def test_model_functions_work_on_graph_nodes():
    m = build_model("systemic_risk")
    rng = np.random.default_rng(5)
    xs = rng.normal(size=10)
    als = rng.normal(size=10)
    g = ad.Graph()
    xn = g.var(xs)
    an = g.var(als)
    s_np = MeasureSummary(state_mean=float(xs.mean()))
    s_nd = MeasureSummary(state_mean=xn.mean())
    out = models.evaluate_running_cost(m, xn, s_nd, an)
    ref = models.evaluate_running_cost(m, xs, s_np, als)
    assert np.allclose(out.value, ref, rtol=1e-15, atol=1e-15)
    dr = models.evaluate_drift(m, xn, s_nd, an)
    assert np.allclose(dr.value, models.evaluate_drift(m, xs, s_np, als))


def test_missing_summary_statistic_is_named():
    m = build_model("price_impact")
    with pytest.raises(MissingSummaryError) as ei:
        models.evaluate_running_cost(m, 1.0, MeasureSummary(state_mean=0.0), 1.0)
    assert "control_mean" in str(ei.value)
    m2 = build_model("systemic_risk")
    with pytest.raises(MissingSummaryError) as ei2:
        models.evaluate_drift(m2, 1.0, MeasureSummary(control_mean=0.0), 1.0)
    assert "state_mean" in str(ei2.value)


def test_param_invariants():
    with pytest.raises(ValueError):
        PriceImpactParams(c_alpha=0.0)
    with pytest.raises(ValueError):
        PriceImpactParams(sigma=-1.0)
    with pytest.raises(ValueError):
        SystemicRiskParams(q=0.9, eps=0.75)  # q > eps^2
    with pytest.raises(ValueError):
        SystemicRiskParams(rho=1.5)
    with pytest.raises(ValueError):
        CrowdedTradeParams(kappa=-1.0)
    with pytest.raises(ValueError):
        GaussianInit(0.0, 0.0)
    # default parameter set satisfies the convexity condition
    p = SystemicRiskParams()
    assert p.q <= p.eps ** 2


def test_nonconvex_hamiltonian_rejected():
    m = build_model("crowded_trade")
    object.__setattr__(m.p, "kappa", -1.0)  # bypass frozen params on purpose
    with pytest.raises(UnsupportedModelError):
        models.optimized_hamiltonian(m, 0.0, MeasureSummary(control_mean=0.0), 1.0)


def test_registry_defaults_match_published_constants():
    pi = build_model("price_impact")
    assert (pi.p.c_x, pi.p.c_alpha, pi.p.c_g, pi.p.sigma, pi.T) == (2.0, 1.0, 0.3, 0.5, 1.0)
    sr = build_model("systemic_risk")
    assert (sr.p.a, sr.p.q, sr.p.eps, sr.p.c, sr.p.sigma, sr.p.rho, sr.T) == \
        (1.0, 0.5, 0.75, 1.0, 0.5, 0.5, 0.5)
    assert sr.common_noise and sr.rho == 0.5
    ct = build_model("crowded_trade")
    assert (ct.p.kappa, ct.p.phi, ct.p.big_a, ct.p.gamma, ct.T) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert ct.m0.moments() == (4.0, 0.3)
    with pytest.raises(KeyError):
        build_model("nope")


def test_registry_overrides():
    m = build_model("price_impact", {"gamma": 1.0, "m0_mean": 2.0, "m0_var": 0.5, "T": 2.0})
    assert m.p.gamma == 1.0 and m.m0.moments() == (2.0, 0.5) and m.T == 2.0


@given(st.floats(-3, 3), st.floats(0.05, 2.0), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_gaussian_init_sampler_matches_density_moments(mean, var, seed):
    g = GaussianInit(mean, var)
    rng = np.random.default_rng(seed)
    xs = g.sample(rng, 20000)
    se_mean = np.sqrt(var / xs.size)
    assert abs(xs.mean() - mean) < 5 * se_mean
    # var of sample variance for a Gaussian is 2 var^2/(n-1)
    se_var = np.sqrt(2.0 * var ** 2 / (xs.size - 1))
    assert abs(xs.var(ddof=1) - var) < 5 * se_var
    # density integrates to 1 and has the right first two moments
    lo, hi = mean - 8 * np.sqrt(var), mean + 8 * np.sqrt(var)
    grid = np.linspace(lo, hi, 4001)
    dens = g.density(grid)
    w = np.trapezoid(dens, grid)
    assert w == pytest.approx(1.0, abs=1e-8)
    assert np.trapezoid(grid * dens, grid) == pytest.approx(mean, abs=1e-7)
    assert np.trapezoid((grid - mean) ** 2 * dens, grid) == pytest.approx(var, rel=1e-6)
