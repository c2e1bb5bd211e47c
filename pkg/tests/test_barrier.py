import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from anisograph.barrier import (BarrierParams, StackingProfile, eval_I, leaf_samples,
                                lower_growth, solve_I, stacking_exponents)
from anisograph.pipeline import closed_form_checks


def test_rescale_factor_quarter():
    p = BarrierParams.create("aniso", 0.25, 0.5)
    assert p.R_scale == 1 / 32


@pytest.mark.parametrize("kind,mu,beta", [("aniso", 0.25, 0.5), ("area", 2.0, 2.5)])
def test_I_endpoints(kind, mu, beta):
    p = BarrierParams.create(kind, mu, beta)
    d = p.delta
    assert float(eval_I(d, 0.0)) == pytest.approx(math.pi / (2 * d), rel=1e-15)
    assert float(eval_I(d, 1.0)) == pytest.approx(math.pi / (4 * d), rel=1e-15)
    assert closed_form_checks(p)["pass"]


@settings(max_examples=50, deadline=None)
@given(st.floats(0.02, 1.0), st.floats(-5, 5))
def test_I_against_quadrature_and_inverse(delta, log_s):
    s = math.exp(log_s)
    ref, _ = quad(lambda x: math.exp(delta * x) / (1 + math.exp(2 * delta * x)),
                  -math.inf, -log_s, epsabs=0, epsrel=1e-12, limit=400)
    assert float(eval_I(delta, s)) == pytest.approx(ref, rel=1e-9)
    assert solve_I(delta, float(eval_I(delta, s))) == pytest.approx(log_s, abs=1e-9)


def test_stacking_exponents_positive():
    for kind, mu, beta in (("aniso", 0.1, 0.5), ("aniso", 0.4, 0.5), ("area", 2.0, 2.5)):
        g, M, d = stacking_exponents(kind, mu, beta)
        assert 0 < g < 1 and M > 0 and d > 0


@pytest.mark.parametrize("B", [1.0, 16.0])
def test_stacking_profile_monotone_and_concave(B):
    p = BarrierParams.create("aniso", 0.25, 0.5)
    p = BarrierParams(**{**p.to_dict(), "A": 4.0, "B": B})
    prof = StackingProfile(p, upper=True, log_s_max=20.0)
    v = np.linspace(-10, 19, 300)
    lh = prof.log_value(v)
    # for large B nearly all of H sits below s = e^-10 and later gains are below rounding
    assert np.all(np.diff(lh) > 0) if B < 2 else np.all(np.diff(lh) >= 0)
    # log H' decreasing means H'' < 0
    assert np.all(np.diff(prof.log_slope(v)) < 0)
    assert prof.curvature_sign == -1.0


def test_stacking_profile_matches_direct_integral():
    p = BarrierParams.create("aniso", 0.25, 0.5)
    p = BarrierParams(**{**p.to_dict(), "A": 4.0, "B": 1.0})
    prof = StackingProfile(p, upper=True, log_s_max=5.0)
    slope = lambda s: p.A * s ** -p.gamma + math.exp(p.B * float(eval_I(p.delta, s)))
    ref, _ = quad(slope, 0.0, 2.0, epsabs=0, epsrel=1e-11, limit=400, points=[1e-6, 1e-3])
    assert float(prof.log_value(math.log(2.0))[0]) == pytest.approx(math.log(ref), abs=1e-8)


def test_leaf_samples_lower_inside_region():
    p = BarrierParams.create("aniso", 0.25, 0.5)
    p = BarrierParams(**{**p.to_dict(), "lambda_C": 1e-3})
    lam, tau = leaf_samples(p, 1e4, 1000, np.random.default_rng(0), upper=False)
    assert np.all(lam <= 1e-3) and np.all(tau >= 0) and np.all(tau <= 1e4)


def test_barriers_from_pipeline(runs):
    for name in ("area", "aniso"):
        st_ = runs[name].report.stages["barrier"]
        assert st_["sign_upper"]["pass"] and st_["sign_lower"]["pass"]
        assert st_["sign_upper"]["n"] == 10_000 and st_["sign_lower"]["n"] == 10_000
        assert st_["ordering"]["violations"] == 0
        bp = runs[name].arts["barrier"]["barriers"]
        assert bp.lower.R == bp.params.R_scale


def test_upper_barrier_dominates_lower(runs):
    bp = runs["aniso"].arts["barrier"]["barriers"]
    th = np.linspace(np.pi / 4 + 0.01, np.pi / 2, 20)
    for r in (1.0, 1e3, 1e6):
        su, lu = bp.upper.log_eval_reduced(r * np.cos(th), r * np.sin(th))
        sl, ll = bp.lower.log_eval_reduced(r * np.cos(th), r * np.sin(th))
        assert np.all(su > 0)
        assert np.all((sl <= 0) | (ll <= lu))


def test_lower_growth_is_diagnostic(runs):
    bp = runs["area"].arts["barrier"]["barriers"]
    logs, slope = lower_growth(bp.lower, [10.0, 100.0])
    # the lower barrier is zero on practical balls
    assert np.all(~np.isfinite(logs)) and math.isnan(slope)
