import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from anisograph.model import (HomogeneousModel, contraction_fd_order, curvature_term,
                              full_contraction)


@pytest.fixture(scope="module")
def models(aniso, area3):
    return {"aniso": [HomogeneousModel(aniso.pair, s) for s in (1, -1)],
            "area": [HomogeneousModel(area3.pair, s) for s in (1, -1)],
            "stacks": {"aniso": aniso.stack, "area": area3.stack}}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(0.05, 20))
def test_homogeneous_of_degree_one_plus_mu(models, p, t):
    m = models["aniso"][0]
    p = np.array([p])
    x, y = np.linalg.norm(p[0, :2]), np.linalg.norm(p[0, 2:])
    assume(abs(x - y) > 1e-3 * (x + y) and x + y > 1e-2)
    v = m.value(p)[0]
    assert m.value(t * p)[0] == pytest.approx(t ** 1.25 * v, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_odd_across_cone(models, p):
    m = models["aniso"][1]
    p = np.array([p])
    assume(np.linalg.norm(p) > 1e-2)
    swapped = np.concatenate([p[:, 2:], p[:, :2]], axis=1)
    assert m.value(swapped)[0] == pytest.approx(-m.value(p)[0], abs=1e-12 * (1 + abs(m.value(p)[0])))


def test_chart_roundtrip(models, rng):
    m = models["area"][0]
    th = rng.uniform(np.pi / 4 + 1e-3, np.pi / 2, 300)
    r = rng.uniform(0.1, 3, 300)
    xi, ze = r * np.cos(th), r * np.sin(th)
    lam, tau = m.chart_invert(xi, ze)
    X, Z = m.leaf_point(lam, tau)
    np.testing.assert_allclose(X, xi, atol=1e-10)
    np.testing.assert_allclose(Z, ze, atol=1e-10)


@pytest.mark.parametrize("name,tmax", [("aniso", 1e3), ("area", 30.0)])
def test_curvature_identity(models, name, tmax, rng):
    stack = models["stacks"][name]
    lam = 10.0 ** rng.uniform(-2, 2, 200)
    tau = 10.0 ** rng.uniform(-3, np.log10(tmax), 200)
    tau[:10] = 0.0
    for m in models[name]:
        lhs, rhs = curvature_term(m, stack, lam, tau)
        assert np.max(np.abs(lhs - rhs) / np.abs(rhs)) <= 1e-6
        # sign: negative on the upper leaf, positive on the lower
        assert np.all(m.side * rhs < 0)


def test_full_space_contraction_matches_reduced(models):
    stack = models["stacks"]["aniso"]
    tau = np.array([0.0, 0.5, 3.0, 30.0])
    for m in models["aniso"]:
        p = m.lifted_point(np.ones_like(tau), tau)
        lhs, _ = curvature_term(m, stack, np.ones_like(tau), tau)
        np.testing.assert_allclose(full_contraction(m, stack, p), lhs, rtol=1e-8)


def test_fd_contraction_second_order(models):
    stack = models["stacks"]["aniso"]
    for m in models["aniso"]:
        errs, orders = contraction_fd_order(m, stack, np.array([0.3, 1.0, 2.0]))
        assert np.all(np.diff(errs) < 0)
        assert orders[-1] >= 1.9
