import numpy as np
import pytest

from anisograph.jacobi import (certify, default_beta, eval_L, f0_derivs, local_scale,
                               ode_oracle, perturbed_rows)


def test_default_beta_area(area3):
    assert default_beta(area3.curve) == pytest.approx(2.5)


@pytest.mark.parametrize("name", ["area3", "aniso"])
def test_f0_in_kernel(name, request):
    c = request.getfixturevalue(name).curve
    tau = c.grid[(c.grid > 0) & (c.grid <= 1e3)]
    f, d1, d2 = f0_derivs(c, tau)
    assert np.max(np.abs(eval_L(c, f, d1, d2, tau)) / local_scale(c, f, d1, d2, tau)) <= 1e-8


@pytest.mark.parametrize("name", ["area3", "aniso"])
def test_f1_solves_inhomogeneous_equation(name, request):
    ch = request.getfixturevalue(name)
    x = np.geomspace(0.1, 100, 500)
    f, d1, d2 = ch.f1.series_derivs(x)
    rel = np.abs(eval_L(ch.curve, f, d1, d2, x) - ch.f1.g(x)) / ch.f1.g(x)
    assert rel.max() <= 1e-6


@pytest.mark.parametrize("name", ["area3", "aniso"])
def test_f1_matches_ode_oracle(name, request):
    ch = request.getfixturevalue(name)
    x = np.geomspace(0.05, 50, 40)
    ref = ode_oracle(ch.curve, ch.f1.beta, x)
    np.testing.assert_allclose(ch.f1.evaluate(x)[0], ref, rtol=1e-7)


def test_f1_initial_conditions(aniso):
    f, d1, _ = aniso.f1.evaluate(np.array([0.0]))
    assert abs(f[0]) < 1e-14 and abs(d1[0]) < 1e-14


@pytest.mark.parametrize("name", ["area3", "aniso"])
def test_selected_epsilon_is_certified(name, request):
    ch = request.getfixturevalue(name)
    pair = ch.pair
    eps = pair.epsilon0
    assert np.log2(eps) == int(np.log2(eps)) and -20 <= np.log2(eps) <= -1
    cert = certify(ch.curve, ch.f1, eps)
    assert cert["pass"]
    assert pair.kappa_bar > 0 and pair.kappa_under > 0
    # every larger dyadic epsilon in the scan failed
    assert all(not row["pass"] for row in pair.scan[:-1])


def test_sign_conditions_pointwise(aniso):
    c, f1, eps = aniso.curve, aniso.f1, aniso.pair.epsilon0
    tau = c.grid[c.grid > 0]
    g = f1.g(tau)
    up = perturbed_rows(c, f1, eps, tau)
    lo = perturbed_rows(c, f1, -eps, tau)
    assert np.all(up[5] >= eps / 2 * g)
    assert np.all(lo[5] <= -eps / 2 * g)
    assert np.all(up[3] >= lo[3])
