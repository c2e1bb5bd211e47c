import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from anisograph.errors import InfeasibleFamily
from anisograph.foliation import (check_trapping, fit_asymptotics, fixed_step_sigma,
                                  integrate_sigma, leaf_residual, mod_bounds, phase_field,
                                  phase_trajectory, trap_margin)
from anisograph.integrand import Area, EvenSeries, build_phi, fixed_point_matrix


def test_area_series_start(area3):
    assert 2 * area3.curve.c2 == pytest.approx(3 / 4, abs=1e-14)


def test_aniso_series_start(aniso):
    v0, _, d2 = aniso.profile.derivatives(0.0, 2)
    assert 2 * aniso.curve.c2 == pytest.approx(v0 / (2 * d2), rel=1e-12)


@pytest.mark.parametrize("name", ["area3", "aniso"])
def test_curve_invariants(name, request):
    c = request.getfixturevalue(name).curve
    assert c.sigma[0] == 1.0 and c.dsigma[0] == 0.0
    assert np.all(np.diff(c.grid) > 0)
    assert np.all(c.sigma > c.grid)
    assert np.all(c.ddsigma > 0)
    assert np.max(c.residual) <= c.tol_ode


def test_area_tail_monotone(area3):
    c = area3.curve
    far = c.grid >= 1.0
    ex = c.sigma[far] - c.grid[far]
    assert np.all(np.diff(ex) < 0)
    assert np.all(c.dsigma[1:] < 1.0)
    assert 1.0 - c.dsigma[-1] < 1e-6


def test_even_extension(aniso):
    t = np.array([1e-4, 0.3, 2.0, 50.0])
    a, b = aniso.curve.evaluate(t), aniso.curve.evaluate(-t)
    np.testing.assert_allclose(b[0], a[0], rtol=1e-15)
    np.testing.assert_allclose(b[1], -a[1], rtol=1e-15)


def test_area_k3_fit(area3):
    fit = fit_asymptotics(area3.curve)
    assert abs(fit["mu_fit"] - 2.0) <= 0.02 * 2.0
    assert fit["a"] > 0


def test_area_k4_fit_and_runtime():
    t0 = time.perf_counter()
    c = integrate_sigma(build_phi(Area(4)))
    elapsed = time.perf_counter() - t0
    target = 3.5 - math.sqrt(4.25)
    assert abs(fit_asymptotics(c)["mu_fit"] - target) <= 0.02 * target
    assert elapsed < 10.0


def test_aniso_fit_band(aniso):
    assert 0.2375 <= fit_asymptotics(aniso.curve)["mu_fit"] <= 0.2625


def test_fixed_point_and_eigenvalues(aniso):
    prof = aniso.profile
    V = phase_field(prof, 1.0, 1.0)
    assert abs(V[0]) == 0.0 and abs(V[1]) < 1e-12
    eig = np.sort(np.linalg.eigvals(fixed_point_matrix(prof)).real)
    np.testing.assert_allclose(eig, [-1.75, -1.25], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(mu=st.floats(0.02, 0.48))
def test_symmetric_part_bracket(mu):
    try:
        prof = build_phi(EvenSeries.with_degree(8), mu)
    except InfeasibleFamily:
        assume(False)
    M = fixed_point_matrix(prof)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(M).real), [mu - 2, -1 - mu], atol=1e-9)
    sym = np.linalg.eigvalsh(M + M.T)
    assert np.all(sym > -5) and np.all(sym < -1.5)


def test_trap_margin_examples():
    assert trap_margin(1.0, 1.0) == 0.0
    assert trap_margin(2.0, 0.9) > 0


def test_aniso_trapping_and_bounds(aniso):
    traj = phase_trajectory(aniso.curve)
    rep = check_trapping(traj)
    assert rep.passed and rep.min_margin >= 1e-6
    assert mod_bounds(traj)["pass"]
    sl = traj.slopes()
    # the q component decays strictly faster than the p component
    assert sl["q"] < sl["p"]
    assert sl["p"] == pytest.approx(-1.25, abs=0.05)


def test_rk4_order(area3):
    taus = np.array([0.5, 2.0, 5.0])
    ref = area3.curve.evaluate(taus)[0]
    errs = [np.max(np.abs(fixed_step_sigma(area3.profile, taus, n) - ref))
            for n in (20, 40, 80)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.9)


def test_residual_reported_small(aniso):
    t = np.geomspace(1e-3, 1e4, 60)
    assert np.max(np.abs(leaf_residual(aniso.curve, t))) <= 1e-8


def test_tol_range_enforced(area3):
    with pytest.raises(ValueError):
        integrate_sigma(area3.profile, tol_ode=1e-3)
