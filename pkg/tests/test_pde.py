import math
from dataclasses import replace

import numpy as np
import pytest
import sympy as sp

from anisograph import pde
from anisograph.errors import GradientOutOfDomain, NoConvergence, Unstable
from anisograph.model import HomogeneousModel, curvature_term


def test_polar_to_cartesian_formulas():
    r, t = sp.symbols("r t", positive=True)
    x, z = sp.symbols("x z", positive=True)
    U = x ** 3 * z + sp.sin(x) * z ** 2 + sp.exp(z - x)
    sub = {x: r * sp.cos(t), z: r * sp.sin(t)}
    Up = U.subs(sub)
    polar = [sp.diff(Up, r), sp.diff(Up, t), sp.diff(Up, r, 2), sp.diff(Up, r, t),
             sp.diff(Up, t, 2)]
    exact = [sp.diff(U, x), sp.diff(U, z), sp.diff(U, x, 2), sp.diff(U, x, z), sp.diff(U, z, 2)]
    for rv, tv in ((0.7, 0.9), (2.3, 1.3), (1.1, 0.2)):
        vals = [float(e.subs({r: rv, t: tv})) for e in polar]
        got = pde.cartesian_from_polar(*vals, rv, tv)
        want = [float(e.subs({x: rv * math.cos(tv), z: rv * math.sin(tv)})) for e in exact]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_polar_derivatives_second_order():
    errs = []
    for n in (32, 64, 128):
        g = pde.SectorGrid(1.0, n, n, 1)
        U = g.RHO ** 2 * np.sin(2 * g.TH) + g.RHO ** 3
        Ur, Ut, Urr, Urt, Utt = pde.polar_derivatives(U, g)
        sl = np.s_[2:-2, 2:-2]
        errs.append(np.max(np.abs(Urt - 4 * g.RHO * np.cos(2 * g.TH))[sl]))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert orders.min() > 1.9


def test_sector_grid_invariants():
    g = pde.SectorGrid(25.0, 64, 64, 3)
    assert g.theta[0] == pytest.approx(math.pi / 4) and g.theta[-1] == pytest.approx(math.pi / 2)
    assert np.all(g.ZETA >= g.XI - 1e-12) and np.all(g.XI >= 0)
    assert g.rho[0] == pytest.approx(25e-3)
    assert g.diagonal_column() == 0
    with pytest.raises(ValueError):
        pde.SectorGrid(1.0, k=0)


def test_area_operator_is_minimal_surface(area3):
    rng = np.random.default_rng(3)
    xi, zeta = rng.uniform(0.1, 1, 20), rng.uniform(1.1, 2, 20)
    d = rng.normal(size=(5, 20))
    Ux, Uz, Uxx, Uxz, Uzz = d
    val = pde.reduced_operator(area3.stack, 3, (xi, zeta, Ux, Uz, Uxx, Uxz, Uzz))
    W2 = 1 + Ux ** 2 + Uz ** 2
    ref = ((1 + Uz ** 2) * Uxx - 2 * Ux * Uz * Uxz + (1 + Ux ** 2) * Uzz) / W2 ** 1.5 \
        + 3 * (Ux / xi + Uz / zeta) / W2 ** 0.5
    np.testing.assert_allclose(val, ref, rtol=1e-10)


def test_linear_function_operator(area3):
    zeta = np.array([1.0, 2.0, 5.0])
    one, zero = np.ones(3), np.zeros(3)
    val = pde.reduced_operator(area3.stack, 3, (zero, zeta, zero, one, zero, zero, zero))
    _, _, pb, *_ = area3.stack.reduced(np.zeros(1), np.ones(1))
    np.testing.assert_allclose(val, 3 * pb[0] / zeta / math.sqrt(2), rtol=1e-12)


def test_gradient_out_of_domain(aniso):
    patch = tuple(np.full(2, v) for v in (0.5, 1.0, 0.0, 0.1, 0.0, 0.0, 0.0))
    with pytest.raises(GradientOutOfDomain):
        pde.reduced_operator(aniso.stack, 1, patch)


def test_homogeneous_operator_matches_leaf_contraction(aniso):
    m = HomogeneousModel(aniso.pair, 1)
    tau = np.array([0.5, 2.0, 10.0])
    lam = np.ones(3)
    d = m.reduced_at(lam, tau)
    xi, zeta = m.leaf_point(lam, tau)
    patch = [np.asarray(v, dtype=float)
             for v in (xi, zeta, d["wx"], d["wz"], d["wxx"], d["wxz"], d["wzz"])]
    val = pde.reduced_operator(aniso.stack, m.k, patch, homogeneous=True)
    lhs, rhs = curvature_term(m, aniso.stack, lam, tau)
    np.testing.assert_allclose(val, lhs, rtol=1e-9)
    np.testing.assert_allclose(val, rhs, rtol=1e-6)


def test_zero_data_zero_solution(aniso, area3):
    for ch in (area3, aniso):
        g = pde.SectorGrid(1.0, 32, 32, ch.stack.k)
        sol = pde.solve_dirichlet(ch.stack, g, np.zeros(g.shape), initial=np.zeros(g.shape))
        assert np.max(np.abs(sol.U)) == 0.0


def _smooth(stack, n, log_scale=2.0, full=False, homogeneous=False, tol=1e-10):
    g = pde.SectorGrid(1.0, n, 2 * n if full else n, stack.k, theta_lo=0.0 if full else math.pi / 4)
    bd = np.zeros(g.shape)
    bd[-1] = g.ZETA[-1] - g.XI[-1]
    return pde.solve_dirichlet(stack, g, bd, log_scale, initial=g.ZETA - g.XI, tol=tol,
                               homogeneous=homogeneous)


def test_smooth_solution_properties(area3):
    s = _smooth(area3.stack, 32)
    assert s.residual_max < 1e-9
    assert np.max(np.abs(s.U[:, 0])) <= 1e-15
    np.testing.assert_allclose(s.U[-1], s.grid.ZETA[-1] - s.grid.XI[-1], atol=1e-14)
    # maximum principle for data in [0, 1]
    assert s.U.min() >= -1e-12 and s.U.max() <= 1 + 1e-12
    assert s.to_dict()["boundary"] == "ubar"


def test_odd_consistency_smooth(area3, aniso):
    for stack, hom in ((area3.stack, False), (aniso.stack, True)):
        s = _smooth(stack, 32, homogeneous=hom)
        f = _smooth(stack, 32, full=True, homogeneous=hom)
        res = pde.odd_consistency(s, f)
        assert max(res.values()) <= 1e-6


def test_monotone_in_data(area3):
    s1 = _smooth(area3.stack, 32, log_scale=1.0)
    s2 = _smooth(area3.stack, 32, log_scale=1.0 + math.log(2.0))
    assert np.min(2 * s2.U - s1.U) >= -1e-10


def test_no_convergence_reported(area3):
    g = pde.SectorGrid(1.0, 16, 16, 3)
    bd = np.zeros(g.shape)
    bd[-1] = g.ZETA[-1] - g.XI[-1]
    with pytest.raises(NoConvergence):
        pde.solve_dirichlet(area3.stack, g, bd, 0.0, max_iters=2, newton=False)


def test_residual_order_manufactured(aniso):
    m0 = HomogeneousModel(replace(aniso.pair, epsilon0=0.0), 1)

    def exact(X, Z):
        out = np.zeros(X.shape)
        ok = Z > X * (1 + 1e-12)
        out[ok] = m0.reduced(X[ok], Z[ok])["w"]
        return out

    errs, orders = pde.residual_order(aniso.stack, 1, exact, 4.0, n0=16, levels=3)
    assert np.all(np.diff(errs) < 0)
    assert orders[-1] >= 1.8


def _fake(R, power, log_scale=0.0):
    g = pde.SectorGrid(R, 64, 64, 1)
    U = g.RHO ** power * np.sin(2 * (g.TH - math.pi / 4))
    return pde.PdeSolution(g, U, log_scale, 0.0, 0.0, 1)


def test_growth_exponent_recovers_power():
    rep = pde.growth_exponent([_fake(R, 3.0) for R in (25.0, 50.0, 100.0)])
    assert rep["slope"] == pytest.approx(3.0, abs=1e-9)


def test_growth_exponent_unstable():
    sols = [_fake(25.0, 3.0), _fake(50.0, 3.0, 0.5), _fake(100.0, 3.0)]
    with pytest.raises(Unstable):
        pde.growth_exponent(sols)


def test_csv_export(tmp_path):
    sol = _fake(2.0, 2.0)
    path = tmp_path / "u.csv"
    pde.write_csv(sol, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (65 * 65, 3)
