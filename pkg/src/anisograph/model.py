"""Homogeneous model functions of degree 1 + mu built from a perturbed leaf.

On {zeta > xi} the model is w0(xi, zeta) = lam^(-1-mu) where
(xi, zeta) = (tau, sigma_side(tau)) / lam; it is extended oddly across the
diagonal and lifted to R^{k+1} x R^{k+1} through xi = |x|, zeta = |y|.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OnCone, OutOfChart
from .integrand import IntegrandStack
from .jacobi import PerturbedPair

CONE_EXCLUSION = 1e-8


@dataclass
class HomogeneousModel:
    pair: PerturbedPair = field(repr=False)
    side: int = 1            # +1 uses sigma + eps f1, -1 uses sigma - eps f1
    chart_tol: float = 1e-12
    _grid_tau: np.ndarray = field(default=None, repr=False)
    _grid_logh: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        cur = self.pair.curve
        t = cur.grid[cur.grid > 0]
        ex = self.rows(t)[3]
        self._grid_tau = t
        self._grid_logh = np.log(ex / t)
        if np.any(np.diff(self._grid_logh) >= 0):
            raise OutOfChart("leaf ratio is not strictly decreasing on the grid")

    @property
    def mu(self) -> float:
        return self.pair.curve.mu

    @property
    def degree(self) -> float:
        return 1.0 + self.mu

    @property
    def k(self) -> int:
        return self.pair.curve.k

    @property
    def tail_coefficient(self) -> float:
        """a_side with sigma_side - tau ~ a_side tau^-mu beyond the grid."""
        tm = self.pair.curve.tau_max
        return float(self.rows(np.array([tm]))[3, 0] * tm ** self.mu)

    def rows(self, tau):
        """sigma, sigma', sigma'', sigma - tau, sigma - tau sigma', G for this side."""
        return self.pair.side(self.side, tau)

    # -------------------------------------------------------- chart
    def chart_invert(self, xi, zeta):
        """Leaf coordinates (lam, tau) of points with zeta > xi >= 0."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
        if np.any(xi < 0) or np.any(zeta <= xi):
            raise OutOfChart("chart needs zeta > xi >= 0")
        tau = np.zeros_like(xi)
        pos = xi > 0
        if pos.any():
            tau[pos] = self._solve_ratio((zeta[pos] - xi[pos]) / xi[pos])
        lam = self.rows(tau)[0] / zeta
        return lam, tau

    def _solve_ratio(self, rho):
        """tau with (sigma_side(tau) - tau)/tau = rho."""
        logr = np.log(rho)
        out = np.empty_like(rho)
        gl = self._grid_logh
        tail = logr <= gl[-1]
        if tail.any():
            # sigma_side - tau = a tau^-mu exactly beyond the grid
            out[tail] = (self.tail_coefficient / rho[tail]) ** (1.0 / (1.0 + self.mu))
        body = ~tail
        if body.any():
            lr = logr[body]
            lu = np.log(self._grid_tau)
            idx = np.searchsorted(-gl, -lr)          # gl decreasing
            lo = np.where(idx > 0, lu[np.clip(idx - 1, 0, None)], np.log(1e-300))
            hi = lu[np.clip(idx, 0, len(lu) - 1)]
            u = np.interp(-lr, -gl, lu)
            u = np.where(idx == 0, -lr + np.log(self.rows(np.array([0.0]))[0, 0]), u)
            u = np.clip(u, lo, hi)
            for _ in range(100):
                t = np.exp(u)
                r = self.rows(t)
                F = np.log(r[3] / t) - lr
                dF = -r[4] / r[3]
                lo = np.where(F > 0, u, lo)
                hi = np.where(F <= 0, u, hi)
                un = u - F / dF
                bad = ~((un > lo) & (un < hi)) | ~np.isfinite(un)
                un = np.where(bad, 0.5 * (lo + hi), un)
                done = np.abs(un - u) <= self.chart_tol
                u = un
                if np.all(done):
                    break
            out[body] = np.exp(u)
        return out

    def leaf_point(self, lam, tau):
        tau = np.asarray(tau, dtype=float)
        return tau / lam, self.rows(tau)[0] / lam

    # -------------------------------------------------------- two-variable model
    def reduced(self, xi, zeta):
        """Value and derivatives of w0 on {zeta > xi >= 0}.

        Returns a dict with w, wx, wz, wxx, wxz, wzz, wx_over_xi, wz_over_zeta,
        lam, tau, and the side rows at tau.
        """
        lam, tau = self.chart_invert(xi, zeta)
        return self.reduced_at(lam, tau)

    def reduced_at(self, lam, tau, extended: bool = False):
        """Two-variable derivatives at leaf coordinates (lam, tau).

        With ``extended`` the formulas run in long double on the double rows;
        contractions of these entries cancel heavily far out on the leaf.
        """
        dt = np.longdouble if extended else float
        lam = np.asarray(lam, dtype=dt)
        tau = np.asarray(tau, dtype=float)
        r = self.rows(tau)
        mu = dt(self.mu)
        sig, ds, dds, _, f0 = r[:5].astype(dt)
        tau = tau.astype(dt)
        c = (1 + mu) * lam ** (-mu) / f0
        wx = -c * ds
        wz = c
        h = (1 + mu) * lam ** (1 - mu) / f0 ** 3
        wxx = h * (mu * f0 * ds * ds - dds * sig * sig)
        wxz = h * (-mu * f0 * ds + dds * sig * tau)
        wzz = h * (mu * f0 - dds * tau * tau)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope_ratio = np.where(tau > 0, ds / tau, dds)
        return {
            "w": lam ** (-1 - mu), "wx": wx, "wz": wz, "wxx": wxx, "wxz": wxz, "wzz": wzz,
            "wx_over_xi": -(1 + mu) * lam ** (1 - mu) * slope_ratio / f0,
            "wz_over_zeta": lam * wz / sig,
            "lam": lam, "tau": tau, "rows": r,
        }

    # -------------------------------------------------------- lifted model
    def value(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        m = self.k + 1
        a = np.linalg.norm(p[:, :m], axis=1)
        b = np.linalg.norm(p[:, m:], axis=1)
        out = np.zeros(len(p))
        up = b > a
        dn = a > b
        if up.any():
            out[up] = self.chart_invert(a[up], b[up])[0] ** (-1 - self.mu)
        if dn.any():
            out[dn] = -self.chart_invert(b[dn], a[dn])[0] ** (-1 - self.mu)
        return out

    def eval_w(self, p, hessian: bool = True):
        """Value, gradient and Hessian at points p of shape (N, 2(k+1))."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        N, n = p.shape
        m = self.k + 1
        x, y = p[:, :m], p[:, m:]
        a = np.linalg.norm(x, axis=1)
        b = np.linalg.norm(y, axis=1)
        scale = np.linalg.norm(p, axis=1)
        near = np.abs(a - b) <= CONE_EXCLUSION * scale
        if hessian and near.any():
            raise OnCone("Hessian requested on the cone", n=int(near.sum()))
        flip = a > b
        lo = np.where(flip, b, a)
        hi = np.where(flip, a, b)
        val = np.zeros(N)
        grad = np.zeros((N, n))
        H = np.zeros((N, n, n)) if hessian else None
        ok = ~(a == b)
        if ok.any():
            d = self.reduced(lo[ok], hi[ok])
            sgn = np.where(flip[ok], -1.0, 1.0)
            # in the reflected chart the roles of x and y swap
            xs = np.where(flip[ok, None], y[ok], x[ok])
            ys = np.where(flip[ok, None], x[ok], y[ok])
            xh = _unit(xs, lo[ok])
            yh = _unit(ys, hi[ok])
            val[ok] = sgn * d["w"]
            gx = (sgn * d["wx"])[:, None] * xh
            gy = (sgn * d["wz"])[:, None] * yh
            G = np.zeros((ok.sum(), n))
            Hs = np.zeros((ok.sum(), n, n)) if hessian else None
            eye = np.eye(m)
            blocks = (slice(0, m), slice(m, n))
            for j, fl in enumerate(flip[ok]):
                bx, by = (blocks[1], blocks[0]) if fl else blocks
                G[j, bx] = gx[j]
                G[j, by] = gy[j]
                if hessian:
                    s = sgn[j]
                    xx = np.outer(xh[j], xh[j])
                    yy = np.outer(yh[j], yh[j])
                    Hs[j, bx, bx] = s * (d["wxx"][j] * xx + d["wx_over_xi"][j] * (eye - xx))
                    Hs[j, by, by] = s * (d["wzz"][j] * yy + d["wz_over_zeta"][j] * (eye - yy))
                    Hs[j, bx, by] = s * d["wxz"][j] * np.outer(xh[j], yh[j])
                    Hs[j, by, bx] = Hs[j, bx, by].T
            grad[ok] = G
            if hessian:
                H[ok] = Hs
        cone = a == b
        if cone.any():
            # limit of the gradient at the cone: xi^mu / a_side * (-xhat + yhat)
            c = a[cone] ** self.mu / self.tail_coefficient
            grad[cone] = np.concatenate([-c[:, None] * _unit(x[cone], a[cone]),
                                         c[:, None] * _unit(y[cone], b[cone])], axis=1)
        return val, grad, H

    def lifted_point(self, lam, tau):
        """A point of R^{2(k+1)} with leaf coordinates (lam, tau)."""
        xi, zeta = self.leaf_point(lam, tau)
        m = self.k + 1
        p = np.zeros((np.size(xi), 2 * m))
        p[:, 0] = xi
        p[:, m] = zeta
        return p


def _unit(v, n):
    out = np.zeros_like(v)
    nz = n > 0
    out[nz] = v[nz] / n[nz, None]
    if (~nz).any():
        out[~nz, 0] = 1.0
    return out


def reduced_contraction(stack: IntegrandStack, d: dict, k: int):
    """Contraction of D^2 Psi_bar at grad w with D^2 w, from the two-variable data."""
    wx, wz = d["wx"], d["wz"]
    a, b = np.abs(wx), np.abs(wz)
    _, pa, pb, paa, pab, pbb, ra, rb = stack.reduced(a, b)
    s = np.sign(wx) * np.sign(wz)
    # ra = phi_a / a, rb = phi_b / b pair with w_xi/xi and w_zeta/zeta on the k tangent directions
    return (paa * d["wxx"] + 2 * s * pab * d["wxz"] + pbb * d["wzz"]
            + k * ra * d["wx_over_xi"] + k * rb * d["wz_over_zeta"])


def curvature_term(model: HomogeneousModel, stack: IntegrandStack, lam, tau):
    """(lhs, rhs): closed-form contraction and -lam phi''(sigma') G(sigma)."""
    d = model.reduced_at(lam, tau, extended=True)
    lhs = reduced_contraction(stack, d, model.k).astype(float)
    r = d["rows"]
    phi2 = stack.profile.derivatives(r[1], 2)[2]
    rhs = -np.asarray(lam, dtype=float) * phi2 * r[5]
    return lhs, rhs


def full_contraction(model: HomogeneousModel, stack: IntegrandStack, p):
    """trace(D^2 Psi_bar(grad w) D^2 w) evaluated in the full space."""
    _, grad, H = model.eval_w(p)
    _, _, D = stack.psi_bar(grad)
    return np.einsum("nij,nij->n", D, H)


def fd_contraction(model: HomogeneousModel, stack: IntegrandStack, p, h: float):
    """Contraction built from central differences of ``model.value`` with step h."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = p.shape[1]
    eye = np.eye(n) * h
    grad = np.empty_like(p)
    for i in range(n):
        grad[:, i] = (model.value(p + eye[i]) - model.value(p - eye[i])) / (2 * h)
    H = np.empty((len(p), n, n))
    for i in range(n):
        for j in range(i, n):
            v = (model.value(p + eye[i] + eye[j]) - model.value(p + eye[i] - eye[j])
                 - model.value(p - eye[i] + eye[j]) + model.value(p - eye[i] - eye[j])) / (4 * h * h)
            H[:, i, j] = H[:, j, i] = v
    _, _, D = stack.psi_bar(grad)
    return np.einsum("nij,nij->n", D, H)


def contraction_fd_order(model: HomogeneousModel, stack: IntegrandStack, tau,
                         steps=(2e-2, 1e-2, 5e-3, 2.5e-3), seed: int = 0):
    """Relative errors of the finite-difference contraction and observed orders.

    Leaf points at lam = 1 are turned inside each block by random rotations so
    that no coordinate axis is special.
    """
    tau = np.asarray(tau, dtype=float)
    p = model.lifted_point(np.ones_like(tau), tau)
    m = model.k + 1
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((len(tau), m))
    v = rng.standard_normal((len(tau), m))
    p[:, :m] = p[:, :1] * u / np.linalg.norm(u, axis=1, keepdims=True)
    p[:, m:] = p[:, m:m + 1] * v / np.linalg.norm(v, axis=1, keepdims=True)
    exact = full_contraction(model, stack, p)
    errs = np.array([np.max(np.abs(fd_contraction(model, stack, p, h) - exact) / np.abs(exact))
                     for h in steps])
    return errs, np.log2(errs[:-1] / errs[1:])
