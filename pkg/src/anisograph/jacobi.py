"""Linearised leaf operator, its homogeneous and forced solutions, and the
perturbed leaves sigma +- eps f1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from .errors import NoEpsilon, QuadratureFailure
from .foliation import FoliationCurve, G_operator
from .integrand import eval_PQ_derivs

QUAD_TOL = 1e-9
SMALL_T = 1e-4


def default_beta(curve: FoliationCurve) -> float:
    if curve.profile.is_area:
        return 0.5 * (curve.mu + curve.alpha)
    return 0.5


def linear_coefficients(curve: FoliationCurve, tau):
    """([log p]', q) of L f = f'' + [log p]' f' + q f."""
    tau = np.asarray(tau, dtype=float)
    sig, ds, dds = curve.evaluate(tau)[:3]
    v, d1, d2, d3 = curve.profile.derivatives(ds, 3)
    k = curve.k
    dlogp = k / tau + k * ds / sig + dds * d3 / d2
    q = k * (v - ds * d1) / (sig ** 2 * d2)
    return dlogp, q


def eval_L(curve: FoliationCurve, f, df, ddf, tau):
    dlogp, q = linear_coefficients(curve, tau)
    return ddf + dlogp * df + q * f


def local_scale(curve, f, df, ddf, tau):
    """Sum of the magnitudes of the three terms of L f."""
    dlogp, q = linear_coefficients(curve, tau)
    return np.abs(ddf) + np.abs(dlogp * df) + np.abs(q * f)


def f0_derivs(curve: FoliationCurve, tau):
    """f0 = sigma - tau sigma' and its first two derivatives."""
    tau = np.asarray(tau, dtype=float)
    ev = curve.evaluate(tau)
    return ev[5], -tau * ev[2], -ev[2] - tau * ev[3]


def weight_p(curve: FoliationCurve, tau):
    tau = np.asarray(tau, dtype=float)
    sig, ds = curve.evaluate(tau)[:2]
    return (tau * sig) ** curve.k * curve.profile.derivatives(ds, 2)[2]


# ---------------------------------------------------------------- Chebyshev cells

class _ChebRule:
    def __init__(self, n):
        self.n = n
        j = np.arange(n)
        self.x = np.cos(np.pi * (j + 0.5) / n)[::-1]
        T = C.chebvander(self.x, n - 1)
        self.to_coef = np.linalg.inv(T)
        # antiderivative from -1, as a linear map on coefficients
        self.integ = np.column_stack([C.chebint(np.eye(n)[i], lbnd=-1) for i in range(n)])
        self.T_int = C.chebvander(self.x, n)   # values of the integrated series at nodes
        self.right = C.chebvander(np.array([1.0]), n)[0]


def _clenshaw(coef, x):
    """Evaluate rows of Chebyshev coefficients at matching x."""
    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for j in range(coef.shape[1] - 1, 0, -1):
        b1, b2 = 2 * x * b1 - b2 + coef[:, j], b1
    return x * b1 - b2 + coef[:, 0]


def _clenshaw_deriv(coef, x, order):
    d = coef
    for _ in range(order):
        d = np.array([C.chebder(c) for c in d])
    return _clenshaw(d, x)


@dataclass
class InhomogeneousSolution:
    """f1 with f1(0) = f1'(0) = 0 solving L f1 = g, g = sigma^(-beta-2)."""
    curve: FoliationCurve = field(repr=False)
    beta: float
    edges: np.ndarray = field(repr=False)
    coefJ: np.ndarray = field(repr=False)
    coefK: np.ndarray = field(repr=False)
    d_fit: float = 0.0
    max_error: float = 0.0

    def g(self, tau):
        return self.curve.evaluate(tau)[0] ** (-self.beta - 2)

    def _JK(self, t):
        i = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)
        a, b = self.edges[i], self.edges[i + 1]
        x = 2 * (t - a) / (b - a) - 1
        return _clenshaw(self.coefJ[i], x), _clenshaw(self.coefK[i], x)

    def series_derivs(self, tau):
        """f1, f1', f1'' for tau > 0 obtained by differentiating the K interpolant.

        Unlike :meth:`evaluate`, nothing here uses the differential equation,
        so substituting these rows into L measures the quadrature error.
        """
        t = np.asarray(tau, dtype=float)
        i = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)
        a, b = self.edges[i], self.edges[i + 1]
        x = 2 * (t - a) / (b - a) - 1
        jac = 2 / (b - a)
        coef = self.coefK[i]
        K = _clenshaw(coef, x)
        K1 = _clenshaw_deriv(coef, x, 1) * jac
        K2 = _clenshaw_deriv(coef, x, 2) * jac ** 2
        f0, df0, ddf0 = f0_derivs(self.curve, t)
        return np.array([f0 * K, df0 * K + f0 * K1, ddf0 * K + 2 * df0 * K1 + f0 * K2])

    def evaluate(self, tau):
        """Rows f1, f1', f1'' (even in tau)."""
        tau = np.asarray(tau, dtype=float)
        shape = tau.shape
        t = np.abs(tau).ravel()
        sgn = np.where(tau.ravel() < 0, -1.0, 1.0)
        out = np.zeros((3, t.size))
        cur = self.curve
        k = cur.k
        tm = cur.tau_max

        small = t < SMALL_T
        if small.any():
            x = t[small]
            g0 = self.g(0.0)
            out[0, small] = g0 * x ** 2 / (2 * (k + 1))
            out[1, small] = g0 * x / (k + 1)
            out[2, small] = g0 / (k + 1)

        mid = (~small) & (t <= tm)
        if mid.any():
            x = t[mid]
            J, K = self._JK(x)
            f0, df0, _ = f0_derivs(cur, x)
            p = weight_p(cur, x)
            f = f0 * K
            df = df0 * K + J / (f0 * p)
            dlogp, q = linear_coefficients(cur, x)
            out[0, mid] = f
            out[1, mid] = df
            out[2, mid] = self.g(x) - dlogp * df - q * f

        tail = t > tm
        if tail.any():
            mu = cur.mu
            x = t[tail]
            fm = float(self.evaluate(np.array([tm]))[0, 0])
            f = fm * (x / tm) ** (-mu)
            out[0, tail] = f
            out[1, tail] = -mu * f / x
            out[2, tail] = mu * (mu + 1) * f / x ** 2

        out[1] *= sgn
        return out.reshape((3,) + shape)


def solve_inhomogeneous(curve: FoliationCurve, beta: float | None = None, n_nodes: int = 20,
                        tol: float = QUAD_TOL, max_split: int = 12) -> InhomogeneousSolution:
    """Variation of parameters f1 = f0 * int_0^tau J/(f0^2 p), J = int_0^t g p f0.

    Both integrals are built cell by cell on the curve grid from Chebyshev
    interpolants; a cell is bisected until the trailing coefficients are
    below ``tol`` relative to the cell's size.
    """
    if beta is None:
        beta = default_beta(curve)
    rule = _ChebRule(n_nodes)
    k = curve.k

    def g(t):
        return curve.evaluate(t)[0] ** (-beta - 2)

    def inner(t):
        return g(t) * weight_p(curve, t) * f0_derivs(curve, t)[0]

    g0 = float(g(0.0))
    edges_in = np.asarray(curve.grid, dtype=float)

    def cheb_fit(fun, a, b):
        x = a + (b - a) * (rule.x + 1) / 2
        c = rule.to_coef @ fun(x)
        return c

    def resolved(c):
        scale = max(np.abs(c).max(), 1e-300)
        return (np.abs(c[-2:]).max() / scale), (np.abs(c[-2:]).max() <= tol * 1e-3 * scale)

    edges, cJ, cK = [], [], []
    J_left = 0.0
    K_left = 0.0
    worst = 0.0
    stack = [(edges_in[i], edges_in[i + 1], 0) for i in range(len(edges_in) - 1)][::-1]
    while stack:
        a, b, depth = stack.pop()
        ci = cheb_fit(inner, a, b)
        err1, ok1 = resolved(ci)
        cint = rule.integ @ ci * (b - a) / 2
        cint[0] += J_left
        x = a + (b - a) * (rule.x + 1) / 2
        Jn = rule.T_int @ cint

        f0 = f0_derivs(curve, x)[0]
        p = weight_p(curve, x)
        vals = np.where(x < SMALL_T, g0 * x / (k + 1), Jn / (f0 * f0 * p))
        co = rule.to_coef @ vals
        err2, ok2 = resolved(co)
        if not (ok1 and ok2):
            if depth < max_split:
                mid = 0.5 * (a + b)
                stack.append((mid, b, depth + 1))
                stack.append((a, mid, depth + 1))
                continue
            if max(err1, err2) > tol:
                raise QuadratureFailure("cell not resolved", cell=(a, b), err=max(err1, err2))
        worst = max(worst, err1, err2)
        kint = rule.integ @ co * (b - a) / 2
        kint[0] += K_left
        edges.append(a)
        cJ.append(cint)
        cK.append(kint)
        J_left = float(rule.right @ cint)
        K_left = float(rule.right @ kint)
    edges.append(edges_in[-1])

    sol = InhomogeneousSolution(curve=curve, beta=float(beta), edges=np.array(edges),
                                coefJ=np.array(cJ), coefK=np.array(cK), max_error=float(worst))
    sol.d_fit = fit_f1_tail(sol)
    return sol


def fit_f1_tail(sol: InhomogeneousSolution) -> float:
    """Leading coefficient d in f1 = d tau^-mu + e tau^-beta."""
    cur = sol.curve
    tau = np.geomspace(1e2, cur.tau_max, 300)
    f = sol.evaluate(tau)[0]
    A = np.column_stack([np.ones_like(tau), tau ** (cur.mu - sol.beta)])
    (d, _), *_ = np.linalg.lstsq(A, f * tau ** cur.mu, rcond=None)
    return float(d)


def ode_oracle(curve: FoliationCurve, beta: float, taus, rtol=1e-12):
    """Independent route to f1: integrate L f = g as an initial value problem."""
    from scipy.integrate import solve_ivp
    k = curve.k
    t0 = 1e-3
    g0 = float(curve.evaluate(0.0)[0] ** (-beta - 2))

    def rhs(t, y):
        dlogp, q = linear_coefficients(curve, t)
        g = curve.evaluate(t)[0] ** (-beta - 2)
        return [y[1], g - dlogp * y[1] - q * y[0]]

    y0 = [g0 * t0 ** 2 / (2 * (k + 1)), g0 * t0 / (k + 1)]
    sol = solve_ivp(rhs, (t0, float(np.max(taus))), y0, method="DOP853", rtol=rtol,
                    atol=1e-18, dense_output=True)
    return sol.sol(np.asarray(taus))[0]


# ---------------------------------------------------------------- perturbed leaves

def _pq_second(profile, z):
    v, d1, d2, d3, d4 = profile.derivatives(z, 4)
    P = d1 / d2
    Q = (z * d1 - v) / d2
    rho = d3 / d2
    drho = d4 / d2 - rho * rho
    dP = 1 - P * rho
    dQ = z - Q * rho
    return P, Q, dP, dQ, -dP * rho - P * drho, 1 - dQ * rho - Q * drho


def perturbed_rows(curve: FoliationCurve, f1: InhomogeneousSolution, eps: float, tau):
    """Rows sigma, sigma', sigma'', sigma - tau, sigma - tau sigma', G for sigma + eps f1.

    G is assembled as a difference from the unperturbed leaf so that it stays
    accurate where it is many orders below the individual terms.
    """
    tau = np.asarray(tau, dtype=float)
    ev = curve.evaluate(tau)
    fr = f1.evaluate(tau)
    sig, ds, dds = ev[0], ev[1], ev[2]
    f, df, ddf = fr
    sb = sig + eps * f
    dsb = ds + eps * df
    ddsb = dds + eps * ddf
    delta = eps * df
    P, Q, dP, dQ, ddP, ddQ = _pq_second(curve.profile, ds)
    Pb, Qb, _, _, _, _ = _pq_second(curve.profile, dsb)
    small = np.abs(delta) < 1e-5
    dPv = np.where(small, dP * delta + 0.5 * ddP * delta ** 2, Pb - P)
    dQv = np.where(small, dQ * delta + 0.5 * ddQ * delta ** 2, Qb - Q)
    k = curve.k
    with np.errstate(divide="ignore", invalid="ignore"):
        G = eps * ddf + k * (dPv / tau + dQv / sb - Q * eps * f / (sig * sb))
    # at tau = 0 the ratio dP/tau tends to P'(0) eps f1''(0) since sigma'(0) = f1'(0) = 0
    G0 = eps * ddf * (1 + k * dP) - k * Q * eps * f / (sig * sb)
    G = np.where(tau == 0, G0, G)
    return np.array([sb, dsb, ddsb, ev[4] + eps * f, ev[5] + eps * (f - tau * df), G])


@dataclass
class PerturbedPair:
    curve: FoliationCurve = field(repr=False)
    f1: InhomogeneousSolution = field(repr=False)
    epsilon0: float
    beta: float
    kappa_bar: float
    kappa_under: float
    d_fit: float
    a_bar: float
    a_under: float
    scan: list = field(default_factory=list)

    def side(self, sign: int, tau):
        return perturbed_rows(self.curve, self.f1, sign * self.epsilon0, tau)

    def to_dict(self):
        return {"epsilon0": self.epsilon0, "beta": self.beta, "kappa_bar": self.kappa_bar,
                "kappa_under": self.kappa_under, "d_fit": self.d_fit, "a_bar": self.a_bar,
                "a_under": self.a_under}


def certify(curve, f1, eps, tau=None) -> dict:
    """All grid conditions for a candidate eps; returns measured margins."""
    if tau is None:
        tau = curve.grid[curve.grid > 0]
    g = f1.g(tau)
    up = perturbed_rows(curve, f1, eps, tau)
    lo = perturbed_rows(curve, f1, -eps, tau)
    up2 = perturbed_rows(curve, f1, eps, 2 * tau)
    w = curve.evaluate(tau)[0] ** (f1.beta + 2)
    out = {
        "sign_bar": float(np.min(up[5] / g - eps / 2)),
        "sign_under": float(np.min(-lo[5] / g - eps / 2)),
        "convex": float(min(up[2].min(), lo[2].min())),
        "above_cone": float(min(up[3].min(), lo[3].min())),
        "order_upper": float(np.min(up[3] - lo[3])),
        # sigma_under(tau) - sigma_bar(2 tau)/2, written with excesses
        "order_lower": float(np.min(lo[3] - 0.5 * up2[3])),
        "kappa_bar": float(np.min(up[5] * w)),
        "kappa_under": float(np.min(-lo[5] * w)),
    }
    out["pass"] = bool(out["sign_bar"] >= 0 and out["sign_under"] >= 0 and out["convex"] > 0
                       and out["above_cone"] > 0 and out["order_upper"] >= 0
                       and out["order_lower"] >= 0)
    return out


def _lead_coef(curve, f1, eps):
    tau = np.geomspace(1e2, curve.tau_max, 300)
    e = perturbed_rows(curve, f1, eps, tau)[3]
    A = np.column_stack([np.ones_like(tau), tau ** (curve.mu - f1.beta)])
    (a, _), *_ = np.linalg.lstsq(A, e * tau ** curve.mu, rcond=None)
    return float(a)


def select_epsilon0(curve: FoliationCurve, f1: InhomogeneousSolution, n_scan: int = 20) -> PerturbedPair:
    scan = []
    for j in range(1, n_scan + 1):
        eps = 2.0 ** -j
        cert = certify(curve, f1, eps)
        scan.append({"epsilon": eps, **cert})
        if cert["pass"]:
            return PerturbedPair(curve=curve, f1=f1, epsilon0=eps, beta=f1.beta,
                                 kappa_bar=cert["kappa_bar"], kappa_under=cert["kappa_under"],
                                 d_fit=f1.d_fit, a_bar=_lead_coef(curve, f1, eps),
                                 a_under=_lead_coef(curve, f1, -eps), scan=scan)
    raise NoEpsilon("no epsilon in the dyadic scan passes", scan=scan)
