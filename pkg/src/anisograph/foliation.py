"""Leaf curve sigma(tau) solving G(sigma) = 0, its phase portrait and tail fit.

The curve is stitched from three pieces: a Taylor start on [0, tau0], an
adaptive integration in tau on [tau0, 1], and an integration of the
autonomous system in s = log(tau) on [1, tau_max].  In the last piece the
state is Y = (sigma/tau - 1, sigma' - 1), which keeps sigma - tau and
sigma - tau*sigma' free of cancellation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowUp, NegativeA, Stiffness
from .integrand import PhiProfile, eval_PQ_derivs, fixed_point_matrix, indicial_exponents

TRAP_MARGIN = 1e-6


def _coeffs(profile, z):
    P, Q, _, _ = eval_PQ_derivs(profile, z)
    return P, Q


def series_start(profile: PhiProfile):
    """Coefficients c2, c4 of sigma = 1 + c2 tau^2 + c4 tau^4."""
    k = profile.k
    f0, _, f2, _, f4 = profile.derivatives(0.0)
    r = f4 / f2
    p3 = -r / 3.0
    Q0 = -f0 / f2
    Q2 = 0.5 + f0 * f4 / (2 * f2 * f2)
    c2 = -k * Q0 / (2.0 * (1 + k))
    c4 = -k * (8 * p3 * c2 ** 3 + 4 * Q2 * c2 ** 2 - Q0 * c2) / (12.0 + 4 * k)
    return float(c2), float(c4)


def leaf_rhs_tau(profile, tau, state):
    sig, dsig = state
    P, Q = _coeffs(profile, dsig)
    return np.array([dsig, -profile.k * (P / tau + Q / sig)])


def log_field(profile, y1, y2):
    """dY/ds of the autonomous system, written through 2 phi' - phi near z = 1."""
    w = 1.0 + y1
    z = 1.0 + y2
    _, d1, d2 = profile.derivatives(z, 2)
    N = profile.compat_defect(y2) + (y1 + y2) * d1   # (w + z) phi'(z) - phi(z)
    return y2 - y1, -profile.k * N / (w * d2)


def log_field_jet(profile, y1, y2):
    """dY/ds together with the s-derivative of dz/ds along the flow."""
    w = 1.0 + y1
    z = 1.0 + y2
    _, d1, d2, d3 = profile.derivatives(z, 3)
    N = profile.compat_defect(y2) + (y1 + y2) * d1
    ws = y2 - y1
    u = -profile.k * N / (w * d2)
    Ns = ws * d1 + (w + z) * d2 * u
    D = w * d2
    Ds = ws * d2 + w * d3 * u
    us = -profile.k * (Ns * D - N * Ds) / D ** 2
    return ws, u, us


def leaf_rhs_log(profile, s, y):
    return np.array(log_field(profile, y[0], y[1]))


def G_operator(profile, tau, sig, dsig, ddsig):
    """G(sigma)(tau) = sigma'' + k (P(sigma')/tau + Q(sigma')/sigma)."""
    P, Q = _coeffs(profile, dsig)
    return ddsig + profile.k * (P / tau + Q / sig)


@dataclass
class FoliationCurve:
    profile: PhiProfile
    tau_max: float
    tau0: float
    c2: float
    c4: float
    inner: object = field(repr=False)
    outer: object = field(repr=False)
    mu: float = 0.0
    alpha: float = 0.0
    grid: np.ndarray = field(default=None, repr=False)
    sigma: np.ndarray = field(default=None, repr=False)
    dsigma: np.ndarray = field(default=None, repr=False)
    ddsigma: np.ndarray = field(default=None, repr=False)
    residual: np.ndarray = field(default=None, repr=False)
    fit: dict = field(default_factory=dict)
    tol_ode: float = 1e-8

    @property
    def k(self) -> int:
        return self.profile.k

    @property
    def s_max(self) -> float:
        return float(np.log(self.tau_max))

    def _tail_excess(self) -> float:
        return float(self.tau_max * self.outer(self.s_max)[0])

    def evaluate(self, tau):
        """Rows: sigma, sigma', sigma'', sigma''', sigma - tau, sigma - tau sigma'.

        Accepts negative tau through the even extension.
        """
        tau = np.asarray(tau, dtype=float)
        shape = tau.shape
        t = np.abs(tau).ravel()
        sgn = np.where(tau.ravel() < 0, -1.0, 1.0)
        out = np.empty((6, t.size))
        k = self.k
        mu = self.mu

        m1 = t <= self.tau0
        if m1.any():
            x = t[m1]
            sig = 1 + self.c2 * x ** 2 + self.c4 * x ** 4
            out[0, m1] = sig
            out[1, m1] = 2 * self.c2 * x + 4 * self.c4 * x ** 3
            out[2, m1] = 2 * self.c2 + 12 * self.c4 * x ** 2
            out[3, m1] = 24 * self.c4 * x
            out[4, m1] = sig - x
            out[5, m1] = 1 + (self.c2 - 2 * self.c2) * x ** 2 + (self.c4 - 4 * self.c4) * x ** 4

        m2 = (t > self.tau0) & (t <= 1.0)
        if m2.any():
            x = t[m2]
            sig, dsig = self.inner(x)
            out[0, m2] = sig
            out[1, m2] = dsig
            out[4, m2] = sig - x
            out[5, m2] = sig - x * dsig

        m3 = (t > 1.0) & (t <= self.tau_max)
        if m3.any():
            x = t[m3]
            y1, y2 = self.outer(np.log(x))
            out[0, m3] = x * (1 + y1)
            out[1, m3] = 1 + y2
            out[4, m3] = x * y1
            out[5, m3] = x * (y1 - y2)

        if m2.any():
            x = t[m2]
            sig, dsig = out[0, m2], out[1, m2]
            P, Q, dP, dQ = eval_PQ_derivs(self.profile, dsig)
            dd = -k * (P / x + Q / sig)
            out[2, m2] = dd
            out[3, m2] = -k * (dP * dd / x - P / x ** 2 + dQ * dd / sig - Q * dsig / sig ** 2)

        if m3.any():
            x = t[m3]
            _, u, us = log_field_jet(self.profile, out[4, m3] / x, out[1, m3] - 1.0)
            out[2, m3] = u / x
            out[3, m3] = (us - u) / x ** 2

        m4 = t > self.tau_max
        if m4.any():
            x = t[m4]
            e = self._tail_excess() * (x / self.tau_max) ** (-mu)
            out[0, m4] = x + e
            out[1, m4] = 1 - mu * e / x
            out[2, m4] = mu * (mu + 1) * e / x ** 2
            out[3, m4] = -mu * (mu + 1) * (mu + 2) * e / x ** 3
            out[4, m4] = e
            out[5, m4] = (1 + mu) * e

        out[1] *= sgn
        out[3] *= sgn
        return out.reshape((6,) + shape)

    def G(self, tau):
        """Residual of the leaf equation from differentiated dense output."""
        tau = np.asarray(tau, dtype=float)
        return leaf_residual(self, tau)

    def to_rows(self):
        return np.column_stack([self.grid, self.sigma, self.dsigma, self.ddsigma, self.residual])


def _five_point(fun, x, h):
    return (fun(x - 2 * h) - 8 * fun(x - h) + 8 * fun(x + h) - fun(x + 2 * h)) / (12 * h)


def leaf_residual(curve: FoliationCurve, tau):
    """|G(sigma)| with sigma'' from differentiating the interpolated sigma'."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    res = np.zeros_like(tau)
    prof = curve.profile
    k = curve.k

    m1 = (tau > 0) & (tau <= curve.tau0)
    if m1.any():
        x = tau[m1]
        e = curve.evaluate(x)
        res[m1] = G_operator(prof, x, e[0], e[1], e[2])

    m2 = (tau > curve.tau0) & (tau < 1.0)
    if m2.any():
        x = tau[m2]
        h = np.minimum(1e-4, np.minimum(x - curve.tau0, 1.0 - x) / 4)
        dd = _five_point(lambda u: curve.inner(u)[1], x, h)
        sig, dsig = curve.inner(x)
        res[m2] = G_operator(prof, x, sig, dsig, dd)

    m3 = tau >= 1.0
    if m3.any():
        s = np.log(np.minimum(tau[m3], curve.tau_max))
        h = 1e-3
        ss = np.clip(s, 2 * h, curve.s_max - 2 * h)
        dy2 = _five_point(lambda u: curve.outer(u)[1], ss, h)
        y1, y2 = curve.outer(ss)
        res[m3] = (dy2 - log_field(prof, y1, y2)[1]) / np.exp(ss)
    return res


def _event(fn, direction=0):
    fn.terminal = True
    fn.direction = direction
    return fn


def default_grid(tau_max, n_linear=401, per_decade=100):
    lin = np.linspace(0.0, 1.0, n_linear)
    n_geo = int(round(np.log10(tau_max) * per_decade)) + 1
    geo = np.geomspace(1.0, tau_max, n_geo)[1:]
    return np.concatenate([lin, geo])


def integrate_sigma(profile: PhiProfile, tau_max: float = 1e4, tol_ode: float = 1e-8,
                    tau0: float = 1e-3, rtol: float | None = None,
                    grid: np.ndarray | None = None, max_step: float = 0.02) -> FoliationCurve:
    """Integrate the leaf equation from sigma(0) = 1, sigma'(0) = 0."""
    if not (1e-12 <= tol_ode <= 1e-6):
        raise ValueError("tol_ode must lie in [1e-12, 1e-6]")
    if rtol is None:
        rtol = min(1e-12, tol_ode * 1e-2)
    mu, mu2 = indicial_exponents(profile)
    alpha = min(mu2, 1 + 2 * mu)

    c2, c4 = series_start(profile)
    if c2 <= 0:
        raise BlowUp("series start is not convex", c2=c2)
    y0 = np.array([1 + c2 * tau0 ** 2 + c4 * tau0 ** 4, 2 * c2 * tau0 + 4 * c4 * tau0 ** 3])

    ev_slope = _event(lambda t, y: y[1] - 1.0, 1)
    ev_neg = _event(lambda t, y: y[1], -1)
    ev_cone = _event(lambda t, y: y[0] - t, -1)
    sol1 = solve_ivp(lambda t, y: leaf_rhs_tau(profile, t, y), (tau0, 1.0), y0,
                     method="DOP853", rtol=rtol, atol=rtol * 1e-3, dense_output=True, max_step=max_step,
                     events=[ev_slope, ev_neg, ev_cone])
    _check_solver(sol1, "tau phase")

    sig1, dsig1 = sol1.y[:, -1]
    Y0 = np.array([sig1 - 1.0, dsig1 - 1.0])
    s_max = float(np.log(tau_max))
    ev_z1 = _event(lambda s, y: y[1], 1)
    ev_w1 = _event(lambda s, y: y[0], -1)
    ev_z0 = _event(lambda s, y: y[1] + 1.0, -1)
    sol2 = solve_ivp(lambda s, y: leaf_rhs_log(profile, s, y), (0.0, s_max), Y0,
                     method="DOP853", rtol=rtol, atol=1e-16, dense_output=True, max_step=max_step,
                     events=[ev_z1, ev_w1, ev_z0])
    _check_solver(sol2, "log phase")

    curve = FoliationCurve(profile=profile, tau_max=float(tau_max), tau0=tau0, c2=c2, c4=c4,
                           inner=sol1.sol, outer=sol2.sol, mu=float(mu), alpha=float(alpha),
                           tol_ode=tol_ode)
    g = default_grid(tau_max) if grid is None else np.asarray(grid, dtype=float)
    ev = curve.evaluate(g)
    curve.grid = g
    curve.sigma, curve.dsigma, curve.ddsigma = ev[0], ev[1], ev[2]
    curve.residual = np.abs(leaf_residual(curve, g))
    if not np.all(ev[4][1:] > 0):
        raise BlowUp("curve touches the cone", min_excess=float(ev[4][1:].min()))
    return curve


def _check_solver(sol, phase):
    if sol.status == -1:
        raise Stiffness(f"integrator failed in the {phase}: {sol.message}")
    if sol.status == 1:
        which = [i for i, te in enumerate(sol.t_events) if len(te)]
        names = {0: "slope reached 1", 1: "slope became negative", 2: "curve met the cone"}
        raise BlowUp(f"trajectory left the admissible region in the {phase}: "
                     f"{names.get(which[0], 'event') if which else 'event'}",
                     at=float(sol.t[-1]))


def fixed_step_sigma(profile: PhiProfile, taus, n_per_unit: int, tau0: float = 1e-3):
    """Classical RK4 with uniform steps (h = 1/n_per_unit in tau, then in log tau).

    Used only to observe the integrator's convergence order.
    """
    c2, c4 = series_start(profile)
    y = np.array([1 + c2 * tau0 ** 2 + c4 * tau0 ** 4, 2 * c2 * tau0 + 4 * c4 * tau0 ** 3])
    n1 = max(int(np.ceil((1 - tau0) * n_per_unit)), 1)
    y = _rk4(lambda t, v: leaf_rhs_tau(profile, t, v), tau0, 1.0, y, n1)
    Y = np.array([y[0] - 1.0, y[1] - 1.0])
    out = []
    s_prev = 0.0
    for t in np.sort(np.asarray(taus, dtype=float)):
        s = np.log(t)
        n = max(int(np.ceil(abs(s - s_prev) * n_per_unit)), 1)
        Y = _rk4(lambda u, v: leaf_rhs_log(profile, u, v), s_prev, s, Y, n)
        s_prev = s
        out.append(t * (1 + Y[0]))
    return np.array(out)


def _rk4(f, a, b, y, n):
    h = (b - a) / n
    t = a
    for _ in range(n):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


# ---------------------------------------------------------------- phase plane

@dataclass
class PhaseTrajectory:
    s: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    coef_p: np.ndarray
    coef_q: np.ndarray
    p: np.ndarray
    q: np.ndarray
    M: np.ndarray
    mu: float
    anisotropic: bool

    def slopes(self, s_from: float | None = None) -> dict:
        """Fitted slopes of log|Y|, log|coef_p|, log|coef_q| past ``s_from``."""
        if s_from is None:
            s_from = 0.5 * self.s[-1]
        m = self.s >= s_from
        out = {}
        for name, arr in (("Y", np.hypot(*self.Y)), ("p", self.coef_p), ("q", self.coef_q)):
            v = np.abs(arr[m])
            ok = v > 0
            out[name] = float(np.polyfit(self.s[m][ok], np.log(v[ok]), 1)[0])
        return out


def phase_trajectory(curve: FoliationCurve, n: int = 2000) -> PhaseTrajectory:
    s = np.linspace(np.log(curve.tau0), curve.s_max, n)
    tau = np.exp(s)
    ev = curve.evaluate(tau)
    y1 = ev[4] / tau
    y2 = ev[1] - 1.0
    mu, mu2 = indicial_exponents(curve.profile)
    p = np.array([1.0, -mu])
    q = np.array([1.0, -mu2])
    basis = np.column_stack([p, q])
    coefs = np.linalg.solve(basis, np.vstack([y1, y2]))
    return PhaseTrajectory(s=s, W=1 + y1, Z=1 + y2, Y=np.vstack([y1, y2]),
                           coef_p=coefs[0], coef_q=coefs[1], p=p, q=q,
                           M=fixed_point_matrix(curve.profile), mu=float(mu),
                           anisotropic=not curve.profile.is_area)


def phase_field(profile: PhiProfile, w, z):
    """V(w, z) = (z - w, -k (P(z) + Q(z)/w))."""
    P, Q = _coeffs(profile, np.asarray(z, dtype=float))
    return np.asarray(z) - np.asarray(w), -profile.k * (P + Q / np.asarray(w))


@dataclass
class TrapReport:
    passed: bool
    min_margin: float
    worst_s: float
    min_relative_margin: float
    margin_threshold: float = TRAP_MARGIN

    def to_dict(self):
        return {"pass": self.passed, "min_margin": self.min_margin, "worst_s": self.worst_s,
                "min_relative_margin": self.min_relative_margin,
                "margin_threshold": self.margin_threshold}


def trap_margin(w, z):
    """Distance-like margin to the boundary of {0 < z < 1, z > 3/2 - w/2}."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.minimum(np.minimum(z, 1.0 - z), z - 1.5 + 0.5 * w)


def check_trapping(traj: PhaseTrajectory, threshold: float = TRAP_MARGIN) -> TrapReport:
    y1, y2 = traj.Y
    # margins written in Y to avoid cancellation near (1, 1)
    m = np.minimum(np.minimum(1.0 + y2, -y2), y2 + 0.5 * y1)
    i = int(np.argmin(m))
    rel = m / np.maximum(np.hypot(y1, y2), 1e-300)
    return TrapReport(passed=bool(m[i] >= threshold), min_margin=float(m[i]),
                      worst_s=float(traj.s[i]), min_relative_margin=float(rel.min()),
                      margin_threshold=threshold)


def mod_bounds(traj: PhaseTrajectory, transient: float = 2.0) -> dict:
    """Local slope of log|Y|^2 against the bracket from the symmetric part of M."""
    m = traj.s >= transient
    s = traj.s[m]
    L = np.log(np.sum(traj.Y[:, m] ** 2, axis=0))
    slope = np.gradient(L, s)
    eig = np.linalg.eigvalsh(traj.M + traj.M.T)
    lo, hi = (-5.0, -1.5) if traj.anisotropic else (float(eig[0]), float(eig[1]))
    c_low = float(np.min(np.exp(L - lo * s)))
    c_up = float(1.0 / np.max(np.exp(L - hi * s)))
    return {"bracket": [lo, hi], "sym_eigs": eig.tolist(), "slope_min": float(slope.min()),
            "slope_max": float(slope.max()), "c": min(c_low, c_up),
            "pass": bool(lo < slope.min() and slope.max() < hi)}


# ---------------------------------------------------------------- asymptotics

def fit_asymptotics(curve: FoliationCurve, window=(1e2, None), beta: float | None = None) -> dict:
    """Tail regression of sigma - tau.

    ``mu_fit`` comes from a straight log-log fit; ``a`` and ``b_fit`` from the
    two-term model a tau^-mu + b tau^-alpha with the indicial mu.
    """
    lo, hi = window
    hi = curve.tau_max if hi is None else hi
    if curve.tau_max < 1e3:
        raise ValueError("tail fit needs tau_max >= 1e3")
    tau = np.geomspace(lo, hi, 400)
    e = curve.evaluate(tau)[4]
    if np.any(e <= 0):
        raise NegativeA("sigma - tau is not positive on the fit window")
    slope, icept = np.polyfit(np.log(tau), np.log(e), 1)
    mu, alpha = curve.mu, curve.alpha
    A = np.column_stack([np.ones_like(tau), tau ** (mu - alpha)])
    (a, b), *_ = np.linalg.lstsq(A, e * tau ** mu, rcond=None)
    if a <= 0:
        raise NegativeA("fitted leading coefficient is not positive", a=float(a))
    # the remainder sinks below round-off near tau_max, so it is fitted lower down
    tr = np.geomspace(10.0, min(1e3, curve.tau_max), 200)
    rem = np.abs(curve.evaluate(tr)[4] - a * tr ** (-mu))
    ok = rem > 0
    rem_order = float(-np.polyfit(np.log(tr[ok]), np.log(rem[ok]), 1)[0])
    need = beta if (curve.profile.is_area and beta is not None) else 0.5
    if curve.profile.is_area and beta is None:
        need = mu
    fit = {"a": float(a), "a_loglog": float(np.exp(icept)), "mu_fit": float(-slope),
           "b_fit": float(b), "remainder_order": rem_order,
           "remainder_ok": bool(rem_order >= need)}
    curve.fit = fit
    return fit
