"""Super- and subsolutions obtained by re-stacking the level sets of the models.

The stacking profiles H have derivatives like exp(B * I(s)) with I(0) of order
tens, so every magnitude here is carried as a logarithm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp

from .errors import OrderingViolation, ScanExhausted, SignViolation
from .integrand import IntegrandStack
from .model import HomogeneousModel

LOG_TINY = -745.0
N_GAUSS = 10
_GX, _GW = np.polynomial.legendre.leggauss(N_GAUSS)


# ---------------------------------------------------------------- parameters

def stacking_exponents(kind: str, mu: float, beta: float):
    """(gamma, M, delta) for the anisotropic or the area stack."""
    if kind == "area":
        gamma = (mu + 0.5) / (mu + 1.0)
        M = 2.0 / (beta - mu)
        return gamma, M, 1.0 / (M * (mu + 1.0))
    gamma = 2.0 * mu / (1.0 + mu)
    M = 2.0 / (0.5 - mu)
    return gamma, M, gamma / M


def sigma_exponent(mu, beta, M):
    """Exponent e with sigma_tilde = sigma^e in the reduced sufficient inequality."""
    e3 = -(beta + 2.0 + M * mu) / (1.0 + M)
    return -mu - e3, e3


@dataclass
class BarrierParams:
    kind: str
    mu: float
    beta: float
    gamma: float
    M_exp: float
    delta: float
    A: float = math.nan
    B: float = math.nan
    C: float = math.nan
    lambda_C: float = math.nan
    log_K: float = math.nan
    R_scale: float = math.nan
    margin: float = 2.0

    @classmethod
    def create(cls, kind: str, mu: float, beta: float, margin: float = 2.0):
        g, M, d = stacking_exponents(kind, mu, beta)
        return cls(kind, mu, beta, g, M, d, R_scale=2.0 ** (-(1 + mu) / mu), margin=margin)

    @property
    def s_C(self) -> float:
        return self.lambda_C ** (-1.0 - self.mu)

    def to_dict(self):
        return asdict(self)


def eval_I(delta: float, s):
    """Integral of t^(delta-1)/(1+t^(2 delta)) over (s, inf) in closed form."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return np.arctan(s ** (-delta)) / delta


def eval_I_log(delta: float, log_s):
    return np.arctan(np.exp(-delta * np.asarray(log_s, dtype=float))) / delta


def solve_I(delta: float, value: float) -> float:
    """log s with I(s) = value."""
    return -math.log(math.tan(delta * value)) / delta


# ---------------------------------------------------------------- stacking profiles

class StackingProfile:
    """H with H(s0) = 0 and H'(s) = A s^-gamma + exp(B I(s)) (upper) or exp(-C I(s)) (lower).

    Values are returned as logs; ``log_value`` integrates H' in the variable
    log s with Gauss-Legendre panels whose width follows the steepness of H'.
    """

    def __init__(self, params: BarrierParams, upper: bool, log_s0: float | None = None,
                 log_s_max: float = 200.0, panel: float = 0.02):
        self.params = params
        self.upper = upper
        self.log_s0 = log_s0
        self._build(log_s_max, panel)

    # --- derivatives
    def log_slope(self, log_s):
        p = self.params
        v = np.asarray(log_s, dtype=float)
        I = eval_I_log(p.delta, v)
        if self.upper:
            return np.logaddexp(math.log(p.A) - p.gamma * v, p.B * I)
        return -p.C * I

    def _log_kernel(self, v):
        # log of s^delta / (1 + s^(2 delta))
        d = self.params.delta
        return d * v - np.logaddexp(0.0, 2 * d * v)

    def log_curvature(self, log_s):
        """log |s H''(s)|; H'' < 0 for the upper profile and > 0 for the lower."""
        p = self.params
        v = np.asarray(log_s, dtype=float)
        I = eval_I_log(p.delta, v)
        if self.upper:
            return np.logaddexp(math.log(p.A * p.gamma) - p.gamma * v,
                                math.log(p.B) + self._log_kernel(v) + p.B * I)
        return math.log(p.C) + self._log_kernel(v) - p.C * I

    @property
    def curvature_sign(self) -> float:
        return -1.0 if self.upper else 1.0

    # --- values
    def _integrand(self, v):
        return self.log_slope(v) + v

    def _start(self):
        """Lower table limit and log H there."""
        p = self.params
        if self.log_s0 is not None:
            return self.log_s0, -np.inf
        v0 = -800.0
        if not self.upper:
            # exp(-C I) is below exp(-C pi/(2 delta)) * (1 + ...) near 0; the head is negligible
            return v0, v0 - p.C * math.pi / (2 * p.delta)
        head_pow = math.log(p.A / (1 - p.gamma)) + (1 - p.gamma) * v0
        # exp(B I(t)) = exp(B I(0) - B t^delta / delta + ...) on (0, s0)
        corr = math.log1p(-p.B / p.delta * math.exp(p.delta * v0) / (1 + p.delta))
        head_exp = p.B * math.pi / (2 * p.delta) + v0 + corr
        return v0, float(np.logaddexp(head_pow, head_exp))

    def _build(self, log_s_max, panel):
        v0, h0 = self._start()
        coarse = np.arange(v0, log_s_max + panel, panel)
        g = self._integrand(coarse)
        slope = np.abs(np.gradient(g, coarse))
        steep = np.maximum(slope[:-1], slope[1:])
        m = np.clip(np.ceil(steep * panel / 2.0), 1, 4000).astype(int)
        # panels far below the running total cannot change it; leave them coarse
        running = np.logaddexp.accumulate(np.concatenate([[h0], g[:-1] + math.log(panel)]))
        m[np.maximum(g[:-1], g[1:]) + math.log(panel) < running[:-1] - 50.0] = 1
        edges = [coarse[:1]]
        for a, b, n in zip(coarse[:-1], coarse[1:], m):
            edges.append(np.linspace(a, b, n + 1)[1:])
        edges = np.concatenate(edges)
        lo, hi = edges[:-1], edges[1:]
        pieces = self._panel_log_integral(lo, hi)
        cum = np.logaddexp.accumulate(np.concatenate([[h0], pieces]))
        self.edges = edges
        self.cum = cum
        self.log_s_max = float(edges[-1])

    def _panel_log_integral(self, lo, hi):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        nodes = mid[:, None] + half[:, None] * _GX[None, :]
        vals = self._integrand(nodes) + np.log(_GW)[None, :]
        with np.errstate(divide="ignore"):
            return logsumexp(vals, axis=1) + np.log(half)

    def log_value(self, log_s):
        """log H(s); -inf at or below the lower limit."""
        v = np.atleast_1d(np.asarray(log_s, dtype=float))
        if np.any(v > self.log_s_max):
            raise ValueError("stacking profile table is too short for the requested s")
        out = np.full(v.shape, -np.inf)
        inside = v > self.edges[0]
        if inside.any():
            vi = v[inside]
            j = np.clip(np.searchsorted(self.edges, vi, side="right") - 1, 0, len(self.edges) - 2)
            part = self._panel_log_integral(self.edges[j], vi)
            part = np.where(vi > self.edges[j], part, -np.inf)
            out[inside] = np.logaddexp(self.cum[j], part)
        below = ~inside & np.isfinite(v)
        if below.any() and self.log_s0 is None:
            p = self.params
            vb = v[below]
            if self.upper:
                out[below] = np.logaddexp(math.log(p.A / (1 - p.gamma)) + (1 - p.gamma) * vb,
                                          p.B * math.pi / (2 * p.delta) + vb)
            else:
                out[below] = vb - p.C * math.pi / (2 * p.delta)
        return out


# ---------------------------------------------------------------- reduced inequalities

def log_E_super(prof: StackingProfile, log_s, log_sig):
    """log of s|H''|/H' sigma~ + H'^2 s^gamma sigma~^-M on the outer product grid."""
    p = prof.params
    v = np.asarray(log_s)[:, None]
    t = np.asarray(log_sig)[None, :]
    ls = prof.log_slope(v)
    a = prof.log_curvature(v) - ls + t
    b = 2 * ls + p.gamma * v - p.M_exp * t
    return np.logaddexp(a, b)


def log_E_sub(prof: StackingProfile, log_s, log_sig):
    """log of s H'' sigma~ + s^gamma sigma~^-M."""
    p = prof.params
    v = np.asarray(log_s)[:, None]
    t = np.asarray(log_sig)[None, :]
    return np.logaddexp(prof.log_curvature(v) + t, p.gamma * v - p.M_exp * t)


@dataclass
class LeafConstants:
    """Constants in the three term bounds measured along the unit leaf."""
    c_curv: float
    c_vert: float
    c_mixed: float
    c_grad: float

    @property
    def c(self) -> float:
        return min(self.c_curv, self.c_vert, self.c_mixed)

    def to_dict(self):
        d = asdict(self)
        d["c"] = self.c
        return d


def _leaf_data(model: HomogeneousModel, stack: IntegrandStack, lam, tau):
    """Psi_bar(grad w), Psi_bar_i Psi_bar_j w_ij and the curvature term at (lam, tau).

    The curvature term is taken in the form -lam phi''(sigma') G(sigma), which
    stays accurate far out on the leaf where the direct contraction cancels.
    """
    d = model.reduced_at(lam, tau, extended=True)
    wx, wz = d["wx"], d["wz"]
    val, pa, pb, *_ = stack.reduced(np.abs(wx), np.abs(wz))
    gx = pa * np.sign(wx)
    gz = pb * np.sign(wz)
    mixed = gx * gx * d["wxx"] + 2 * gx * gz * d["wxz"] + gz * gz * d["wzz"]
    r = d["rows"]
    curv = -np.asarray(lam, dtype=float) * stack.profile.derivatives(r[1], 2)[2] * r[5]
    return val.astype(float), mixed.astype(float), curv, r[0]


def measure_constants(model: HomogeneousModel, stack: IntegrandStack, params: BarrierParams,
                      tau=None) -> LeafConstants:
    """Fit the constants of the bounds on I, II, III along the leaf lam = 1."""
    cur = model.pair.curve
    tau = cur.grid if tau is None else tau
    lam = np.ones_like(tau)
    psi, mixed, curv, sig = _leaf_data(model, stack, lam, tau)
    mu, beta = params.mu, params.beta
    _, e3 = sigma_exponent(mu, beta, params.M_exp)
    f2 = 0.25 if stack.lift == "aniso" else 2.0 ** -1.5   # lower bound of X^3 F''(X) on X > 1
    f2_hi = 0.25 if stack.lift == "aniso" else 1.0
    side = model.side
    c_curv = 0.5 * np.min(-side * curv * sig ** (beta + 2))
    c_vert = np.min(f2 / psi * sig ** mu)
    c_mixed = 1.0 / np.max(np.maximum(side * f2_hi * mixed / psi ** 3, 1e-300) * sig ** (-e3))
    c_grad = np.min(psi * sig ** (-mu))
    return LeafConstants(float(c_curv), float(c_vert), float(c_mixed), float(c_grad))


# ---------------------------------------------------------------- scans

def _grid(lo, hi, n):
    return np.linspace(math.log(lo), math.log(hi), n)


def gradient_margin(prof: StackingProfile, model: HomogeneousModel, stack: IntegrandStack,
                    log_lam, tau):
    """min over the samples of log(H'(lam^(-1-mu)) Psi_bar(grad w))."""
    mu = model.mu
    psi1, *_ = _leaf_data(model, stack, np.ones_like(tau), tau)
    L = np.asarray(log_lam)[:, None]
    return float(np.min(prof.log_slope(-(1 + mu) * L) - mu * L + np.log(psi1)[None, :]))


@dataclass
class ScanResult:
    accepted: float
    rows: list = field(default_factory=list)


def choose_A(params: BarrierParams, model: HomogeneousModel, stack: IntegrandStack,
             consts: LeafConstants, n_s=241, n_sig=121, A0=4.0, max_A=2.0 ** 20,
             extra=3) -> ScanResult:
    """Smallest A in the doubling scan with E >= margin * max(1, c^-2) and |grad u| in range.

    ``extra`` further doublings are recorded after acceptance so the growth of
    inf E can be checked.
    """
    log_s = _grid(1e-6, 1e6, n_s)
    log_sig = _grid(1.0, 1e6, n_sig)
    need = math.log(params.margin * max(1.0, consts.c ** -2))
    tau = model.pair.curve.grid
    log_lam = np.linspace(-12, 12, 97) * math.log(10)
    rows, accepted, A = [], None, A0
    while A <= max_A:
        p = BarrierParams(**{**params.to_dict(), "A": A, "B": A * A})
        prof = StackingProfile(p, upper=True, log_s_max=10.0)
        logE = log_E_super(prof, log_s, log_sig)
        gm = gradient_margin(prof, model, stack, log_lam, tau)
        ok = bool(logE.min() >= need and gm > 0)
        rows.append({"A": A, "B": A * A, "log_inf_E": float(logE.min()),
                     "log_required": need, "log_grad_margin": gm, "pass": ok})
        if ok and accepted is None:
            accepted = A
        if accepted is not None and A >= accepted * 2 ** extra:
            break
        A *= 2
    if accepted is None:
        raise ScanExhausted("no A in the doubling scan satisfies the reduced inequality",
                            rows=rows)
    return ScanResult(accepted, rows)


def choose_C(params: BarrierParams, model: HomogeneousModel, stack: IntegrandStack,
             consts: LeafConstants, n_s=241, n_sig=121, C0=4.0, max_C=2.0 ** 20) -> ScanResult:
    """Smallest C >= 4 in a doubling scan satisfying the subsolution inequality on Omega_C."""
    mu = params.mu
    need = math.log(params.margin * max(1.0, consts.c ** -2))
    log_sig = _grid(1.0, 1e6, n_sig)
    tau = model.pair.curve.grid
    rows, C = [], C0
    while C <= max_C:
        log_sC = solve_I(params.delta, math.log(2.0) / C)
        log_lamC = -log_sC / (1 + mu)
        p = BarrierParams(**{**params.to_dict(), "C": C, "lambda_C": math.exp(log_lamC)})
        prof = StackingProfile(p, upper=False, log_s_max=log_sC + 60.0)
        # shrink lambda_C until the gradient lands in {Psi_bar > 1} on Omega_C
        shrink = 0
        while shrink < 60:
            log_lam = log_lamC - np.linspace(0, 30, 61)
            gm = gradient_margin(prof, model, stack, log_lam, tau)
            if gm > 0:
                break
            log_lamC -= math.log(2.0)
            shrink += 1
        log_sC = -(1 + mu) * log_lamC
        log_s = log_sC + np.linspace(0, 12 * math.log(10), n_s)
        logE = log_E_sub(prof, log_s, log_sig)
        ok = bool(logE.min() > need and gm > 0)
        rows.append({"C": C, "log_lambda_C": log_lamC, "log_s_C": log_sC,
                     "log_inf_E": float(logE.min()), "log_required": need,
                     "log_grad_margin": gm, "shrink_steps": shrink, "pass": ok})
        if ok:
            return ScanResult(C, rows)
        C *= 2
    raise ScanExhausted("no C in the doubling scan satisfies the subsolution inequality", rows=rows)


# ---------------------------------------------------------------- barriers

@dataclass
class SignReport:
    side: str
    n: int
    worst: float            # max (upper) or min (lower) of the normalized contraction
    n_wrong: int
    min_log_grad: float
    pass_: bool

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("pass_")
        return d


class Barrier:
    """u = R^-1 * (H(w(R p)) - K)_+ in log form; the upper barrier has R = 1, K = 0."""

    def __init__(self, params: BarrierParams, model: HomogeneousModel, upper: bool,
                 log_s_max: float = 200.0):
        self.params = params
        self.model = model
        self.upper = upper
        mu = params.mu
        if upper:
            self.R = 1.0
            self.log_s0 = None
        else:
            self.R = params.R_scale
            self.log_s0 = -(1 + mu) * math.log(params.lambda_C)
            log_s_max = max(log_s_max, self.log_s0 + 100.0)
        self.profile = StackingProfile(params, upper, log_s0=self.log_s0, log_s_max=log_s_max)

    def log_eval(self, p):
        """(sign, log|u|) at points p in R^{2(k+1)}; odd across the cone."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        w = self.model.value(self.R * p)
        sign = np.sign(w)
        with np.errstate(divide="ignore"):
            lv = self.profile.log_value(np.log(np.abs(w)))
        lv = lv - math.log(self.R)
        sign = np.where(np.isfinite(lv), sign, 0.0)
        return sign, lv

    def log_eval_reduced(self, xi, zeta):
        m = self.model.k + 1
        p = np.zeros((np.size(xi), 2 * m))
        p[:, 0] = np.ravel(xi)
        p[:, m] = np.ravel(zeta)
        return self.log_eval(p)

    def contraction_terms(self, stack: IntegrandStack, lam, tau):
        """Signs and log magnitudes of I, II, III at leaf coordinates of w (unscaled)."""
        mu = self.params.mu
        psi, mixed, curv, _ = _leaf_data(self.model, stack, lam, tau)
        log_s = -(1 + mu) * np.log(lam)
        ls = self.profile.log_slope(log_s)
        log_x = ls + np.log(psi)
        F1, logF2 = stack.lift_factors(log_x)
        with np.errstate(divide="ignore"):
            t1 = (np.sign(curv), np.log(F1) + np.log(np.abs(curv)))
            # s H'' is stored, H'' = (s H'') / s
            t2 = (np.full_like(psi, self.profile.curvature_sign),
                  logF2 + self.profile.log_curvature(log_s) - log_s + 2 * np.log(psi))
            t3 = (np.sign(mixed), logF2 + ls + np.log(np.abs(mixed)))
        return (t1, t2, t3), log_x

    def verify_pointwise(self, stack: IntegrandStack, lam, tau, rescaled: bool = False) -> SignReport:
        """Sign of Psi_ij(grad u) u_ij at the samples, normalized by the sum of |terms|.

        With ``rescaled`` the samples are points of the rescaled function
        R^-1 u0(R .), whose contraction is R times that of u0 at the scaled point.
        """
        terms, log_x = self.contraction_terms(stack, lam, tau)
        signs = np.array([t[0] for t in terms])
        logs = np.array([t[1] for t in terms])
        top = np.max(logs, axis=0)
        scaled = signs * np.exp(logs - top)
        total = scaled.sum(axis=0) / np.abs(scaled).sum(axis=0)
        if rescaled:
            total = total * self.R / abs(self.R)
        if self.upper:
            worst = float(np.max(total))
            wrong = int(np.sum(total >= 0))
        else:
            worst = float(np.min(total))
            wrong = int(np.sum(total <= 0))
        grad_ok = float(np.min(log_x))
        need_grad = stack.lift == "aniso"
        ok = wrong == 0 and (grad_ok > 0 or not need_grad)
        return SignReport("upper" if self.upper else "lower", int(np.size(tau)), worst, wrong,
                          grad_ok, ok)


def leaf_samples(params: BarrierParams, tau_max: float, n: int, rng, upper: bool):
    """(lam, tau) samples; the lower barrier is sampled inside Omega_C."""
    if upper:
        lam = 10.0 ** rng.uniform(-3, 3, n)
    else:
        lam = params.lambda_C * 10.0 ** rng.uniform(-6, 0, n)
    tau = 10.0 ** rng.uniform(-3, math.log10(tau_max), n)
    tau[: max(1, n // 20)] = 0.0
    return lam, tau


@dataclass
class BarrierPair:
    params: BarrierParams
    upper: Barrier
    lower: Barrier
    ordering: dict = field(default_factory=dict)

    def log_values(self, xi, zeta):
        return self.upper.log_eval_reduced(xi, zeta), self.lower.log_eval_reduced(xi, zeta)


def sample_points(k: int, n: int, rng, r_range=(1e-2, 1e2)):
    """Random points of R^{2(k+1)} with |y| > |x|."""
    m = k + 1
    x = rng.normal(size=(n, m))
    y = rng.normal(size=(n, m))
    a = np.linalg.norm(x, axis=1)
    b = np.linalg.norm(y, axis=1)
    swap = a > b
    x[swap], y[swap] = y[swap].copy(), x[swap].copy()
    p = np.concatenate([x, y], axis=1)
    r = 10.0 ** rng.uniform(math.log10(r_range[0]), math.log10(r_range[1]), n)
    return p * (r / np.linalg.norm(p, axis=1))[:, None]


def assemble_barriers(params: BarrierParams, upper_model: HomogeneousModel,
                      lower_model: HomogeneousModel, n_check: int = 10000, seed: int = 0,
                      r_range=(1e-2, 1e2)) -> BarrierPair:
    """Build both barriers and check u_lower <= u_upper on a random sample."""
    pair = BarrierPair(params, Barrier(params, upper_model, True),
                       Barrier(params, lower_model, False))
    rng = np.random.default_rng(seed)
    p = sample_points(upper_model.k, n_check, rng, r_range)
    su, lu = pair.upper.log_eval(p)
    sl, ll = pair.lower.log_eval(p)
    # chain of the ordering argument: w_lower <= 2^(1+mu) w_upper
    wu = upper_model.value(p)
    wl = lower_model.value(p)
    chain = float(np.max(wl / (2 ** (1 + params.mu) * wu)))
    bad = (sl > 0) & ((su <= 0) | (ll > lu))
    pair.ordering = {"n": n_check, "violations": int(bad.sum()),
                     "max_model_ratio": chain,
                     "min_log_gap": float(np.min(np.where(sl > 0, lu - ll, np.inf))),
                     "lower_positive": int((sl > 0).sum())}
    if bad.any() or chain > 1 + 1e-12:
        raise OrderingViolation("lower barrier exceeds upper barrier", **pair.ordering)
    return pair


def lower_growth(barrier: Barrier, radii, n_theta: int = 64):
    """log sup over the ball of radius r of the lower barrier, and the fitted exponent."""
    th = np.linspace(math.pi / 4, math.pi / 2, n_theta + 1)[1:]
    logs = []
    for r in radii:
        s, lv = barrier.log_eval_reduced(r * np.cos(th), r * np.sin(th))
        logs.append(float(np.max(np.where(s > 0, lv, -np.inf))))
    logs = np.array(logs)
    if not np.all(np.isfinite(logs)):
        return logs, math.nan
    slope = np.polyfit(np.log(radii), logs, 1)[0]
    return logs, float(slope)
