"""One-variable profiles phi, the four-dimensional integrand and its lifts.

The integrand on R^{k+1} x R^{k+1} depends only on (|x|, |y|) through
``max(|x|,|y|) * phi(min/max)``, which is exactly symmetric under exchange.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import DegenerateConvexity, InfeasibleFamily, InvalidMu, NotElliptic

TOL_IDENTITY = 1e-12
TOL_ELLIPTIC = 1e-8


def _real(x):
    """Array view keeping extended float precision when it is passed in."""
    x = np.asarray(x)
    return x if x.dtype == np.longdouble else np.asarray(x, dtype=float)


# ---------------------------------------------------------------- kinds

@dataclass(frozen=True)
class Area:
    """Area integrand with rotational multiplicity ``k``."""
    k: int


@dataclass(frozen=True)
class Bump:
    """sqrt(1+s^2) plus a Gaussian bump in s^2 - 1 of the given width."""
    width: float
    kappa: float | None = None


@dataclass(frozen=True)
class EvenSeries:
    """Polynomial in s^2; ``coefficients[j]`` multiplies s^(2j).

    When passed to :func:`build_phi`, the constant and the top coefficient
    are overwritten so that both identities at s = 1 hold.
    """
    coefficients: tuple

    @classmethod
    def with_degree(cls, degree: int, quadratic: float = 0.5) -> "EvenSeries":
        if degree % 2 or degree < 4:
            raise ValueError("degree must be even and at least 4")
        c = [0.0] * (degree // 2 + 1)
        c[1] = quadratic
        return cls(tuple(c))


def area_exponents(k: int) -> tuple[float, float]:
    """Decay exponent mu and the secondary exponent alpha for the area case."""
    disc = (k - 0.5) ** 2 - 2 * k
    if disc < 0:
        raise InvalidMu(f"multiplicity k={k} gives complex exponent (discriminant {disc})",
                        discriminant=disc)
    mu = (k - 0.5) - np.sqrt(disc)
    alpha = min((k - 0.5) + np.sqrt(disc), 2 * mu + 1)
    return float(mu), float(alpha)


# ---------------------------------------------------------------- profile

@dataclass(frozen=True)
class PhiProfile:
    """Even profile with closed-form derivatives up to fourth order.

    ``kind`` is one of ``"area"``, ``"bump"``, ``"series"``. ``k`` is the
    rotational multiplicity of each block (1 for anisotropic profiles).
    """
    kind: str
    k: int = 1
    mu_target: float | None = None
    coefficients: tuple = ()
    kappa: float = 0.0
    width: float = 1.0
    _poly: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "series":
            full = np.zeros(2 * len(self.coefficients) - 1 if self.coefficients else 1)
            full[::2] = self.coefficients if self.coefficients else [0.0]
            polys = [full]
            for _ in range(4):
                polys.append(npoly.polyder(polys[-1]) if len(polys[-1]) > 1 else np.zeros(1))
            # 2 phi'(1+y) - phi(1+y) as a polynomial in y, for cancellation-free use near y = 0
            defect = npoly.polysub(2 * _taylor_shift(polys[1]), _taylor_shift(polys[0]))
            object.__setattr__(self, "_poly", tuple(polys) + (defect,))

    @property
    def is_area(self) -> bool:
        return self.kind == "area"

    def derivatives(self, s, order: int = 4) -> np.ndarray:
        """Array of shape (order+1, *s.shape) holding phi, phi', ..."""
        s = _real(s)
        if self.kind == "area":
            out = _area_derivs(s)
        elif self.kind == "series":
            out = np.array([npoly.polyval(s, c) for c in self._poly])
        elif self.kind == "bump":
            out = _area_derivs(s) + self.kappa * _bump_derivs(s, self.width)
        else:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        return out[: order + 1]

    def compat_defect(self, y):
        """2 phi'(1+y) - phi(1+y), accurate for small y."""
        y = np.asarray(y, dtype=float)
        z = 1.0 + y
        if self.kind == "series":
            return npoly.polyval(y, self._poly[5])
        area = -y * y / np.sqrt(1.0 + z * z)
        if self.kind == "area":
            return area
        b = _bump_derivs(z, self.width)
        return area + self.kappa * (2 * b[1] - b[0])

    def __call__(self, s):
        return self.derivatives(s, 0)[0]

    def mudef_residual(self) -> float:
        if self.mu_target is None:
            return np.inf
        v, _, d2 = self.derivatives(1.0, 2)
        return float(abs(v / (2 * d2) - self.mu_target * (1 - self.mu_target)))

    @property
    def mudef_compatible(self) -> bool:
        return self.mudef_residual() <= TOL_IDENTITY

    def invariants(self) -> dict:
        d0 = self.derivatives(0.0)
        v1, d1 = self.derivatives(1.0, 1)
        grid = np.linspace(0.0, 10.0, 2001)
        return {
            "evenness": float(max(abs(d0[1]), abs(d0[3]))),
            "phicompat": float(abs(2 * d1 - v1)),
            "mudef": self.mudef_residual(),
            "min_phi": float(self(grid).min()),
        }

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "mu_target": self.mu_target,
                "coefficients": list(self.coefficients), "kappa": self.kappa,
                "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "PhiProfile":
        return cls(kind=d["kind"], k=d["k"], mu_target=d["mu_target"],
                   coefficients=tuple(d["coefficients"]), kappa=d["kappa"], width=d["width"])


def _taylor_shift(c):
    """Coefficients of p(1 + y) in powers of y."""
    out = np.zeros(1)
    for a in c[::-1]:
        out = npoly.polyadd(npoly.polymul(out, [1.0, 1.0]), [a])
    return out


def _area_derivs(s):
    r = 1.0 + s * s
    sq = np.sqrt(r)
    return np.array([sq, s / sq, r ** -1.5, -3 * s * r ** -2.5, (12 * s * s - 3) * r ** -3.5])


def _bump_derivs(s, width):
    # g(u) = u^2 exp(-u^2/w^2), u = s^2 - 1; derivatives of g as poly(u)*exp
    a = 1.0 / width ** 2
    u = s * s - 1.0
    e = np.exp(-a * u * u)
    polys = [np.array([0.0, 0.0, 1.0])]
    for _ in range(4):
        p = polys[-1]
        polys.append(npoly.polysub(npoly.polyder(p), npoly.polymulx(2 * a * p)))
    g = [npoly.polyval(u, p) * e for p in polys]
    return np.array([
        g[0],
        2 * s * g[1],
        4 * s ** 2 * g[2] + 2 * g[1],
        8 * s ** 3 * g[3] + 12 * s * g[2],
        16 * s ** 4 * g[4] + 48 * s ** 2 * g[3] + 12 * g[2],
    ])


def build_phi(kind, mu: float | None = None, s_max: float = 1.0) -> PhiProfile:
    """Build a profile whose free parameters satisfy both identities at s = 1."""
    if isinstance(kind, Area):
        if kind.k < 3:
            area_exponents(kind.k)  # raises for k = 2
            raise InvalidMu(f"area multiplicity must be at least 3, got {kind.k}")
        m, _ = area_exponents(kind.k)
        return PhiProfile("area", k=kind.k, mu_target=m)

    if mu is None or not (0.0 < mu < 0.5):
        raise InvalidMu(f"mu must lie in (0, 1/2), got {mu}")
    target = 1.0 / (2 * mu * (1 - mu))  # phi''(1) / phi(1)

    if isinstance(kind, Bump):
        # the bump contributes 8*kappa to phi''(1) and nothing to phi, phi'
        kappa = (np.sqrt(2.0) * target - 2 ** -1.5) / 8.0
        prof = PhiProfile("bump", mu_target=mu, kappa=float(kappa), width=float(kind.width))
    elif isinstance(kind, EvenSeries):
        prof = _solve_series(kind.coefficients, mu, target)
    else:
        raise TypeError(f"unsupported profile kind {kind!r}")

    s = np.linspace(0.0, s_max, 4001)
    d = prof.derivatives(s, 2)
    worst = float(d[2].min())
    if worst <= 0 or d[0].min() <= 0:
        raise InfeasibleFamily("profile fails the convexity/positivity pre-check",
                               min_phi2=worst, profile=prof.to_dict())
    return prof


def _solve_series(coefficients, mu, target):
    c = np.array(coefficients, dtype=float)
    n = len(c) - 1
    if n < 2:
        raise InfeasibleFamily("series needs at least s^0, s^2 and one higher power")
    m = 2 * n
    known = c.copy()
    known[0] = 0.0
    known[-1] = 0.0
    pw = 2 * np.arange(n + 1)
    S0 = known.sum()
    S1 = (pw * known).sum()
    S2 = (pw * (pw - 1) * known).sum()
    # unknowns (c0, cm): phi(1) - 2 phi'(1) = 0 and phi''(1) = target * phi(1)
    lhs = np.array([[1.0, 1.0 - 2 * m], [-target, m * (m - 1) - target]])
    rhs = np.array([2 * S1 - S0, target * S0 - S2])
    c0, cm = np.linalg.solve(lhs, rhs)
    c[0], c[-1] = c0, cm
    return PhiProfile("series", mu_target=mu, coefficients=tuple(float(x) for x in c))


def eval_PQ(profile: PhiProfile, s):
    """Coefficients P = phi'/phi'' and Q = (s phi' - phi)/phi''."""
    v, d1, d2 = profile.derivatives(s, 2)
    if np.any(d2 <= 0):
        raise DegenerateConvexity("phi'' is not positive at the query point",
                                  min_phi2=float(np.min(d2)))
    return d1 / d2, (s * d1 - v) / d2


def eval_PQ_derivs(profile: PhiProfile, s):
    """P, Q together with their first derivatives."""
    v, d1, d2, d3 = profile.derivatives(s, 3)
    P = d1 / d2
    Q = (s * d1 - v) / d2
    r = d3 / d2
    return P, Q, 1.0 - P * r, s - Q * r


def indicial_exponents(profile: PhiProfile) -> tuple[float, float]:
    """Decay rates of the two linear modes at the fixed point (1, 1).

    They solve nu^2 - (2k+1) nu + 2k + k P(1) = 0 with nu = 1 + rate.
    """
    k = profile.k
    P1 = float(eval_PQ(profile, 1.0)[0])
    b = 2 * k + 1
    disc = b * b - 4 * (2 * k + k * P1)
    if disc < 0:
        raise InvalidMu("complex indicial exponents", discriminant=disc)
    r = np.sqrt(disc)
    return (b - r) / 2 - 1, (b + r) / 2 - 1


def fixed_point_matrix(profile: PhiProfile) -> np.ndarray:
    k = profile.k
    P1 = float(eval_PQ(profile, 1.0)[0])
    return np.array([[-1.0, 1.0], [-k * P1, -2.0 * k]])


# ---------------------------------------------------------------- lifts

@dataclass(frozen=True)
class IntegrandStack:
    """Profile plus the convex lift; ``lift`` is ``"area"`` or ``"aniso"``."""
    profile: PhiProfile
    lift: str = "aniso"

    @classmethod
    def from_profile(cls, profile: PhiProfile) -> "IntegrandStack":
        return cls(profile, "area" if profile.is_area else "aniso")

    @property
    def k(self) -> int:
        return self.profile.k

    @property
    def dim(self) -> int:
        return 2 * (self.k + 1)

    # -- reduced two-variable form
    def reduced(self, a, b):
        """phi(a, b) = max*phi(min/max) and its derivatives for a, b >= 0.

        Returns (value, d_a, d_b, d_aa, d_ab, d_bb, d_a/a, d_b/b); the two
        ratios use their limits when a or b vanish.
        """
        a = _real(a)
        b = _real(b)
        swap = a > b
        hi = np.where(swap, a, b)
        lo = np.where(swap, b, a)
        t = np.divide(lo, hi, out=np.zeros_like(hi), where=hi > 0)
        v, d1, d2 = self.profile.derivatives(t, 2)
        val = hi * v
        g_lo = d1                      # derivative in the smaller coordinate
        g_hi = v - t * d1
        h_ll = d2 / hi
        h_lh = -t * d2 / hi
        h_hh = t * t * d2 / hi
        small = t < 1e-8
        ratio_t = np.divide(d1, t, out=np.zeros_like(t), where=~small)
        ratio_t = np.where(small, d2, ratio_t)   # phi'(t)/t
        r_lo = ratio_t / hi                      # g_lo / lo
        r_hi = g_hi / hi
        d_a = np.where(swap, g_hi, g_lo)
        d_b = np.where(swap, g_lo, g_hi)
        d_aa = np.where(swap, h_hh, h_ll)
        d_bb = np.where(swap, h_ll, h_hh)
        ra = np.where(swap, r_hi, r_lo)
        rb = np.where(swap, r_lo, r_hi)
        return val, d_a, d_b, d_aa, h_lh, d_bb, ra, rb

    def psi_bar(self, p):
        """Value, gradient and Hessian at points ``p`` of shape (N, dim)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        m = self.k + 1
        x, y = p[:, :m], p[:, m:]
        a = np.linalg.norm(x, axis=1)
        b = np.linalg.norm(y, axis=1)
        val, da, db, daa, dab, dbb, ra, rb = self.reduced(a, b)
        xh = _unit(x, a)
        yh = _unit(y, b)
        grad = np.concatenate([da[:, None] * xh, db[:, None] * yh], axis=1)
        n = p.shape[1]
        H = np.zeros((p.shape[0], n, n))
        eye = np.eye(m)
        H[:, :m, :m] = (daa - ra)[:, None, None] * np.einsum("ni,nj->nij", xh, xh) + ra[:, None, None] * eye
        H[:, m:, m:] = (dbb - rb)[:, None, None] * np.einsum("ni,nj->nij", yh, yh) + rb[:, None, None] * eye
        cross = dab[:, None, None] * np.einsum("ni,nj->nij", xh, yh)
        H[:, :m, m:] = cross
        H[:, m:, :m] = np.transpose(cross, (0, 2, 1))
        return val, grad, H

    # -- lift
    def F(self, s):
        return eval_F(self, s)

    def lift_factors(self, log_x):
        """F'(X) and log F''(X) for X = exp(log_x) on the barrier range X > 1/2."""
        log_x = np.asarray(log_x, dtype=float)
        e = np.exp(-2.0 * log_x)
        if self.lift == "area":
            return 1.0 / np.sqrt(1.0 + e), -3.0 * log_x - 1.5 * np.log1p(e)
        return 1.0 - e / 8.0, -3.0 * log_x - np.log(4.0)

    @property
    def lift_tail(self) -> float:
        """Limit of X^3 F''(X) as X grows."""
        return 1.0 if self.lift == "area" else 0.25

    def psi(self, p):
        val, grad, H = self.psi_bar(p)
        if self.lift == "aniso" and np.any(val <= 1.0):
            from .errors import GradientOutOfDomain
            raise GradientOutOfDomain("Psi requested inside {Psi_bar <= 1}",
                                      min_psi_bar=float(val.min()))
        F0, F1, F2 = eval_F(self, val)
        Hs = F1[:, None, None] * H + F2[:, None, None] * np.einsum("ni,nj->nij", grad, grad)
        return F0, F1[:, None] * grad, Hs

    def phi5(self, v):
        """Value, gradient and Hessian of the perspective integrand on R^{dim+1}."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        p, z = v[:, :-1], v[:, -1]
        az = np.abs(z)
        n = v.shape[1]
        val = np.empty(v.shape[0])
        grad = np.zeros_like(v)
        H = np.zeros((v.shape[0], n, n))

        eq = az == 0
        if np.any(eq):
            pv, pg, pH = self.psi_bar(p[eq])
            val[eq] = pv
            grad[eq, :-1] = pg
            H[eq, :-1, :-1] = pH
            H[eq, -1, -1] = self.lift_tail / pv

        off = ~eq
        if np.any(off):
            zo = az[off]
            q = p[off] / zo[:, None]
            qv, qg, qH = self.psi_bar(q)
            if self.lift == "aniso" and np.any(qv <= 1.0):
                from .errors import GradientOutOfDomain
                raise GradientOutOfDomain("Phi requested where Psi is not constructed")
            F0, F1, F2 = eval_F(self, qv)
            g = F1[:, None] * qg
            D = F1[:, None, None] * qH + F2[:, None, None] * np.einsum("ni,nj->nij", qg, qg)
            sz = np.sign(z[off])
            val[off] = zo * F0
            grad[off, :-1] = g
            grad[off, -1] = sz * (F0 - np.einsum("ni,ni->n", q, g))
            Dq = np.einsum("nij,nj->ni", D, q)
            H[off, :-1, :-1] = D / zo[:, None, None]
            H[off, :-1, -1] = -sz[:, None] * Dq / zo[:, None]
            H[off, -1, :-1] = H[off, :-1, -1]
            H[off, -1, -1] = np.einsum("ni,ni->n", q, Dq) / zo
        return val, grad, H


def _unit(x, n):
    out = np.zeros_like(x)
    nz = n > 0
    out[nz] = x[nz] / n[nz, None]
    return out


def eval_F(stack: IntegrandStack, s):
    """The convex lift and two derivatives."""
    s = np.asarray(s, dtype=float)
    if stack.lift == "area":
        r = np.sqrt(1.0 + s * s)
        return r, s / r, r ** -3
    hi = s > 0.5
    ss = np.where(hi, s, 1.0)
    F0 = np.where(hi, ss + 0.125 / ss, 21.0 / 32 + s * s / 4 + s ** 4 / 2)
    F1 = np.where(hi, 1.0 - 0.125 / ss ** 2, s / 2 + 2 * s ** 3)
    F2 = np.where(hi, 0.25 / ss ** 3, 0.5 + 6 * s * s)
    return F0, F1, F2


# ---------------------------------------------------------------- ellipticity

@dataclass
class EllipticityReport:
    min_eigenvalue: float
    min_eigenvalue_psi_bar: float
    min_eigenvalue_equator: float
    n_samples: int
    n_excluded: int
    scalar_checks: dict
    passed: bool

    def to_dict(self) -> dict:
        return {"min_eigenvalue": self.min_eigenvalue, "n_samples": self.n_samples,
                "pass": self.passed, "min_eigenvalue_psi_bar": self.min_eigenvalue_psi_bar,
                "min_eigenvalue_equator": self.min_eigenvalue_equator,
                "n_excluded": self.n_excluded, "scalar_checks": self.scalar_checks}


def restricted_min_eig(H, nu):
    """Smallest eigenvalue of each H restricted to the complement of nu."""
    out = np.empty(len(nu))
    for i, (h, v) in enumerate(zip(H, nu)):
        q, _ = np.linalg.qr(np.column_stack([v, np.eye(len(v))]))
        B = q[:, 1:len(v)]
        out[i] = np.linalg.eigvalsh(B.T @ h @ B)[0]
    return out


def check_ellipticity(stack: IntegrandStack, n_samples: int = 10_000, seed: int = 0,
                      s_max: float = 1.0, raise_on_fail: bool = True) -> EllipticityReport:
    """Sampled convexity check of Psi_bar on S^{dim-1} and Phi on S^dim.

    For the anisotropic lift, Phi is only defined where Psi_bar(p) > |z|;
    samples outside are counted in ``n_excluded``.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    prof = stack.profile
    s = np.linspace(0.0, s_max, 2001)
    v, d1, d2 = prof.derivatives(s, 2)
    inner = s[1:]
    scalar = {
        "min_phi2": float(d2.min()),
        "min_phi1": float(d1[1:].min()),
        "min_phi_minus_s_phi1": float((v[1:] - inner * d1[1:]).min()),
    }
    scalar_ok = all(x > TOL_ELLIPTIC for x in scalar.values())
    if not scalar_ok:
        rep = EllipticityReport(np.nan, np.nan, np.nan, 0, 0, scalar, False)
        if raise_on_fail:
            raise NotElliptic("scalar pre-check failed", report=rep.to_dict())
        return rep

    rng = np.random.default_rng(seed)
    n = stack.dim
    # Psi_bar on the unit sphere of R^n
    P = rng.standard_normal((n_samples, n))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    _, _, Hp = stack.psi_bar(P)
    eig_pb = restricted_min_eig(Hp, P)

    # Phi on the unit sphere of R^{n+1}: bulk samples plus an equatorial band
    n_band = n_samples // 4
    V = rng.standard_normal((n_samples - n_band, n + 1))
    W = rng.standard_normal((n_band, n + 1))
    W[:, -1] = rng.uniform(-0.05, 0.05, n_band)
    W[: n_band // 4, -1] = 0.0
    V = np.vstack([V, W])
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    if stack.lift == "aniso":
        pb = stack.psi_bar(V[:, :-1])[0]
        keep = pb > np.abs(V[:, -1])
    else:
        keep = np.ones(len(V), dtype=bool)
    Vk = V[keep]
    _, _, Hv = stack.phi5(Vk)
    eig = restricted_min_eig(Hv, Vk)
    band = np.abs(Vk[:, -1]) <= 0.05
    rep = EllipticityReport(
        min_eigenvalue=float(eig.min()),
        min_eigenvalue_psi_bar=float(eig_pb.min()),
        min_eigenvalue_equator=float(eig[band].min()) if band.any() else np.nan,
        n_samples=int(keep.sum()),
        n_excluded=int((~keep).sum()),
        scalar_checks=scalar,
        passed=bool(eig.min() > TOL_ELLIPTIC and eig_pb.min() > TOL_ELLIPTIC),
    )
    if raise_on_fail and not rep.passed:
        raise NotElliptic("restricted Hessian eigenvalue below tolerance", report=rep.to_dict())
    return rep
