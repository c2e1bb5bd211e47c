"""Symmetry-reduced Dirichlet problem Psi_ij(grad u) u_ij = 0 on a ball.

Functions of (|x|, |y|) are discretized on a polar grid in the (xi, zeta)
quarter plane. Boundary data from the barriers are astronomically large, so the
unknown is phi = u / S with log S carried separately. Dividing the equation at
each node by the positive factor F'(X) / |S grad phi| gives

    D^2 Psi_bar(n) : D^2 phi + eps(X) / Psi_bar(n) (grad Psi_bar(n) . D^2 phi . grad Psi_bar(n))
    + k (Psi_bar_a / a)(n) phi_xi / xi + k (Psi_bar_b / b)(n) phi_zeta / zeta = 0,

with n the unit gradient, X = S |grad phi| Psi_bar(n) and eps = X F''(X) / F'(X).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

from .errors import GradientOutOfDomain, NoConvergence, Unstable
from .integrand import IntegrandStack

AXIS_TOL = 1e-10


# ---------------------------------------------------------------- grid

@dataclass
class SectorGrid:
    """Polar grid rho in [rho_min, R], theta in [theta_lo, pi/2].

    theta_lo = pi/4 is the sector between the cone and the zeta axis (Dirichlet 0
    on the cone); theta_lo = 0 is the full quarter plane, with a symmetry axis at
    zeta = 0 as well.
    """
    R_ball: float
    n_rho: int = 64
    n_theta: int = 64
    k: int = 1
    theta_lo: float = math.pi / 4
    rho_min_frac: float = 1e-3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rotational multiplicity must be >= 1")
        self.rho = np.linspace(self.rho_min_frac * self.R_ball, self.R_ball, self.n_rho + 1)
        self.theta = np.linspace(self.theta_lo, math.pi / 2, self.n_theta + 1)
        self.h_rho = self.rho[1] - self.rho[0]
        self.h_theta = self.theta[1] - self.theta[0]
        self.RHO, self.TH = np.meshgrid(self.rho, self.theta, indexing="ij")
        self.XI = self.RHO * np.cos(self.TH)
        self.ZETA = self.RHO * np.sin(self.TH)
        self.XI[:, -1] = 0.0
        if self.full:
            self.ZETA[:, 0] = 0.0

    @property
    def full(self) -> bool:
        return self.theta_lo == 0.0

    @property
    def shape(self):
        return self.RHO.shape

    def index(self, i, j):
        return i * (self.n_theta + 1) + j

    def refine(self):
        return SectorGrid(self.R_ball, 2 * self.n_rho, 2 * self.n_theta, self.k,
                          self.theta_lo, self.rho_min_frac)

    def diagonal_column(self):
        """Column index of theta = pi/4."""
        return int(round((math.pi / 4 - self.theta_lo) / self.h_theta))


# ---------------------------------------------------------------- derivatives

def polar_derivatives(U, grid: SectorGrid):
    """Central differences U_r, U_t, U_rr, U_rt, U_tt at all nodes (ghost reflection at axes)."""
    hr, ht = grid.h_rho, grid.h_theta
    P = np.pad(U, ((1, 1), (1, 1)), mode="edge")
    P[:, -1] = P[:, -3]                      # even across theta = pi/2
    if grid.full:
        P[:, 0] = P[:, 2]                    # even across theta = 0
    else:
        P[:, 0] = 2 * P[:, 1] - P[:, 2]      # boundary column, not used for equations
    P[0, :] = 2 * P[1, :] - P[2, :]
    P[-1, :] = 2 * P[-2, :] - P[-3, :]
    c = P[1:-1, 1:-1]
    Ur = (P[2:, 1:-1] - P[:-2, 1:-1]) / (2 * hr)
    Ut = (P[1:-1, 2:] - P[1:-1, :-2]) / (2 * ht)
    Urr = (P[2:, 1:-1] - 2 * c + P[:-2, 1:-1]) / hr ** 2
    Utt = (P[1:-1, 2:] - 2 * c + P[1:-1, :-2]) / ht ** 2
    Urt = (P[2:, 2:] - P[2:, :-2] - P[:-2, 2:] + P[:-2, :-2]) / (4 * hr * ht)
    return Ur, Ut, Urr, Urt, Utt


def cartesian_from_polar(Ur, Ut, Urr, Urt, Utt, rho, theta):
    """(U_xi, U_zeta, U_xixi, U_xizeta, U_zetazeta) for xi = rho cos, zeta = rho sin."""
    c, s = np.cos(theta), np.sin(theta)
    Ux = c * Ur - s / rho * Ut
    Uz = s * Ur + c / rho * Ut
    Uxx = c * c * Urr - 2 * c * s / rho * Urt + s * s / rho ** 2 * Utt + s * s / rho * Ur \
        + 2 * c * s / rho ** 2 * Ut
    Uzz = s * s * Urr + 2 * c * s / rho * Urt + c * c / rho ** 2 * Utt + c * c / rho * Ur \
        - 2 * c * s / rho ** 2 * Ut
    Uxz = c * s * Urr + (c * c - s * s) / rho * Urt - c * s / rho ** 2 * Utt - c * s / rho * Ur \
        - (c * c - s * s) / rho ** 2 * Ut
    return Ux, Uz, Uxx, Uxz, Uzz


# ---------------------------------------------------------------- coefficients

@dataclass
class Coefficients:
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    b1: np.ndarray          # multiplies phi_xi / xi
    b2: np.ndarray          # multiplies phi_zeta / zeta
    log_x: np.ndarray       # log of Psi_bar at the physical gradient
    log_gain: np.ndarray    # log of F'(X) / |grad phi|, the factor divided out


def lift_ratio(stack: IntegrandStack, log_x):
    """X F''(X) / F'(X) for the lift of the stack."""
    log_x = np.asarray(log_x, dtype=float)
    if stack.lift == "area":
        return np.exp(-np.logaddexp(0.0, 2 * log_x))
    with np.errstate(over="ignore"):
        x2 = np.exp(2 * log_x)
        return np.where(log_x > 0, 2.0 / (8.0 * x2 - 1.0), np.nan)


def frozen_coefficients(stack: IntegrandStack, k: int, Ux, Uz, log_scale: float = 0.0,
                        homogeneous: bool = False) -> Coefficients:
    """Normalized operator coefficients at the gradient (Ux, Uz) of phi.

    ``homogeneous`` drops the lift and uses Psi_bar itself. A vanishing gradient
    is given the direction of the zeta axis.
    """
    Ux = np.asarray(Ux, dtype=float)
    Uz = np.asarray(Uz, dtype=float)
    norm = np.hypot(Ux, Uz)
    flat = norm == 0
    safe = np.where(flat, 1.0, norm)
    a = np.where(flat, 0.0, np.abs(Ux) / safe)
    b = np.where(flat, 1.0, np.abs(Uz) / safe)
    val, pa, pb, paa, pab, pbb, ra, rb = stack.reduced(a, b)
    sa = np.where(Ux < 0, -1.0, 1.0)
    sb = np.where(Uz < 0, -1.0, 1.0)
    with np.errstate(divide="ignore"):
        log_x = log_scale + np.log(norm) + np.log(val)
        if homogeneous:
            eps = np.zeros_like(val)
            log_gain = -np.log(safe)
        elif stack.lift == "area":
            eps = lift_ratio(stack, log_x)
            # F'(X) / |p| = S Psi_bar / sqrt(1 + X^2), finite at p = 0
            log_gain = log_scale + np.log(val) - 0.5 * np.logaddexp(0.0, 2 * log_x)
        else:
            eps = np.nan_to_num(lift_ratio(stack, log_x), nan=0.0)
            F1 = 1.0 - np.exp(-2.0 * np.maximum(log_x, 0.0)) / 8.0
            log_gain = np.log(F1) - np.log(safe)
    gx, gz = sa * pa, sb * pb
    w = eps / val
    return Coefficients(paa + w * gx * gx, sa * sb * pab + w * gx * gz, pbb + w * gz * gz,
                        k * ra, k * rb, log_x, log_gain)


def reduced_operator(stack: IntegrandStack, k: int, patch, log_scale: float = 0.0,
                     homogeneous: bool = False):
    """psi_ij(grad U) U_ij of the reduced equation for U(|x|, |y|).

    ``patch`` = (xi, zeta, U_xi, U_zeta, U_xixi, U_xizeta, U_zetazeta); the
    integrand is evaluated at exp(log_scale) * grad U and the result is for the
    unscaled U. With ``homogeneous`` the integrand is Psi_bar itself. On the
    axis xi = 0 the term U_xi / xi is replaced by its limit U_xixi.
    """
    xi, zeta, Ux, Uz, Uxx, Uxz, Uzz = [np.asarray(v, dtype=float) for v in patch]
    co = frozen_coefficients(stack, k, Ux, Uz, log_scale, homogeneous)
    if stack.lift == "aniso" and not homogeneous and np.any(co.log_x <= 0):
        raise GradientOutOfDomain("gradient inside {Psi_bar <= 1}",
                                  min_log_psi_bar=float(np.min(co.log_x)))
    out = co.a11 * Uxx + 2 * co.a12 * Uxz + co.a22 * Uzz
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(np.abs(xi) < AXIS_TOL, co.b1 * Uxx, co.b1 * Ux / xi)
        tz = np.where(np.abs(zeta) < AXIS_TOL, co.b2 * Uzz, co.b2 * Uz / zeta)
    return np.exp(co.log_gain) * (out + tx + tz)


# ---------------------------------------------------------------- assembly

def _assemble(grid: SectorGrid, co: Coefficients, mask, values):
    """Sparse matrix, right-hand side and diagonal magnitudes of the frozen problem."""
    nr, nt = grid.shape
    hr, ht = grid.h_rho, grid.h_theta
    rho, th = grid.RHO, grid.TH
    c, s = np.cos(th), np.sin(th)
    axis_x = np.zeros(grid.shape, bool)
    axis_x[:, -1] = True
    axis_z = np.zeros(grid.shape, bool)
    if grid.full:
        axis_z[:, 0] = True
    with np.errstate(divide="ignore", invalid="ignore"):
        b1 = np.where(axis_x, 0.0, co.b1 / grid.XI)
        b2 = np.where(axis_z, 0.0, co.b2 / grid.ZETA)
    # on an axis the tangential term becomes an extra second derivative
    a11 = co.a11 + np.where(axis_x, co.b1, 0.0)
    a22 = co.a22 + np.where(axis_z, co.b2, 0.0)
    a12 = co.a12
    Crr = a11 * c * c + 2 * a12 * c * s + a22 * s * s
    Crt = (-2 * a11 * c * s + 2 * a12 * (c * c - s * s) + 2 * a22 * c * s) / rho
    Ctt = (a11 * s * s - 2 * a12 * c * s + a22 * c * c) / rho ** 2
    Cr = (a11 * s * s + a22 * c * c - 2 * a12 * c * s) / rho + b1 * c + b2 * s
    Ct = (2 * c * s * (a11 - a22) - 2 * a12 * (c * c - s * s)) / rho ** 2 \
        + (-b1 * s + b2 * c) / rho

    interior = np.zeros(grid.shape, bool)
    interior[1:-1, :] = True
    interior &= ~mask
    I, J = np.nonzero(interior)
    crt = Crt / (4 * hr * ht)
    stencil = [
        (0, 0, -2 * Crr / hr ** 2 - 2 * Ctt / ht ** 2),
        (1, 0, Crr / hr ** 2 + Cr / (2 * hr)),
        (-1, 0, Crr / hr ** 2 - Cr / (2 * hr)),
        (0, 1, Ctt / ht ** 2 + Ct / (2 * ht)),
        (0, -1, Ctt / ht ** 2 - Ct / (2 * ht)),
        (1, 1, crt), (1, -1, -crt), (-1, 1, -crt), (-1, -1, crt),
    ]
    rows, cols, vals = [], [], []
    for di, dj, coef in stencil:
        jj = J + dj
        jj = np.where(jj > nt - 1, 2 * (nt - 1) - jj, jj)     # ghost reflection
        if grid.full:
            jj = np.abs(jj)
        rows.append(grid.index(I, J))
        cols.append(grid.index(I + di, jj))
        vals.append(coef[I, J])
    diag = np.ones(nr * nt)
    diag[grid.index(I, J)] = np.abs(stencil[0][2][I, J])
    # inner ring: linear interpolation towards the value 0 at the origin
    inner = np.zeros(grid.shape, bool)
    inner[0, :] = True
    inner &= ~mask
    I, J = np.nonzero(inner)
    rows += [grid.index(I, J), grid.index(I, J)]
    cols += [grid.index(I, J), grid.index(I + 1, J)]
    vals += [np.ones(I.size), np.full(I.size, -grid.rho[0] / grid.rho[1])]
    I, J = np.nonzero(mask)
    rows.append(grid.index(I, J))
    cols.append(grid.index(I, J))
    vals.append(np.ones(I.size))
    rhs = np.zeros(nr * nt)
    rhs[grid.index(I, J)] = values[I, J]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nr * nt, nr * nt))
    return A, rhs, diag


def dirichlet_mask(grid: SectorGrid):
    """Arc nodes, plus the cone column for the sector."""
    m = np.zeros(grid.shape, bool)
    m[-1, :] = True
    if not grid.full:
        m[:, 0] = True
    return m


def _gradient(grid: SectorGrid, U):
    Ur, Ut, Urr, Urt, Utt = polar_derivatives(U, grid)
    Ux, Uz, Uxx, Uxz, Uzz = cartesian_from_polar(Ur, Ut, Urr, Urt, Utt, grid.RHO, grid.TH)
    Ux[:, -1] = 0.0
    if grid.full:
        Uz[:, 0] = 0.0
    return Ux, Uz, Uxx, Uxz, Uzz


@dataclass
class _Problem:
    stack: IntegrandStack
    grid: SectorGrid
    boundary: np.ndarray
    log_scale: float
    homogeneous: bool = False

    def __post_init__(self):
        self.mask = dirichlet_mask(self.grid)
        self.values = np.where(self.mask, self.boundary, 0.0)

    def coefficients(self, U):
        Ux, Uz, *_ = _gradient(self.grid, U)
        return frozen_coefficients(self.stack, self.grid.k, Ux, Uz, self.log_scale,
                                   self.homogeneous)

    def linear(self, U):
        co = self.coefficients(U)
        return (co,) + _assemble(self.grid, co, self.mask, self.values)

    def residual(self, U):
        """Row-normalized residual, in units of U."""
        _, A, rhs, diag = self.linear(U)
        return (A @ U.ravel() - rhs) / diag

    def jacobian(self, U, r0, h=1e-7):
        """Finite-difference Jacobian of the normalized residual, nine colours."""
        co, A, _, _ = self.linear(U)
        pat = A.tocoo()
        I, J = np.meshgrid(np.arange(self.grid.shape[0]), np.arange(self.grid.shape[1]),
                           indexing="ij")
        colour = ((I % 3) * 3 + J % 3).ravel()
        vals = np.zeros(pat.nnz)
        for c in range(9):
            e = (colour == c).reshape(self.grid.shape)
            d = (self.residual(U + h * e) - r0) / h
            sel = colour[pat.col] == c
            vals[sel] = d[pat.row[sel]]
        return sp.csc_matrix((vals, (pat.row, pat.col)), shape=A.shape)


def nonlinear_residual(stack, grid: SectorGrid, U, log_scale, boundary, homogeneous=False):
    """Row-normalized residual of the discrete nonlinear equations on the grid."""
    return _Problem(stack, grid, boundary, log_scale, homogeneous).residual(U).reshape(grid.shape)


def discrete_operator(stack, grid: SectorGrid, U, log_scale=0.0, homogeneous=False):
    """Unscaled interior values of the discrete normalized operator applied to U."""
    pb = _Problem(stack, grid, U, log_scale, homogeneous)
    _, A, rhs, _ = pb.linear(U)
    out = (A @ U.ravel() - rhs).reshape(grid.shape)
    out[pb.mask] = 0.0
    out[0] = 0.0
    return out


# ---------------------------------------------------------------- solver

@dataclass
class PdeSolution:
    grid: SectorGrid = field(repr=False)
    U: np.ndarray = field(repr=False)        # normalized values phi = u / S
    log_scale: float
    residual_max: float
    residual_l2: float
    iterations: int
    history: list = field(default_factory=list, repr=False)
    boundary_tag: str = "ubar"
    trapping: dict = field(default_factory=dict)
    growth_samples: list = field(default_factory=list)

    def to_dict(self):
        return {"R_ball": self.grid.R_ball, "n_rho": self.grid.n_rho,
                "n_theta": self.grid.n_theta, "log_scale": self.log_scale,
                "residual_max": self.residual_max, "residual_l2": self.residual_l2,
                "iterations": self.iterations, "boundary": self.boundary_tag,
                "trapped": self.trapping.get("trapped"), "trapping": self.trapping,
                "growth_samples": self.growth_samples}

    def rows(self):
        """(rho, theta, U) with U in units of exp(log_scale)."""
        g = self.grid
        return np.column_stack([g.RHO.ravel(), g.TH.ravel(), self.U.ravel()])


def _iterate(pb: _Problem, U, omega, tol, max_iters, newton, history, stall=50):
    """Damped Picard with optional Newton steps; returns (U, converged).

    Gives up early once the best residual of the last ``stall`` iterations is
    not half the best before them.
    """
    use_newton = newton
    local = []
    for _ in range(max_iters):
        co, A, rhs, diag = pb.linear(U)
        if pb.stack.lift == "aniso" and not pb.homogeneous and history:
            inside = ~pb.mask & (co.log_x <= 0)
            if inside.any():
                raise GradientOutOfDomain("Picard iterate left {Psi_bar > 1}",
                                          iteration=len(history), n_nodes=int(inside.sum()))
        r = (A @ U.ravel() - rhs) / diag
        rmax = float(np.max(np.abs(r)))
        history.append(rmax)
        local.append(rmax)
        if rmax < tol:
            return U, True
        if len(local) > 2 * stall and min(local[-stall:]) > 0.5 * min(local[:-stall]):
            return U, False
        if use_newton and rmax < 1e-4:
            dx = spla.spsolve(pb.jacobian(U, r), -r).reshape(U.shape)
            if np.all(np.isfinite(dx)):
                for step in (1.0, 0.5, 0.25):
                    Un = U + step * dx
                    if np.max(np.abs(pb.residual(Un))) < rmax:
                        U = Un
                        break
                else:
                    use_newton = False
                if use_newton:
                    continue
            use_newton = False
        V = spla.spsolve(A.tocsc(), rhs).reshape(U.shape)
        if not np.all(np.isfinite(V)):
            raise NoConvergence("frozen linear problem is singular", iteration=len(history))
        U = (1 - omega) * U + omega * V
    return U, False


def solve_dirichlet(stack: IntegrandStack, grid: SectorGrid, boundary, log_scale: float = 0.0,
                    initial=None, omega: float = 0.8, tol: float = 1e-8, max_iters: int = 500,
                    homogeneous: bool = False, tag: str = "ubar", newton: bool = True,
                    continuation: bool = True) -> PdeSolution:
    """Damped Picard iteration for the normalized Dirichlet problem.

    ``boundary`` holds normalized values phi = u / exp(log_scale) on the arc
    (the cone column of a sector is forced to zero). For the area lift with a
    large scale, the iteration is first converged at scale 1 and the scale is
    raised in adaptive steps, each warm-started from the last solution.
    """
    pb = _Problem(stack, grid, np.asarray(boundary, dtype=float), log_scale, homogeneous)
    if initial is None:
        initial = np.broadcast_to(pb.values[-1:, :], grid.shape)
    U = np.where(pb.mask, pb.values, np.asarray(initial, dtype=float))
    scale = max(1.0, float(np.max(np.abs(pb.values))))
    history: list = []
    ramp = continuation and stack.lift == "area" and not homogeneous and log_scale > 1.0
    if ramp:
        reached, step = None, 1.0
        target = log_scale
        current = 0.0
        while True:
            pb.log_scale = current
            Un, ok = _iterate(pb, U, omega, tol * scale, max_iters, newton, history)
            if ok:
                reached, U = current, Un
                if current >= target:
                    break
                step *= 2
            else:
                if reached is None:
                    break
                step /= 2
                if step < 0.25:
                    break
            current = min(target, (reached if reached is not None else 0.0) + step)
        converged = reached is not None and reached >= target
        diag = {"log_scale_reached": reached, "target": target}
    else:
        U, converged = _iterate(pb, U, omega, tol * scale, max_iters, newton, history)
        diag = {}
    if not converged:
        raise NoConvergence("residual stagnates above the tolerance", residual=history[-1],
                            iterations=len(history), history=history[-10:], **diag)
    r = pb.residual(U)
    return PdeSolution(grid, U, log_scale, float(np.max(np.abs(r))),
                       float(np.sqrt(np.mean(r ** 2))), len(history), history, tag)


# ---------------------------------------------------------------- barrier coupling

def barrier_data(pair, grid: SectorGrid):
    """Signs and log magnitudes of both barriers at the grid nodes."""
    su, lu = pair.upper.log_eval_reduced(grid.XI.ravel(), grid.ZETA.ravel())
    sl, ll = pair.lower.log_eval_reduced(grid.XI.ravel(), grid.ZETA.ravel())
    su, lu, sl, ll = (v.reshape(grid.shape) for v in (su, lu, sl, ll))
    cone = np.zeros(grid.shape, bool)
    cone[:, grid.diagonal_column()] = True
    su = np.where(cone, 0.0, su)
    sl = np.where(cone, 0.0, sl)
    return su, lu, sl, ll


def normalized(sign, logv, log_scale):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(sign != 0, sign * np.exp(logv - log_scale), 0.0)


def boundary_scale(pair, R_ball: float, n: int = 257) -> float:
    """log of max |u_upper| on the arc of radius R_ball."""
    th = np.linspace(math.pi / 4, math.pi / 2, n)[1:]
    s, lv = pair.upper.log_eval_reduced(R_ball * np.cos(th), R_ball * np.sin(th))
    return float(np.max(np.where(s != 0, lv, -np.inf)))


def _odd_symmetrize(V, grid: SectorGrid):
    if not grid.full:
        return V
    return 0.5 * (V - V[:, ::-1])


def solve_with_barriers(stack, pair, grid: SectorGrid, omega=0.8, tol=1e-8, max_iters=500,
                        data_factor: float = 1.0, newton=True, continuation=True) -> PdeSolution:
    """Dirichlet solve with data u_upper on the arc, followed by the trapping check.

    ``data_factor`` multiplies the boundary data (comparison checks).
    """
    su, lu, sl, ll = barrier_data(pair, grid)
    log_scale = boundary_scale(pair, grid.R_ball) + math.log(data_factor)
    up = _odd_symmetrize(normalized(su, lu + math.log(data_factor), log_scale), grid)
    lo = _odd_symmetrize(normalized(sl, ll, log_scale), grid)
    boundary = np.zeros(grid.shape)
    boundary[-1] = up[-1]
    sol = solve_dirichlet(stack, grid, boundary, log_scale, initial=0.5 * (up + lo),
                          omega=omega, tol=tol, max_iters=max_iters, newton=newton,
                          continuation=continuation)
    sol.trapping = trapping_report(sol, up, lo, tol)
    return sol


def trapping_report(sol: PdeSolution, up, lo, tol):
    """u_lower <= U <= u_upper at the nodes of the closed sector, to solver tolerance."""
    g = sol.grid
    sector = g.TH >= math.pi / 4 - 1e-12
    U = sol.U[sector]
    slack = tol * max(1.0, float(np.max(np.abs(sol.U))))
    above = float(np.max(U - up[sector]))
    below = float(np.max(lo[sector] - U))
    return {"max_excess_over_upper": above, "max_deficit_under_lower": below,
            "n_nodes": int(U.size), "tolerance": slack,
            "trapped": bool(above <= slack and below <= slack)}


# ---------------------------------------------------------------- diagnostics

def sup_profile(sol: PdeSolution, radii):
    """log sup over {rho <= r} of u = S phi at each radius."""
    g = sol.grid
    spline = CubicSpline(g.rho, sol.U, axis=0)
    out = []
    for r in radii:
        # nodes inside plus the spline on the circle itself; nodes alone are too coarse
        inside = sol.U[g.RHO <= r * (1 + 1e-12)]
        top = max(float(np.max(spline(r))), float(np.max(inside)) if inside.size else -math.inf)
        out.append(math.log(top) + sol.log_scale if top > 0 else -math.inf)
    return np.array(out)


def growth_exponent(solutions, n_radii: int = 6, stability: float = 0.05):
    """Slope of log sup u against log r over the common interior window.

    Sample radii run up to half the smallest ball. Successive solutions must
    agree to ``stability`` (relative) there, otherwise Unstable is raised.
    """
    sols = sorted(solutions, key=lambda s: s.grid.R_ball)
    if len(sols) < 3:
        raise ValueError("growth fit needs at least three balls")
    r_hi = sols[0].grid.R_ball / 2
    radii = np.geomspace(r_hi / 8, r_hi, n_radii)
    logs = np.array([sup_profile(s, radii) for s in sols])
    changes = [float(np.max(np.abs(np.expm1(b - a)))) for a, b in zip(logs[:-1], logs[1:])]
    for s, l in zip(sols, logs):
        s.growth_samples = [[float(r), float(v)] for r, v in zip(radii, l)]
    slope = float(np.polyfit(np.log(radii), logs[-1], 1)[0])
    report = {"slope": slope, "radii": radii.tolist(), "relative_changes": changes,
              "log_sup": logs.tolist()}
    if not np.all(np.isfinite(logs)) or any(c >= stability for c in changes):
        raise Unstable("successive solutions disagree on the interior window", **report)
    return report


def residual_order(stack, k, exact, R_ball, n0=16, levels=3, log_scale=0.0,
                   homogeneous=True, window=(0.25, 0.75), cone_gap=0.2):
    """Max truncation residual of an exact solution under grid halving.

    ``exact(xi, zeta)`` is sampled on each grid, the discrete normalized
    operator is applied, and the max is taken over rho / R in ``window`` and
    theta >= pi/4 + cone_gap. Returns (residuals, observed orders).
    """
    errs = []
    for lev in range(levels):
        n = n0 * 2 ** lev
        grid = SectorGrid(R_ball, n, n, k)
        U = exact(grid.XI, grid.ZETA)
        val = discrete_operator(stack, grid, U, log_scale, homogeneous)
        m = (grid.RHO >= window[0] * R_ball) & (grid.RHO <= window[1] * R_ball) \
            & (grid.TH >= math.pi / 4 + cone_gap)
        errs.append(float(np.max(np.abs(val[m]))))
    errs = np.array(errs)
    return errs, np.log2(errs[:-1] / errs[1:])


def odd_consistency(sector: PdeSolution, full: PdeSolution):
    """Max deviations of a quarter-plane solution from the sector one and from oddness."""
    j0 = full.grid.diagonal_column()
    if full.grid.n_rho != sector.grid.n_rho or full.grid.n_theta != 2 * sector.grid.n_theta:
        raise ValueError("quarter-plane grid must double the sector's angular resolution")
    shift = full.log_scale - sector.log_scale
    upper = full.U[:, j0:] * math.exp(shift)
    mirror = full.U[:, j0::-1] * math.exp(shift)
    return {"sector_mismatch": float(np.max(np.abs(upper - sector.U))),
            "odd_defect": float(np.max(np.abs(upper + mirror)))}


# ---------------------------------------------------------------- export

def write_csv(sol: PdeSolution, path):
    np.savetxt(path, sol.rows(), delimiter=",", header="rho,theta,U_over_scale", comments="")
