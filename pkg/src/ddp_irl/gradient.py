"""Derivative of a solved trajectory with respect to the parameter.

The parameter is appended to the state, ``y = [theta; x]`` with
``y+ = [theta; f(x, u; theta)]``, and one DDP backward sweep on this augmented
system at the solved trajectory gives feedback gains ``Kbar`` with
``du_k/dtheta = Kbar_k [I; dx_k/dtheta]``.  A forward sweep of the linearized
augmented dynamics then yields the whole trajectory derivative.

Flavors:
  gradient_backward_ip   interior-point, duals eliminated as lam = -mu/g, nu = h/mu
  gradient_barrier       unconstrained sweep on c - mu sum log(-g) + |h|^2 / (2 mu)
  gradient_activeset     active rows treated as equalities, stage KKT solves
  gradient_unconstrained constraints ignored
  pdp_oracle_gradient    one dense solve of the differentiated stationarity system
"""

from dataclasses import dataclass
from functools import lru_cache

import jax.numpy as jnp
import numpy as np
import scipy.linalg as sla

from .linalg import SingularMatrixError, contract
from .problem import OCProblem
from .solver import kkt_stage, _NotPositiveDefinite


@dataclass
class TrajectoryGradient:
    dx: np.ndarray      # (N+1, n_x, n_theta), dx[0] = 0
    du: np.ndarray      # (N, n_u, n_theta)

    def flat(self):
        """All entries, states first, as one vector."""
        return np.concatenate([self.dx.ravel(), self.du.ravel()])

    def max_abs_diff(self, other):
        return float(max(np.abs(self.dx - other.dx).max(initial=0.0),
                         np.abs(self.du - other.du).max(initial=0.0)))


@dataclass
class QBarHat:
    """Augmented-system backward artifacts, stacked over stages."""
    Qu: np.ndarray      # (N, n_u)
    Quy: np.ndarray     # (N, n_u, n_y)
    Quu: np.ndarray     # (N, n_u, n_u)
    Qy: np.ndarray      # (N, n_y)
    Qyy: np.ndarray     # (N, n_y, n_y)
    Kbar: np.ndarray    # (N, n_u, n_y)
    Vy: np.ndarray      # (N+1, n_y)
    Vyy: np.ndarray     # (N+1, n_y, n_y)
    Fy: np.ndarray      # (N, n_y, n_y)
    Fu: np.ndarray      # (N, n_y, n_u)
    lam: np.ndarray     # (N, n_in) duals used in the expansion
    nu: np.ndarray      # (N, n_eq)
    n_theta: int

    @property
    def Qux(self):
        return self.Quy[:, :, self.n_theta:]

    @property
    def Qutheta(self):
        return self.Quy[:, :, :self.n_theta]


class AugmentedProblem:
    """Derivatives of the augmented system assembled from those of ``p``."""

    def __init__(self, p):
        self.p = p
        self.n_theta, self.n_x, self.n_u = p.n_theta, p.n_x, p.n_u
        self.n_y = p.n_y

    def dynamics_jacobians(self, d):
        """(Fy, Fu) with Fy = [[I, 0], [f_theta, f_x]] and Fu = [0; f_u]."""
        nt, ny = self.n_theta, self.n_y
        Fy = np.zeros((ny, ny))
        Fy[:nt, :nt] = np.eye(nt)
        Fy[nt:] = d.f_y
        Fu = np.zeros((ny, self.n_u))
        Fu[nt:] = d.f_u
        return Fy, Fu

    def step(self, y, u, k):
        nt = self.n_theta
        return np.concatenate([y[:nt], self.p.step(y[nt:], u, k, y[:nt])])

    def terminal_seed(self, term):
        return term.c_y.copy(), _sym(term.c_yy)


@lru_cache(maxsize=None)
def _augmented(p):
    return AugmentedProblem(p)


def build_augmented(p):
    if isinstance(p, AugmentedProblem):
        return p
    return _augmented(p)


def _sym(a):
    return 0.5 * (a + a.T)


def _problem(aug_or_p):
    return aug_or_p.p if isinstance(aug_or_p, AugmentedProblem) else aug_or_p


def eliminated_duals(p, vals, mu):
    """lam = -mu / g and nu = h / mu from stacked stage values."""
    g, h = vals[:, p._rows["g"]], vals[:, p._rows["h"]]
    if p.n_in and np.any(g >= 0):
        raise ValueError("eliminated duals need g < 0 along the trajectory")
    lam = -mu / g if p.n_in else np.zeros((len(vals), 0))
    nu = h / mu if p.n_eq else np.zeros((len(vals), 0))
    return lam, nu


def _lagrangian_blocks(d, Vy, Vyy, Fy, Fu, lam, nu, nt):
    """Blocks of c + lam^T g + nu^T h + V(ybar+) over (y, u)."""
    VF = Vyy @ Fy
    Qy = d.c_y + Fy.T @ Vy
    Qu = d.c_u + Fu.T @ Vy
    vx = Vy[nt:]          # the parameter rows of ybar+ have no curvature
    Qyy = d.c_yy + Fy.T @ VF + contract(vx, d.f_yy)
    Quy = d.c_uy + Fu.T @ VF + contract(vx, d.f_uy)
    Quu = d.c_uu + Fu.T @ Vyy @ Fu + contract(vx, d.f_uu)
    if lam.size:
        Qy = Qy + d.g_y.T @ lam
        Qu = Qu + d.g_u.T @ lam
        Qyy = Qyy + contract(lam, d.g_yy)
        Quy = Quy + contract(lam, d.g_uy)
        Quu = Quu + contract(lam, d.g_uu)
    if nu.size:
        Qy = Qy + d.h_y.T @ nu
        Qu = Qu + d.h_u.T @ nu
        Qyy = Qyy + contract(nu, d.h_yy)
        Quy = Quy + contract(nu, d.h_uy)
        Quu = Quu + contract(nu, d.h_uu)
    return Qy, Qu, Qyy, Quy, Quu


def _alloc(N, nu, ny, n_in, n_eq, nt):
    return QBarHat(np.zeros((N, nu)), np.zeros((N, nu, ny)), np.zeros((N, nu, nu)),
                   np.zeros((N, ny)), np.zeros((N, ny, ny)), np.zeros((N, nu, ny)),
                   np.zeros((N + 1, ny)), np.zeros((N + 1, ny, ny)),
                   np.zeros((N, ny, ny)), np.zeros((N, ny, nu)),
                   np.zeros((N, n_in)), np.zeros((N, n_eq)), nt)


def gradient_backward_ip(aug, t, theta, mu, derivs=None):
    """Backward sweep on the augmented system with duals eliminated.

    With lam = -mu/g and nu = h/mu the condensed blocks are
      Qu  = c_u + fbar_u^T Vy+ - mu g_u^T (1/g) + h_u^T h / mu
      Quy = c_uy + fbar_u^T Vyy+ fbar_y + Vy+ . fbar_uy
            + mu g_u^T diag(1/g^2) g_y - mu (1/g) . g_uy + h_u^T h_y / mu + (h/mu) . h_uy
    and Quu, Qy, Qyy alike.  ``t`` must be the converged solution at ``mu``.
    """
    aug = build_augmented(aug)
    p = aug.p
    theta = np.asarray(theta, float)
    batch, term = derivs if derivs is not None else p.second_derivatives(t, theta)
    N, nt, ny, nu_ = t.N, p.n_theta, p.n_y, p.n_u
    if p.has_constraints and not mu > 0:
        raise ValueError("interior-point gradient needs mu > 0")
    lam_all, nu_all = eliminated_duals(p, batch.val, mu) if p.has_constraints else (
        np.zeros((N, 0)), np.zeros((N, 0)))
    out = _alloc(N, nu_, ny, p.n_in, p.n_eq, nt)
    out.lam, out.nu = lam_all, nu_all
    Vy, Vyy = aug.terminal_seed(term)
    out.Vy[N], out.Vyy[N] = Vy, Vyy
    for k in range(N - 1, -1, -1):
        d = batch[k]
        Fy, Fu = aug.dynamics_jacobians(d)
        lam, nu = lam_all[k], nu_all[k]
        Qy, Qu, Qyy, Quy, Quu = _lagrangian_blocks(d, Vy, Vyy, Fy, Fu, lam, nu, nt)
        if lam.size:
            s = lam / d.g                      # = -mu / g^2
            gy, gu = d.g_y, d.g_u
            Qyy = Qyy - gy.T @ (s[:, None] * gy)
            Quy = Quy - gu.T @ (s[:, None] * gy)
            Quu = Quu - gu.T @ (s[:, None] * gu)
        if nu.size:
            hy, hu = d.h_y, d.h_u
            Qyy = Qyy + hy.T @ hy / mu
            Quy = Quy + hu.T @ hy / mu
            Quu = Quu + hu.T @ hu / mu
        Quu = _sym(Quu)
        Kbar = _solve_uu(Quu, Quy, k)
        Vy = Qy + Kbar.T @ Qu
        Vyy = _sym(Qyy + Quy.T @ Kbar)
        out.Qu[k], out.Quy[k], out.Quu[k], out.Qy[k], out.Qyy[k] = Qu, Quy, Quu, Qy, Qyy
        out.Kbar[k], out.Fy[k], out.Fu[k] = Kbar, Fy, Fu
        out.Vy[k], out.Vyy[k] = Vy, Vyy
    return out


def _solve_uu(Quu, rhs, stage):
    try:
        lu = sla.lu_factor(Quu, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SingularMatrixError(f"Quu not invertible at stage {stage}: {e}") from None
    piv = np.abs(np.diag(lu[0]))
    if piv.min() <= 1e-13 * max(1.0, np.abs(Quu).max()):
        raise SingularMatrixError(f"Quu singular at stage {stage}", float(piv.min()))
    return -sla.lu_solve(lu, rhs)


def gradient_forward(qbar, aug, t=None):
    """Propagate dy_{k+1} = Fy dy_k + Fu du_k with du_k = Kbar_k dy_k, dy_0 = [I; 0]."""
    aug = build_augmented(aug)
    nt, nx = aug.n_theta, aug.n_x
    N = qbar.Kbar.shape[0]
    dy = np.zeros((aug.n_y, nt))
    dy[:nt] = np.eye(nt)
    dx = np.zeros((N + 1, nx, nt))
    du = np.zeros((N, aug.n_u, nt))
    eye = np.eye(nt)
    for k in range(N):
        du[k] = qbar.Kbar[k] @ dy
        dy = qbar.Fy[k] @ dy + qbar.Fu[k] @ du[k]
        if not np.array_equal(dy[:nt], eye):
            raise AssertionError("parameter block of the augmented state changed")
        dx[k + 1] = dy[nt:]
    return TrajectoryGradient(dx, du)


def gradient_unconstrained(p, t, theta):
    """Gradient with all constraints ignored."""
    q = _problem(p).without_constraints()
    return gradient_forward(gradient_backward_ip(q, t, theta, 0.0), q)


def gradient_ip(p, t, theta, mu):
    """Interior-point flavor: backward + forward at the solve's perturbation."""
    p = _problem(p)
    if not p.has_constraints:
        return gradient_unconstrained(p, t, theta)
    return gradient_forward(gradient_backward_ip(p, t, theta, mu), p)


# --------------------------------------------------------------------------
# barrier flavor

_BARRIER = {}


def barrier_problem(p, mu):
    """Unconstrained problem with cost c - mu sum log(-g) + |h|^2 / (2 mu)."""
    key = (id(p), float(mu))
    hit = _BARRIER.get(key)
    if hit is not None and hit[0] is p:
        return hit[1]

    def cost(x, u, k, th):
        c = p.stage_cost(x, u, k, th)
        if p.n_in:
            c = c - mu * jnp.sum(jnp.log(-p.ineq(x, u, k, th)))
        if p.n_eq:
            h = p.eq(x, u, k, th)
            c = c + h @ h / (2 * mu)
        return c

    q = OCProblem(p.n_x, p.n_u, p.n_theta, p.N, cost, p.terminal_cost, p.dynamics,
                  name=p.name + "_barrier", theta_names=p.theta_names)
    _BARRIER[key] = (p, q)
    return q


def gradient_barrier(p, t, theta, mu):
    p = _problem(p)
    if not p.has_constraints:
        return gradient_unconstrained(p, t, theta)
    if p.n_in:
        g = p.values(t, theta)[:, p._rows["g"]]
        if np.any(g >= 0):
            raise ValueError("barrier gradient needs a strictly interior trajectory")
    q = barrier_problem(p, mu)
    if q.N != t.N:
        q = q.with_horizon(t.N)
    return gradient_forward(gradient_backward_ip(q, t, theta, 0.0), q)


# --------------------------------------------------------------------------
# active-set flavor

def active_rows_y(d, active_k, p):
    """Active constraint values and y/u Jacobians and Hessians (h first, then g)."""
    vals, Jy, Ju, Hyy, Huy, Huu = [], [], [], [], [], []
    if p.n_eq:
        vals.append(d.h); Jy.append(d.h_y); Ju.append(d.h_u)
        Hyy.append(d.h_yy); Huy.append(d.h_uy); Huu.append(d.h_uu)
    if p.n_in and np.any(active_k):
        a = active_k
        vals.append(d.g[a]); Jy.append(d.g_y[a]); Ju.append(d.g_u[a])
        Hyy.append(d.g_yy[a]); Huy.append(d.g_uy[a]); Huu.append(d.g_uu[a])
    ny, nu = p.n_y, p.n_u
    if not vals:
        return (np.zeros(0), np.zeros((0, ny)), np.zeros((0, nu)), np.zeros((0, ny, ny)),
                np.zeros((0, nu, ny)), np.zeros((0, nu, nu)))
    c = np.concatenate
    return c(vals), c(Jy), c(Ju), c(Hyy), c(Huy), c(Huu)


def gradient_backward_activeset(aug, t, theta, active, derivs=None):
    """Backward sweep with the active rows as equality constraints.

    Per stage the KKT system
        [[Quu, A_u^T], [A_u, 0]] [Kbar; Omega] = -[Quy; A_y]
    is solved, with Q the Lagrangian blocks including the multiplier
    curvature of the active rows.
    """
    aug = build_augmented(aug)
    p = aug.p
    theta = np.asarray(theta, float)
    batch, term = derivs if derivs is not None else p.second_derivatives(t, theta)
    N, nt, ny, nu_ = t.N, p.n_theta, p.n_y, p.n_u
    active = np.zeros((N, p.n_in), bool) if active is None else np.asarray(active, bool)
    lam_all = np.where(active, t.duals_in, 0.0) if p.n_in else np.zeros((N, 0))
    nu_all = t.duals_eq if p.n_eq else np.zeros((N, 0))
    out = _alloc(N, nu_, ny, p.n_in, p.n_eq, nt)
    out.lam, out.nu = lam_all, nu_all
    Vy, Vyy = aug.terminal_seed(term)
    out.Vy[N], out.Vyy[N] = Vy, Vyy
    for k in range(N - 1, -1, -1):
        d = batch[k]
        Fy, Fu = aug.dynamics_jacobians(d)
        Qy, Qu, Qyy, Quy, Quu = _lagrangian_blocks(d, Vy, Vyy, Fy, Fu, lam_all[k],
                                                   nu_all[k], nt)
        a, A_y, A_u = active_rows_y(d, active[k] if p.n_in else None, p)[:3]
        Quu = _sym(Quu)
        try:
            Kbar = kkt_stage(np.zeros(nu_), Quy, Quu, A_u, A_y, np.zeros(len(a)),
                             stage=k)[1]
        except _NotPositiveDefinite:
            raise SingularMatrixError(f"reduced Quu not positive definite at stage {k}") \
                from None
        Vy = Qy + Kbar.T @ Qu
        Vyy = _sym(Qyy + Kbar.T @ Quu @ Kbar + Kbar.T @ Quy + Quy.T @ Kbar)
        out.Qu[k], out.Quy[k], out.Quu[k], out.Qy[k], out.Qyy[k] = Qu, Quy, Quu, Qy, Qyy
        out.Kbar[k], out.Fy[k], out.Fu[k] = Kbar, Fy, Fu
        out.Vy[k], out.Vyy[k] = Vy, Vyy
    return out


def gradient_activeset(p, t, theta, active):
    """Active-set flavor; ``t`` and ``active`` come from ``solve_active_set``."""
    p = _problem(p)
    return gradient_forward(gradient_backward_activeset(p, t, theta, active), p)


# --------------------------------------------------------------------------
# dense oracle

def pdp_oracle_gradient(p, t, theta, mu=None, active=None):
    """Differentiate the whole-trajectory stationarity system and solve it densely.

    Unknowns are u_0..u_{N-1}, x_1..x_N, costates p_1..p_N and the duals.  The
    equations are the dynamics, u- and x-stationarity of the Lagrangian, the
    terminal costate condition and either the perturbed complementarity
    ``lam * g + mu = 0`` and ``h - mu nu = 0`` (``mu`` given) or the active
    rows ``g_a = 0``, ``h = 0`` with inactive duals fixed at zero (``active``
    given).  Without constraints only the first four groups remain.
    """
    p = _problem(p)
    theta = np.asarray(theta, float)
    batch, term = p.second_derivatives(t, theta)
    N, nx, nu_, nt, ni, ne = t.N, p.n_x, p.n_u, p.n_theta, p.n_in, p.n_eq
    cols = p._cols
    X, U, TH = cols["x"], cols["u"], cols["theta"]
    if active is not None:
        active = np.asarray(active, bool)
        lam_all = np.where(active, t.duals_in, 0.0) if ni else np.zeros((N, 0))
        nu_all = t.duals_eq if ne else np.zeros((N, 0))
        mode = "active"
    elif p.has_constraints:
        if mu is None:
            raise ValueError("pdp oracle on a constrained problem needs mu or active")
        lam_all, nu_all = eliminated_duals(p, batch.val, mu)
        mode = "ip"
    else:
        lam_all, nu_all = np.zeros((N, 0)), np.zeros((N, 0))
        mode = "free"
        ni = ne = 0

    # costates from the adjoint recursion
    costate = np.zeros((N + 1, nx))
    costate[N] = term.c_x
    for k in range(N - 1, 0, -1):
        d = batch[k]
        lx = d.c_x + d.f_x.T @ costate[k + 1]
        if ni:
            lx = lx + d.g_x.T @ lam_all[k]
        if ne:
            lx = lx + d.h_x.T @ nu_all[k]
        costate[k] = lx

    # unknown offsets
    o_u = 0
    o_x = o_u + N * nu_
    o_p = o_x + N * nx
    o_l = o_p + N * nx
    o_n = o_l + N * ni
    n_w = o_n + N * ne
    iu = lambda k: slice(o_u + k * nu_, o_u + (k + 1) * nu_)
    ix = lambda k: slice(o_x + (k - 1) * nx, o_x + k * nx)       # k = 1..N
    ip = lambda k: slice(o_p + (k - 1) * nx, o_p + k * nx)       # k = 1..N
    il = lambda k: slice(o_l + k * ni, o_l + (k + 1) * ni)
    iv = lambda k: slice(o_n + k * ne, o_n + (k + 1) * ne)

    A = np.zeros((n_w, n_w))
    Bt = np.zeros((n_w, nt))
    r = 0
    for k in range(N):
        d = batch[k]
        pk1 = costate[k + 1]
        hess = d.hess
        L = hess[0] + np.tensordot(pk1, hess[p._rows["f"]], axes=(0, 0))
        if ni:
            L = L + np.tensordot(lam_all[k], hess[p._rows["g"]], axes=(0, 0))
        if ne:
            L = L + np.tensordot(nu_all[k], hess[p._rows["h"]], axes=(0, 0))
        jf = d.jac[p._rows["f"]]
        jg = d.jac[p._rows["g"]] if ni else None
        jh = d.jac[p._rows["h"]] if ne else None
        # dynamics: x_{k+1} - f = 0
        rows = slice(r, r + nx)
        A[rows, ix(k + 1)] = np.eye(nx)
        A[rows, iu(k)] = -jf[:, U]
        if k:
            A[rows, ix(k)] = -jf[:, X]
        Bt[rows] = -jf[:, TH]
        r += nx
        # u-stationarity
        rows = slice(r, r + nu_)
        A[rows, iu(k)] = L[U, U]
        if k:
            A[rows, ix(k)] = L[U, X]
        A[rows, ip(k + 1)] = jf[:, U].T
        if ni:
            A[rows, il(k)] = jg[:, U].T
        if ne:
            A[rows, iv(k)] = jh[:, U].T
        Bt[rows] = L[U, TH]
        r += nu_
        # x-stationarity for k >= 1
        if k:
            rows = slice(r, r + nx)
            A[rows, ix(k)] = L[X, X]
            A[rows, iu(k)] = L[X, U]
            A[rows, ip(k + 1)] = jf[:, X].T
            A[rows, ip(k)] = -np.eye(nx)
            if ni:
                A[rows, il(k)] = jg[:, X].T
            if ne:
                A[rows, iv(k)] = jh[:, X].T
            Bt[rows] = L[X, TH]
            r += nx
        # inequality rows
        if ni:
            rows = slice(r, r + ni)
            if mode == "ip":
                lam = lam_all[k]
                A[rows, il(k)] = np.diag(d.g)
                A[rows, iu(k)] = lam[:, None] * jg[:, U]
                if k:
                    A[rows, ix(k)] = lam[:, None] * jg[:, X]
                Bt[rows] = lam[:, None] * jg[:, TH]
            else:
                act = active[k]
                blk = np.zeros((ni, ni))
                blk[~act, ~act] = 1.0
                A[rows, il(k)] = blk
                A[rows, iu(k)] = np.where(act[:, None], jg[:, U], 0.0)
                if k:
                    A[rows, ix(k)] = np.where(act[:, None], jg[:, X], 0.0)
                Bt[rows] = np.where(act[:, None], jg[:, TH], 0.0)
            r += ni
        if ne:
            rows = slice(r, r + ne)
            A[rows, iu(k)] = jh[:, U]
            if k:
                A[rows, ix(k)] = jh[:, X]
            if mode == "ip":
                A[rows, iv(k)] = -mu * np.eye(ne)
            Bt[rows] = jh[:, TH]
            r += ne
    # terminal costate condition: c_f,x - p_N = 0
    rows = slice(r, r + nx)
    A[rows, ix(N)] = term.c_xx
    A[rows, ip(N)] = -np.eye(nx)
    Bt[rows] = term.second("x", "theta")
    r += nx
    if r != n_w:
        raise AssertionError(f"oracle system has {r} rows for {n_w} unknowns")
    try:
        lu = sla.lu_factor(A)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SingularMatrixError(f"stacked stationarity system singular: {e}") from None
    piv = np.abs(np.diag(lu[0]))
    if piv.min() <= n_w * np.finfo(float).eps * np.abs(A).max():
        raise SingularMatrixError("stacked stationarity system singular", float(piv.min()))
    sol = -sla.lu_solve(lu, Bt)
    dx = np.zeros((N + 1, nx, nt))
    du = np.zeros((N, nu_, nt))
    for k in range(N):
        du[k] = sol[iu(k)]
        dx[k + 1] = sol[ix(k + 1)]
    return TrajectoryGradient(dx, du)


def trajectory_gradient(p, t, theta, flavor, mu=None, active=None):
    """Dispatch by flavor name: ip, barrier, active-set, unconstrained, pdp-oracle."""
    if flavor == "ip":
        return gradient_ip(p, t, theta, mu)
    if flavor == "barrier":
        return gradient_barrier(p, t, theta, mu)
    if flavor == "active-set":
        return gradient_activeset(p, t, theta, active)
    if flavor == "unconstrained":
        return gradient_unconstrained(p, t, theta)
    if flavor == "pdp-oracle":
        return pdp_oracle_gradient(p, t, theta, mu=mu, active=active)
    raise ValueError(f"unknown gradient flavor {flavor!r}")
