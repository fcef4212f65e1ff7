"""Constrained inverse optimal control with linearly parameterized costs.

When the stage cost is theta^T phi(x, u) and dynamics, constraints and the
terminal cost do not depend on theta, the condensed stationarity conditions
along an interior demonstration solved at barrier weight mu are linear in
theta and in one unknown costate.  For observed stages k = 0..m

    r_k  = phi_u,k^T theta + f_u,k^T V_{k+1} + c_u,k
    V_k  = phi_x,k^T theta + f_x,k^T V_{k+1} + c_x,k      (k = 1..m)
    c_a  = -mu g_a^T (1/g) + h_a^T h / mu

where phi_a,k^T is the mixed block d c_a / d theta and V_{m+1} is unknown.
Eliminating V_1..V_m by back-substitution gives

    r = J1 theta + J2 V_{m+1} + J3,

and theta follows from linear least squares on [J1, J2].
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .solver import IpddpConfig, solve_ipddp


@dataclass
class FeatureDemo:
    """Per-stage data along a demonstration, stages 0..m."""
    mu: float
    phi_x: np.ndarray      # (m+1, n_x, n_theta)  d c_x / d theta
    phi_u: np.ndarray      # (m+1, n_u, n_theta)
    c_x: np.ndarray        # (m+1, n_x)
    c_u: np.ndarray        # (m+1, n_u)
    f_x: np.ndarray        # (m+1, n_x, n_x)
    f_u: np.ndarray        # (m+1, n_x, n_u)

    @property
    def m(self):
        return len(self.c_u) - 1


@dataclass
class RecoverySystem:
    J1: np.ndarray
    J2: np.ndarray
    J3: np.ndarray
    mu: float

    @property
    def J12(self):
        return np.hstack([self.J1, self.J2])


def _check_assumptions(p, batch, theta, tol=1e-10):
    cols, rows = p._cols, p._rows
    scale = max(1.0, np.abs(batch.jac).max())
    for name in ("f", "g", "h"):
        blk = batch.jac[:, rows[name], cols["theta"]]
        if blk.size and np.abs(blk).max() > tol * scale:
            raise ValueError(f"{name} depends on theta; the linear recovery needs it known")
    # c linear in theta: gradient equals its theta-derivative applied to theta
    for a in ("x", "u"):
        ca = batch.jac[:, 0, cols[a]]
        mixed = batch.hess[:, 0, cols[a], cols["theta"]]
        if np.abs(ca - mixed @ theta).max() > tol * scale:
            raise ValueError("stage cost is not linear in theta")


def build_feature_demo(p, traj, mu, m=None):
    """Collect features, constraint terms and dynamics Jacobians on stages 0..m."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    m = traj.N - 1 if m is None else int(m)
    if m < 0 or m >= traj.N:
        raise ValueError(f"observation length {m + 1} outside 1..{traj.N}")
    theta = np.ones(p.n_theta)          # any value; the blocks used do not depend on it
    batch, _ = p.second_derivatives(traj, theta)
    _check_assumptions(p, batch, theta)
    cols, rows = p._cols, p._rows
    ks = slice(0, m + 1)
    X, U, T = cols["x"], cols["u"], cols["theta"]
    c_x = np.zeros((m + 1, p.n_x))
    c_u = np.zeros((m + 1, p.n_u))
    if p.n_in:
        g = batch.val[ks, rows["g"]]
        if np.any(g >= 0):
            raise ValueError("demonstration must be strictly interior (g < 0)")
        w = -mu / g
        c_x += np.einsum("ki,kix->kx", w, batch.jac[ks, rows["g"], X])
        c_u += np.einsum("ki,kiu->ku", w, batch.jac[ks, rows["g"], U])
    if p.n_eq:
        h = batch.val[ks, rows["h"]]
        c_x += np.einsum("ki,kix->kx", h, batch.jac[ks, rows["h"], X]) / mu
        c_u += np.einsum("ki,kiu->ku", h, batch.jac[ks, rows["h"], U]) / mu
    return FeatureDemo(mu, batch.hess[ks, 0, X, T], batch.hess[ks, 0, U, T], c_x, c_u,
                       batch.jac[ks, rows["f"], X], batch.jac[ks, rows["f"], U])


def costate_map(demo):
    """Back-substitution V = A^-1 (rhs): returns the maps
    V_{k} = P_k theta + Q_k V_{m+1} + s_k for k = 1..m+1, as arrays over k."""
    m, nx, nt = demo.m, demo.f_x.shape[1], demo.phi_x.shape[2]
    P = np.zeros((m + 2, nx, nt))
    Q = np.zeros((m + 2, nx, nx))
    s = np.zeros((m + 2, nx))
    Q[m + 1] = np.eye(nx)
    for k in range(m, 0, -1):
        fxT = demo.f_x[k].T
        P[k] = demo.phi_x[k] + fxT @ P[k + 1]
        Q[k] = fxT @ Q[k + 1]
        s[k] = demo.c_x[k] + fxT @ s[k + 1]
    return P, Q, s


def transport_matrix(demo):
    """Dense unit upper block-bidiagonal A with rows V_k - f_x,k^T V_{k+1} (k=1..m)
    and V_{m+1} on the last block row."""
    m, nx = demo.m, demo.f_x.shape[1]
    A = np.eye((m + 1) * nx)
    for i, k in enumerate(range(1, m + 1)):
        A[i * nx:(i + 1) * nx, (i + 1) * nx:(i + 2) * nx] = -demo.f_x[k].T
    return A


def build_recovery_system(demo, p=None, mu=None, m=None):
    """Assemble r = J1 theta + J2 V_{m+1} + J3.

    ``demo`` is a FeatureDemo, or a Trajectory together with the problem ``p``
    and the barrier weight ``mu``.
    """
    if not isinstance(demo, FeatureDemo):
        if p is None or mu is None:
            raise ValueError("a raw trajectory needs the problem and mu")
        demo = build_feature_demo(p, demo, mu, m)
    P, Q, s = costate_map(demo)
    m = demo.m
    J1 = np.concatenate([demo.phi_u[k] + demo.f_u[k].T @ P[k + 1] for k in range(m + 1)])
    J2 = np.concatenate([demo.f_u[k].T @ Q[k + 1] for k in range(m + 1)])
    J3 = np.concatenate([demo.c_u[k] + demo.f_u[k].T @ s[k + 1] for k in range(m + 1)])
    for a in (J1, J2, J3):
        if not np.all(np.isfinite(a)):
            raise ValueError("recovery blocks are not finite")
    return RecoverySystem(J1, J2, J3, demo.mu)


def build_recovery_system_dense(demo):
    """Same blocks through the dense transport matrix (reference route)."""
    m, nx, nu, nt = demo.m, demo.f_x.shape[1], demo.f_u.shape[2], demo.phi_x.shape[2]
    A = transport_matrix(demo)
    Phi_x = np.zeros(((m + 1) * nx, nt))
    C_x = np.zeros((m + 1) * nx)
    for i, k in enumerate(range(1, m + 1)):
        Phi_x[i * nx:(i + 1) * nx] = demo.phi_x[k]
        C_x[i * nx:(i + 1) * nx] = demo.c_x[k]
    E = np.zeros(((m + 1) * nx, nx))
    E[-nx:] = np.eye(nx)
    B = sla.block_diag(*[demo.f_u[k].T for k in range(m + 1)])     # rows k pick V_{k+1}
    Ainv = np.linalg.inv(A)
    J1 = np.concatenate([demo.phi_u[k] for k in range(m + 1)]) + B @ Ainv @ Phi_x
    J2 = B @ Ainv @ E
    J3 = np.concatenate([demo.c_u[k] for k in range(m + 1)]) + B @ Ainv @ C_x
    return RecoverySystem(J1, J2, J3, demo.mu)


@dataclass
class Recovery:
    theta: np.ndarray
    v_tail: np.ndarray
    rank: int
    residual_norm: float
    full_rank: bool
    sigma: np.ndarray

    def to_json(self):
        return {"theta_hat": self.theta.tolist(), "v_tail": self.v_tail.tolist(),
                "rank": self.rank, "residual": self.residual_norm,
                "full_rank": self.full_rank, "sigma": self.sigma.tolist()}


class DegenerateRecoveryError(ValueError):
    """Constant term is zero: only the homogeneous system remains."""


def recover_parameters(rs, n_theta, n_x, rank_scale=1e-12):
    """Least squares for [theta; V_{m+1}] by SVD; minimum norm when rank deficient."""
    if not np.any(rs.J3):
        raise DegenerateRecoveryError(
            "constant term is identically zero (no active constraints); "
            "parameters are only determined up to scale")
    A = rs.J12
    if A.shape[1] != n_theta + n_x:
        raise ValueError("block widths do not match n_theta + n_x")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = (s.max(initial=0.0)) * max(A.shape) * rank_scale
    rank = int(np.sum(s > tol))
    coef = (U[:, :rank].T @ -rs.J3) / s[:rank]
    sol = Vt[:rank].T @ coef
    res = float(np.linalg.norm(A @ sol + rs.J3))
    return Recovery(sol[:n_theta], sol[n_theta:], rank, res, rank == n_theta + n_x, s)


def generate_ioc_demo(p, theta_star, x0, mu, cfg=None):
    """Interior demonstration solved with the barrier weight held at ``mu``."""
    base = cfg or IpddpConfig(tol=1e-12)
    c = IpddpConfig(**{**base.__dict__, "mu_floor": mu, "mu_init": mu})
    return solve_ipddp(p, theta_star, x0, c).traj


def rank_profile(p, demos_by_mu, lengths, theta_star):
    """Rows (length, mu, rank, parameter residual) over a grid.

    ``demos_by_mu`` maps each barrier weight to the demonstration solved at it.
    """
    theta_star = np.asarray(theta_star, float)
    rows = []
    for mu, traj in demos_by_mu.items():
        full = build_feature_demo(p, traj, mu)
        for L in lengths:
            sub = FeatureDemo(mu, *(a[:L] for a in (full.phi_x, full.phi_u, full.c_x,
                                                     full.c_u, full.f_x, full.f_u)))
            rec = recover_parameters(build_recovery_system(sub), p.n_theta, p.n_x)
            d = rec.theta - theta_star
            rows.append({"length": int(L), "mu": float(mu), "rank": rec.rank,
                         "residual": float(d @ d), "full_rank": rec.full_rank})
    return rows
