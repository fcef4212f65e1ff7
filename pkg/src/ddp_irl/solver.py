"""DDP trajectory solvers.

``solve_ipddp`` is a primal-dual interior-point DDP handling inequality and
equality constraints.  For a perturbation ``mu`` it drives the residual

    [Q_u; r_in; r_eq],   r_in = lam * g + mu,   r_eq = nu - h / mu

to zero, where ``Q_u`` is evaluated with the adjoint (costate) recursion along
the current trajectory.  ``mu`` is then shrunk geometrically down to a floor.

``solve_active_set`` treats the active inequalities as equalities and solves
the equality-constrained problem with a KKT backward pass; ``solve_unconstrained``
is plain DDP on the costs and dynamics alone.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .linalg import cholesky_or_none, contract
from .problem import DivergenceError, Trajectory, initial_duals, rollout

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Base class for trajectory-solver failures."""


class InfeasiblePointError(SolverError):
    """An interior-point routine met g >= 0."""

    def __init__(self, stage, message=None):
        super().__init__(message or f"inequality not strictly satisfied at stage {stage}")
        self.stage = stage


class RegularizationError(SolverError):
    def __init__(self, stage):
        super().__init__(f"regularization cap exceeded at stage {stage}")
        self.stage = stage


class LineSearchError(SolverError):
    pass


class MaxIterationsError(SolverError):
    pass


class BoundaryViolation(SolverError):
    """Candidate step violates the fraction-to-boundary rule."""

    def __init__(self, stage):
        super().__init__(f"fraction-to-boundary violated at stage {stage}")
        self.stage = stage


class KKTSingularError(SolverError):
    def __init__(self, stage, message=None):
        super().__init__(message or f"KKT system singular at stage {stage}")
        self.stage = stage


class ActiveSetCyclingError(SolverError):
    pass


class _NotPositiveDefinite(Exception):
    def __init__(self, stage):
        self.stage = stage


@dataclass
class IpddpConfig:
    mu_init: float = None        # None: 0.1 * initial merit, clipped to [mu_floor, 1]
    mu_shrink: float = 0.2
    mu_kappa: float = 0.2        # shrink mu once merit < mu_kappa * mu
    mu_floor: float = 1e-8
    tol: float = 1e-9
    max_iters: int = 500
    reg_init: float = 1e-6
    reg_scale: float = 10.0
    reg_max: float = 1e6
    ftb_tau: float = 0.995
    ls_backtrack: float = 0.5
    ls_max_steps: int = 10
    dual_floor: float = 1e-3
    act_tol: float = 1e-6        # active-set activation tolerance
    act_rounds: int = 20
    act_init_mu: float = 1e-6    # perturbation of the interior-point warm start

    def __post_init__(self):
        if not 0 < self.mu_shrink < 1 or not 0 < self.ftb_tau < 1:
            raise ValueError("mu_shrink and ftb_tau must lie in (0, 1)")
        if self.mu_floor <= 0 or self.tol <= 0:
            raise ValueError("mu_floor and tol must be positive")
        if self.mu_init is not None and self.mu_init < self.mu_floor:
            raise ValueError("mu_init must not be below mu_floor")


@dataclass
class GainSet:
    k: np.ndarray          # (N, n_u)
    K: np.ndarray          # (N, n_u, n_x)
    k_in: np.ndarray       # (N, n_in)
    K_in: np.ndarray       # (N, n_in, n_x)
    k_eq: np.ndarray       # (N, n_eq)
    K_eq: np.ndarray       # (N, n_eq, n_x)


@dataclass
class ValueExpansion:
    Vx: np.ndarray         # (N+1, n_x)
    Vxx: np.ndarray        # (N+1, n_x, n_x)


@dataclass
class QBlocks:
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Qux: np.ndarray
    Quu: np.ndarray


@dataclass
class SolveResult:
    """Solution plus the final backward-pass artifacts.

    Unpacks as ``traj, value, gains, mu = result``.
    """
    traj: Trajectory
    value: ValueExpansion
    gains: GainSet
    mu: float
    merit: float
    iterations: int
    log: list = field(default_factory=list)
    qhat: list = field(default_factory=list)     # QBlocks per stage
    active: np.ndarray = None                    # active-set mask (N, n_in)

    def __iter__(self):
        return iter((self.traj, self.value, self.gains, self.mu))


# --------------------------------------------------------------------------
# stage-level pieces

def q_expansion(d, Vx, Vxx, lam=None, nu=None):
    """Second-order expansion of Q = c + lam^T g + nu^T h + V(f)."""
    fx, fu = d.f_x, d.f_u
    VxxFx = Vxx @ fx
    Qx = d.c_x + fx.T @ Vx
    Qu = d.c_u + fu.T @ Vx
    Qxx = d.c_xx + fx.T @ VxxFx + contract(Vx, d.f_xx)
    Qux = d.c_ux + fu.T @ VxxFx + contract(Vx, d.f_ux)
    Quu = d.c_uu + fu.T @ Vxx @ fu + contract(Vx, d.f_uu)
    if lam is not None and lam.size:
        Qx = Qx + d.g_x.T @ lam
        Qu = Qu + d.g_u.T @ lam
        Qxx = Qxx + contract(lam, d.g_xx)
        Qux = Qux + contract(lam, d.g_ux)
        Quu = Quu + contract(lam, d.g_uu)
    if nu is not None and nu.size:
        Qx = Qx + d.h_x.T @ nu
        Qu = Qu + d.h_u.T @ nu
        Qxx = Qxx + contract(nu, d.h_xx)
        Qux = Qux + contract(nu, d.h_ux)
        Quu = Quu + contract(nu, d.h_uu)
    return QBlocks(Qx, Qu, Qxx, Qux, Quu)


def hatq(Q, g, g_x, g_u, lam, h, h_x, h_u, nu, mu, stage=None):
    """Condense the dual directions out of the Q expansion.

    Returns Q-hat blocks with
      Qh_u  = Q_u  - g_u^T diag(g)^-1 r_in - h_u^T r_eq
      Qh_ux = Q_ux - g_u^T diag(lam/g) g_x + h_u^T h_x / mu
      Qh_uu = Q_uu - g_u^T diag(lam/g) g_u + h_u^T h_u / mu
    and the same with u replaced by x.
    """
    Qx, Qu, Qxx, Qux, Quu = Q.Qx, Q.Qu, Q.Qxx, Q.Qux, Q.Quu
    if g.size:
        if np.any(g >= 0):
            raise InfeasiblePointError(stage)
        r_in = lam * g + mu
        s = lam / g
        w = r_in / g
        Qx = Qx - g_x.T @ w
        Qu = Qu - g_u.T @ w
        Qxx = Qxx - g_x.T @ (s[:, None] * g_x)
        Qux = Qux - g_u.T @ (s[:, None] * g_x)
        Quu = Quu - g_u.T @ (s[:, None] * g_u)
    if h.size:
        r_eq = nu - h / mu
        Qx = Qx - h_x.T @ r_eq
        Qu = Qu - h_u.T @ r_eq
        Qxx = Qxx + h_x.T @ h_x / mu
        Qux = Qux + h_u.T @ h_x / mu
        Quu = Quu + h_u.T @ h_u / mu
    return QBlocks(Qx, Qu, Qxx, Qux, Quu)


def _sym(a):
    return 0.5 * (a + a.T)


def backward_pass(p, t, theta, mu, reg, derivs=None):
    """One interior-point backward sweep.

    Returns ``(GainSet, ValueExpansion, [QBlocks-hat per stage])``.  Raises
    ``_NotPositiveDefinite`` when ``Qh_uu + reg I`` is not positive definite.
    """
    batch, term = derivs if derivs is not None else p.second_derivatives(t, theta)
    N, nx, nu_, ni, ne = t.N, p.n_x, p.n_u, p.n_in, p.n_eq
    k_ff = np.zeros((N, nu_))
    K_fb = np.zeros((N, nu_, nx))
    k_in = np.zeros((N, ni))
    K_in = np.zeros((N, ni, nx))
    k_eq = np.zeros((N, ne))
    K_eq = np.zeros((N, ne, nx))
    Vx_all = np.zeros((N + 1, nx))
    Vxx_all = np.zeros((N + 1, nx, nx))
    Vx, Vxx = term.c_x.copy(), _sym(term.c_xx)
    Vx_all[N], Vxx_all[N] = Vx, Vxx
    qhat = [None] * N
    eye = np.eye(nu_)
    for k in range(N - 1, -1, -1):
        d = batch[k]
        lam, nu = t.duals_in[k], t.duals_eq[k]
        Q = q_expansion(d, Vx, Vxx, lam, nu)
        g, h = d.g, d.h
        H = hatq(Q, g, d.g_x if ni else None, d.g_u if ni else None, lam,
                 h, d.h_x if ne else None, d.h_u if ne else None, nu, mu, stage=k)
        Quu = _sym(H.Quu)
        chol = cholesky_or_none(Quu + reg * eye)
        if chol is None:
            raise _NotPositiveDefinite(k)
        kk = -sla.cho_solve(chol, H.Qu)
        KK = -sla.cho_solve(chol, H.Qux)
        if ni:
            r_in = lam * g + mu
            k_in[k] = -(r_in + lam * (d.g_u @ kk)) / g
            K_in[k] = -(lam / g)[:, None] * (d.g_x + d.g_u @ KK)
        if ne:
            k_eq[k] = -(nu - h / mu) + d.h_u @ kk / mu
            K_eq[k] = (d.h_x + d.h_u @ KK) / mu
        Vx = H.Qx + KK.T @ Quu @ kk + KK.T @ H.Qu + H.Qux.T @ kk
        Vxx = _sym(H.Qxx + KK.T @ Quu @ KK + KK.T @ H.Qux + H.Qux.T @ KK)
        k_ff[k], K_fb[k] = kk, KK
        Vx_all[k], Vxx_all[k] = Vx, Vxx
        qhat[k] = H
    return (GainSet(k_ff, K_fb, k_in, K_in, k_eq, K_eq),
            ValueExpansion(Vx_all, Vxx_all), qhat)


def _residuals(p, t, theta, mu, first=None):
    """Stacked [Q_u; r_in; r_eq] per stage using the adjoint recursion."""
    batch, term = first if first is not None else p.first_derivatives(t, theta)
    N = t.N
    lam_all, nu_all = t.duals_in, t.duals_eq
    costate = term.c_x
    out = []
    for k in range(N - 1, -1, -1):
        d = batch[k]
        lam, nu = lam_all[k], nu_all[k]
        Qu = d.c_u + d.f_u.T @ costate
        Qx = d.c_x + d.f_x.T @ costate
        parts = [Qu]
        if lam.size:
            Qu += d.g_u.T @ lam
            Qx += d.g_x.T @ lam
            parts.append(lam * d.g + mu)
        if nu.size:
            Qu += d.h_u.T @ nu
            Qx += d.h_x.T @ nu
            parts.append(nu - d.h / mu)
        out.append(np.concatenate(parts))
        costate = Qx
    return out[::-1]


def merit(p, t, theta, mu, first=None):
    """Euclidean norm of the stacked stationarity / perturbed complementarity /
    perturbed equality residuals over all stages."""
    res = _residuals(p, t, theta, mu, first)
    if not res:
        return 0.0
    return float(np.linalg.norm(np.concatenate(res)))


def barrier_objective(p, first, mu):
    """cost - mu sum log(-g) + |h|^2 / (2 mu) from first-derivative values."""
    batch, term = first
    phi = float(batch.val[:, 0].sum() + term.val)
    if p.n_in:
        phi -= mu * float(np.log(-batch.val[:, p._rows["g"]]).sum())
    if p.n_eq:
        phi += float((batch.val[:, p._rows["h"]] ** 2).sum()) / (2 * mu)
    return phi


def _filter_accepts(filt, phi, m):
    """Acceptable when no stored (phi, merit) pair dominates the candidate."""
    return all(phi < fp or m < fm for fp, fm in filt)


def forward_pass(p, t, gains, theta, alpha, ftb_tau=0.995, g_now=None):
    """Candidate trajectory ``u = u + alpha k + K dx`` with duals updated the
    same way.  Raises ``BoundaryViolation`` when the fraction-to-boundary rule
    fails for g or for the inequality duals."""
    x0 = t.states[0]
    xs, us = p.rollout_feedback(x0, t, gains.k, gains.K, alpha, theta)
    dx = xs[:-1] - t.states[:-1]
    cand = Trajectory(xs, us)
    if p.n_in:
        lam = t.duals_in + alpha * gains.k_in + np.einsum("kij,kj->ki", gains.K_in, dx)
        vals = p.values(cand, theta)
        g_new = vals[:, p._rows["g"]]
        if g_now is None:
            g_now = p.values(t, theta)[:, p._rows["g"]]
        bad = (g_new > (1 - ftb_tau) * g_now) | (lam < (1 - ftb_tau) * t.duals_in)
        if np.any(bad):
            raise BoundaryViolation(int(np.argmax(np.any(bad, axis=1))))
        cand.duals_in = lam
    else:
        cand.duals_in = np.zeros((t.N, 0))
    if p.n_eq:
        cand.duals_eq = (t.duals_eq + alpha * gains.k_eq
                         + np.einsum("kij,kj->ki", gains.K_eq, dx))
    else:
        cand.duals_eq = np.zeros((t.N, 0))
    return cand


# --------------------------------------------------------------------------
# interior-point solve

def _g_values(p, t, theta):
    return p.values(t, theta)[:, p._rows["g"]]


def solve_ipddp(p, theta, x0, cfg=None, warm_start=None):
    """Interior-point DDP.  Returns a ``SolveResult`` (unpackable as
    ``traj, value, gains, mu``)."""
    cfg = cfg or IpddpConfig()
    theta = np.asarray(theta, float)
    x0 = np.asarray(x0, float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    N = p.N
    if warm_start is not None:
        t = rollout(p, x0, warm_start.controls, theta)
    else:
        t = rollout(p, x0, np.zeros((N, p.n_u)), theta)
    constrained = p.has_constraints
    g_now = None
    if p.n_in:
        g_now = _g_values(p, t, theta)
        if np.any(g_now >= 0):
            raise InfeasiblePointError(int(np.argmax(np.any(g_now >= 0, axis=1))),
                                       "initial trajectory is not strictly feasible")

    def init_duals(mu):
        if p.n_in:
            if (warm_start is not None and warm_start.duals_in.shape == t.duals_in.shape
                    and np.all(warm_start.duals_in > 0)):
                t.duals_in = warm_start.duals_in.copy()
            else:
                t.duals_in = initial_duals(g_now, mu, cfg.dual_floor)
        if p.n_eq:
            if warm_start is not None and warm_start.duals_eq.shape == t.duals_eq.shape:
                t.duals_eq = warm_start.duals_eq.copy()
            else:
                t.duals_eq = np.zeros((N, p.n_eq))

    if not constrained:
        mu = cfg.mu_floor
    elif cfg.mu_init is not None:
        mu = cfg.mu_init
    else:
        init_duals(1.0)
        m0 = merit(p, t, theta, 1.0)
        mu = float(np.clip(0.1 * m0, cfg.mu_floor, 1.0))
    init_duals(mu)

    first = p.first_derivatives(t, theta)
    m = merit(p, t, theta, mu, first)
    filt = [(barrier_objective(p, first, mu), m)]
    reg = 0.0
    history = []
    art = None
    it = 0
    while True:
        if constrained and m < cfg.mu_kappa * mu and mu > cfg.mu_floor:
            mu = max(mu * cfg.mu_shrink, cfg.mu_floor)
            m = merit(p, t, theta, mu, first)
            filt = [(barrier_objective(p, first, mu), m)]
            continue
        if m < cfg.tol and (mu <= cfg.mu_floor or not constrained):
            break
        if it >= cfg.max_iters:
            raise MaxIterationsError(
                f"{p.name}: no convergence in {cfg.max_iters} iterations "
                f"(merit {m:.3e}, mu {mu:.1e})")
        it += 1
        derivs = p.second_derivatives(t, theta)
        accepted = False
        while not accepted:
            try:
                gains, value, qh = backward_pass(p, t, theta, mu, reg, derivs)
            except _NotPositiveDefinite as e:
                reg = max(reg * cfg.reg_scale, cfg.reg_init)
                if reg > cfg.reg_max:
                    raise RegularizationError(e.stage) from None
                continue
            alpha = 1.0
            for _ in range(cfg.ls_max_steps + 1):
                try:
                    cand = forward_pass(p, t, gains, theta, alpha, cfg.ftb_tau, g_now)
                except (BoundaryViolation, DivergenceError):
                    alpha *= cfg.ls_backtrack
                    continue
                cfirst = p.first_derivatives(cand, theta)
                mc = merit(p, cand, theta, mu, cfirst)
                phic = barrier_objective(p, cfirst, mu)
                if _filter_accepts(filt, phic, mc):
                    accepted = True
                    break
                alpha *= cfg.ls_backtrack
            if not accepted:
                reg = max(reg * cfg.reg_scale, cfg.reg_init)
                if reg > cfg.reg_max:
                    raise LineSearchError(
                        f"{p.name}: line search failed (merit {m:.3e}, mu {mu:.1e})")
        t, first, m = cand, cfirst, mc
        filt.append((phic, mc))
        if p.n_in:
            g_now = _g_values(p, t, theta)
        history.append({"iteration": it, "mu": mu, "merit": m,
                        "cost": float(first[0].val[:, 0].sum() + first[1].val),
                        "alpha": alpha, "reg": reg})
        reg = reg / cfg.reg_scale
        if reg < cfg.reg_init:
            reg = 0.0
    # artifacts at the returned point
    art = _final_artifacts(p, t, theta, mu, cfg)
    gains, value, qh = art
    return SolveResult(t, value, gains, mu, m, it, history, qh)


def _final_artifacts(p, t, theta, mu, cfg):
    reg = 0.0
    derivs = p.second_derivatives(t, theta)
    while True:
        try:
            return backward_pass(p, t, theta, mu, reg, derivs)
        except _NotPositiveDefinite as e:
            reg = max(reg * cfg.reg_scale, cfg.reg_init)
            if reg > cfg.reg_max:
                raise RegularizationError(e.stage) from None


def solve_unconstrained(p, theta, x0, cfg=None, warm_start=None):
    """Plain DDP on the costs and dynamics of ``p`` (constraints ignored)."""
    q = p.without_constraints()
    ws = None
    if warm_start is not None:
        ws = Trajectory(warm_start.states, warm_start.controls)
    return solve_ipddp(q, theta, x0, cfg, ws)


# --------------------------------------------------------------------------
# active-set solve

def _active_rows(d, active_k):
    """Stack h and the active rows of g: values, x- and u-Jacobians, Hessians."""
    parts_v, parts_x, parts_u, parts_xx, parts_ux, parts_uu = [], [], [], [], [], []
    if d.p.n_eq:
        parts_v.append(d.h)
        parts_x.append(d.h_x)
        parts_u.append(d.h_u)
        parts_xx.append(d.h_xx)
        parts_ux.append(d.h_ux)
        parts_uu.append(d.h_uu)
    if d.p.n_in and np.any(active_k):
        parts_v.append(d.g[active_k])
        parts_x.append(d.g_x[active_k])
        parts_u.append(d.g_u[active_k])
        if d.hess is not None:
            parts_xx.append(d.g_xx[active_k])
            parts_ux.append(d.g_ux[active_k])
            parts_uu.append(d.g_uu[active_k])
    nx, nu = d.p.n_x, d.p.n_u
    if not parts_v:
        return (np.zeros(0), np.zeros((0, nx)), np.zeros((0, nu)),
                np.zeros((0, nx, nx)), np.zeros((0, nu, nx)), np.zeros((0, nu, nu)))
    cat = np.concatenate
    if d.hess is None:
        return cat(parts_v), cat(parts_x), cat(parts_u), None, None, None
    return (cat(parts_v), cat(parts_x), cat(parts_u), cat(parts_xx), cat(parts_ux),
            cat(parts_uu))


def _active_multipliers(t, active, k):
    parts = []
    if t.duals_eq.shape[1]:
        parts.append(t.duals_eq[k])
    if t.duals_in.shape[1]:
        parts.append(t.duals_in[k][active[k]])
    return np.concatenate(parts) if parts else np.zeros(0)


def _scatter_multipliers(p, active_k, nu_all):
    ne = p.n_eq
    eq = nu_all[:ne]
    ineq = np.zeros(p.n_in)
    ineq[active_k] = nu_all[ne:]
    return ineq, eq


def kkt_stage(G_u, G_ux, H_uu, A_u, A_x, a, reg=0.0, stage=None):
    """Solve [[H_uu + reg I, A_u^T], [A_u, 0]] [k K; kappa Omega] = -[[G_u G_ux]; [a A_x]].

    Returns (k, K, kappa, Omega).  Raises ``KKTSingularError`` when A_u lacks
    full row rank and ``_NotPositiveDefinite`` when the Hessian is not positive
    definite on the null space of A_u.
    """
    nu_, na = H_uu.shape[0], A_u.shape[0]
    H = _sym(H_uu) + reg * np.eye(nu_)
    if na == 0:
        chol = cholesky_or_none(H)
        if chol is None:
            raise _NotPositiveDefinite(stage)
        return (-sla.cho_solve(chol, G_u), -sla.cho_solve(chol, G_ux),
                np.zeros(0), np.zeros((0, G_ux.shape[1])))
    sv = np.linalg.svd(A_u, compute_uv=False)
    if na > nu_ or sv.min() <= 1e-10 * max(1.0, sv.max()):
        raise KKTSingularError(stage, f"active constraint Jacobian w.r.t. u is rank "
                                      f"deficient at stage {stage}")
    Z = sla.null_space(A_u)
    if Z.shape[1] and cholesky_or_none(_sym(Z.T @ H @ Z)) is None:
        raise _NotPositiveDefinite(stage)
    M = np.block([[H, A_u.T], [A_u, np.zeros((na, na))]])
    rhs = -np.block([[G_u[:, None], G_ux], [a[:, None], A_x]])
    sol = np.linalg.solve(M, rhs)
    return sol[:nu_, 0], sol[:nu_, 1:], sol[nu_:, 0], sol[nu_:, 1:]


def _eq_backward(p, t, theta, active, reg, derivs):
    batch, term = derivs
    N, nx, nu_ = t.N, p.n_x, p.n_u
    k_ff = np.zeros((N, nu_))
    K_fb = np.zeros((N, nu_, nx))
    kappa, Omega = [None] * N, [None] * N
    Vx, Vxx = term.c_x.copy(), _sym(term.c_xx)
    Vx_all = np.zeros((N + 1, nx))
    Vxx_all = np.zeros((N + 1, nx, nx))
    Vx_all[N], Vxx_all[N] = Vx, Vxx
    for k in range(N - 1, -1, -1):
        d = batch[k]
        a, A_x, A_u, A_xx, A_ux, A_uu = _active_rows(d, active[k] if p.n_in else None)
        nu_k = _active_multipliers(t, active, k)
        Q = q_expansion(d, Vx, Vxx)
        G_xx, G_ux, G_uu = Q.Qxx, Q.Qux, Q.Quu
        if a.size:
            G_xx = G_xx + contract(nu_k, A_xx)
            G_ux = G_ux + contract(nu_k, A_ux)
            G_uu = G_uu + contract(nu_k, A_uu)
        kk, KK, kap, Om = kkt_stage(Q.Qu, G_ux, G_uu, A_u, A_x, a, reg, stage=k)
        Vx = Q.Qx + KK.T @ G_uu @ kk + KK.T @ Q.Qu + G_ux.T @ kk
        Vxx = _sym(G_xx + KK.T @ G_uu @ KK + KK.T @ G_ux + G_ux.T @ KK)
        k_ff[k], K_fb[k], kappa[k], Omega[k] = kk, KK, kap, Om
        Vx_all[k], Vxx_all[k] = Vx, Vxx
    return k_ff, K_fb, kappa, Omega, ValueExpansion(Vx_all, Vxx_all)


def _eq_residuals(p, t, theta, active, first=None):
    batch, term = first if first is not None else p.first_derivatives(t, theta)
    costate = term.c_x
    out = []
    for k in range(t.N - 1, -1, -1):
        d = batch[k]
        a, A_x, A_u = _active_rows(d, active[k] if p.n_in else None)[:3]
        nu_k = _active_multipliers(t, active, k)
        Qu = d.c_u + d.f_u.T @ costate
        Qx = d.c_x + d.f_x.T @ costate
        if a.size:
            Qu = Qu + A_u.T @ nu_k
            Qx = Qx + A_x.T @ nu_k
        out.append(np.concatenate([Qu, a]))
        costate = Qx
    return np.concatenate(out[::-1]) if out else np.zeros(0)


def _eq_forward(p, t, theta, active, k_ff, K_fb, kappa, Omega, alpha):
    xs, us = p.rollout_feedback(t.states[0], t, k_ff, K_fb, alpha, theta)
    dx = xs[:-1] - t.states[:-1]
    cand = Trajectory(xs, us, np.zeros_like(t.duals_in), np.zeros_like(t.duals_eq))
    for k in range(t.N):
        if kappa[k].size == 0:
            continue
        old = _active_multipliers(t, active, k)
        new = old + alpha * (kappa[k] - old) + Omega[k] @ dx[k]
        cand.duals_in[k], cand.duals_eq[k] = _scatter_multipliers(
            p, active[k] if p.n_in else np.zeros(0, bool), new)
    return cand


def _solve_fixed_active(p, theta, t, active, cfg):
    first = p.first_derivatives(t, theta)
    m = float(np.linalg.norm(_eq_residuals(p, t, theta, active, first)))
    reg = 0.0
    it = 0
    while m >= cfg.tol:
        if it >= cfg.max_iters:
            raise MaxIterationsError(f"{p.name}: active-set inner loop did not converge "
                                     f"(merit {m:.3e})")
        it += 1
        derivs = p.second_derivatives(t, theta)
        accepted = False
        while not accepted:
            try:
                k_ff, K_fb, kappa, Omega, value = _eq_backward(p, t, theta, active, reg,
                                                               derivs)
            except _NotPositiveDefinite as e:
                reg = max(reg * cfg.reg_scale, cfg.reg_init)
                if reg > cfg.reg_max:
                    raise RegularizationError(e.stage) from None
                continue
            alpha = 1.0
            for _ in range(cfg.ls_max_steps + 1):
                try:
                    cand = _eq_forward(p, t, theta, active, k_ff, K_fb, kappa, Omega,
                                       alpha)
                except DivergenceError:
                    alpha *= cfg.ls_backtrack
                    continue
                cfirst = p.first_derivatives(cand, theta)
                mc = float(np.linalg.norm(_eq_residuals(p, cand, theta, active, cfirst)))
                if mc < m:
                    accepted = True
                    break
                alpha *= cfg.ls_backtrack
            if not accepted:
                reg = max(reg * cfg.reg_scale, cfg.reg_init)
                if reg > cfg.reg_max:
                    raise LineSearchError(f"{p.name}: active-set line search failed "
                                          f"(merit {m:.3e})")
        t, first, m = cand, cfirst, mc
        reg = reg / cfg.reg_scale
        if reg < cfg.reg_init:
            reg = 0.0
    return t, m, it


def solve_active_set(p, theta, x0, cfg=None, warm_start=None):
    """Active-set DDP.

    Starts from ``warm_start`` or from an interior-point solution at
    perturbation ``cfg.act_init_mu``; inequality rows are active when their
    dual exceeds their slack there.  The equality-constrained problem with the
    active rows is solved by a KKT backward pass; rows are then added when
    violated (``g > act_tol``) and dropped when their multiplier is negative
    beyond ``10 act_tol``, until the set is stable.
    """
    cfg = cfg or IpddpConfig()
    theta = np.asarray(theta, float)
    N = p.N
    if warm_start is None:
        if p.n_in:
            ip_cfg = replace(cfg, mu_floor=cfg.act_init_mu,
                             tol=max(cfg.tol, 0.1 * cfg.act_init_mu))
            init = solve_ipddp(p, theta, x0, ip_cfg)
        else:
            init = solve_ipddp(p, theta, x0, cfg)
        t = init.traj.copy()
    else:
        t = rollout(p, x0, warm_start.controls, theta)
        t.duals_in = np.maximum(warm_start.duals_in, 0) if p.n_in else t.duals_in
        t.duals_eq = warm_start.duals_eq.copy() if p.n_eq else t.duals_eq
    if p.n_in:
        g = _g_values(p, t, theta)
        active = (t.duals_in > -g) | (g > -cfg.act_tol)
        t.duals_in = np.where(active, t.duals_in, 0.0)
    else:
        active = np.zeros((N, 0), bool)
    total = 0
    for _ in range(cfg.act_rounds):
        t, m, its = _solve_fixed_active(p, theta, t, active, cfg)
        total += its
        if not p.n_in:
            break
        g = _g_values(p, t, theta)
        scale = 1.0 + np.abs(g).max()
        add = (~active) & (g > cfg.act_tol * scale)
        drop = active & (t.duals_in < -10 * cfg.act_tol * scale)
        if not (add.any() or drop.any()):
            break
        active = (active | add) & ~drop
        t.duals_in = np.where(active, t.duals_in, 0.0)
    else:
        raise ActiveSetCyclingError(f"{p.name}: active set still changing after "
                                    f"{cfg.act_rounds} rounds")
    derivs = p.second_derivatives(t, theta)
    reg = 0.0
    while True:
        try:
            k_ff, K_fb, kappa, Omega, value = _eq_backward(p, t, theta, active, reg, derivs)
            break
        except _NotPositiveDefinite as e:
            reg = max(reg * cfg.reg_scale, cfg.reg_init)
            if reg > cfg.reg_max:
                raise RegularizationError(e.stage) from None
    gains = GainSet(k_ff, K_fb, np.zeros((N, p.n_in)), np.zeros((N, p.n_in, p.n_x)),
                    np.zeros((N, p.n_eq)), np.zeros((N, p.n_eq, p.n_x)))
    return SolveResult(t, value, gains, 0.0, m, total, [], [], active)
