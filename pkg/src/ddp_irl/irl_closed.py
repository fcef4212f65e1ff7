"""Closed-loop inverse reinforcement learning.

Demonstrations are produced by running the optimal feedback policy on the true
system with process noise,

    u**_k = u*_k + K*_k (x**_k - x*_k).

For a candidate theta the trajectory solver gives the condensed blocks
(Qu, Qux, Quu) along its solution and the residual of a demonstrated stage is

    r_k = Qu + Qux (x**_k - x_k) + Quu (u**_k - u_k),

which vanishes at theta* for any noise realization.  The loss is the plain sum
of squared residual norms.  Its Jacobian needs the total derivatives of Qux and
Quu with respect to theta; these come from a tangent (forward-mode) sweep of
the backward recursion along the solution path, fed by the trajectory
derivative and the third-order directional derivatives of the problem data.
Parameters are updated by Levenberg-Marquardt with gain-ratio damping control.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .benchmarks import noisy_feedback_rollout, parameter_residual
from .gradient import (build_augmented, gradient_backward_ip, gradient_forward,
                       QBarHat, TrajectoryGradient)
from .linalg import dvec, kron, SingularMatrixError
from .solver import IpddpConfig, solve_ipddp, solve_unconstrained

log = logging.getLogger(__name__)


@dataclass
class NoiseModel:
    """x+ = f(x, u) * (1 + sigma * eps) + additive[k+1]."""
    sigma: float = 0.0
    additive: np.ndarray = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass
class ClosedLoopDemo:
    indices: np.ndarray          # sampled stages, sorted, each < N
    states: np.ndarray           # (N+1, n_x) observed x**
    controls: np.ndarray         # (N, n_u) executed u**
    nominal: object              # Trajectory solved at theta*
    gains: np.ndarray            # (N, n_u, n_x) K*
    theta_star: np.ndarray = None
    seed: int = None
    sigma: float = 0.0
    additive: np.ndarray = None

    @property
    def x0(self):
        return self.states[0]

    def with_indices(self, indices):
        idx = np.unique(np.asarray(indices, int))
        if idx.size == 0 or idx.min() < 0 or idx.max() >= len(self.controls):
            raise ValueError("sample indices must be nonempty and within 0..N-1")
        return ClosedLoopDemo(idx, self.states, self.controls, self.nominal, self.gains,
                              self.theta_star, self.seed, self.sigma, self.additive)

    def to_json(self):
        return {"indices": self.indices.tolist(), "states": self.states.tolist(),
                "controls": self.controls.tolist(),
                "nominal_states": self.nominal.states.tolist(),
                "nominal_controls": self.nominal.controls.tolist(),
                "gains": self.gains.tolist(),
                "theta_star": None if self.theta_star is None else self.theta_star.tolist(),
                "seed": self.seed, "sigma": self.sigma}


def _solve(p, theta, x0, solver, cfg):
    if solver == "ipddp":
        return solve_ipddp(p, theta, x0, cfg)
    if solver == "unconstrained":
        return solve_unconstrained(p, theta, x0, cfg)
    raise ValueError(f"closed-loop learning supports solvers 'ipddp' and 'unconstrained', "
                     f"not {solver!r}")


def generate_closed_loop_demo(p, theta_star, x0, noise=None, seed=None, indices=None,
                              solver="ipddp", cfg=None):
    """Solve at theta*, then run the recorded feedback policy with noise."""
    noise = noise or NoiseModel()
    theta_star = np.asarray(theta_star, float)
    res = _solve(p, theta_star, x0, solver, cfg)
    traj = res.traj
    K = res.gains.K
    obs = noisy_feedback_rollout(p, theta_star, traj, K, noise.sigma, seed,
                                 additive=noise.additive)
    idx = np.arange(p.N) if indices is None else np.asarray(indices, int)
    demo = ClosedLoopDemo(np.arange(p.N), obs.states, obs.controls, traj.copy(), K.copy(),
                          theta_star, seed, noise.sigma, noise.additive)
    return demo.with_indices(idx)


# --------------------------------------------------------------------------
# second-order sweep

@dataclass
class SecondOrderBundle:
    """Total theta-derivatives of the backward artifacts, one tangent per parameter.

    Arrays are indexed (stage, parameter, ...).  ``dvec_*`` give the
    (rows*cols, n_theta) matrices whose column j is vec of the j-th tangent.
    """
    dQu: np.ndarray      # (N, P, n_u)
    dQux: np.ndarray     # (N, P, n_u, n_x)
    dQuu: np.ndarray     # (N, P, n_u, n_u)
    dK: np.ndarray       # (N, P, n_u, n_x)
    dVx: np.ndarray      # (N+1, P, n_x)
    dVxx: np.ndarray     # (N+1, P, n_x, n_x)

    def dvec_Quu(self, k):
        return dvec(self.dQuu[k])

    def dvec_Qux(self, k):
        return dvec(self.dQux[k])


def _tangents(grad):
    """Stage tangents of z = [theta, x, u] and of the terminal [theta, x]."""
    N, nx, P = grad.dx.shape[0] - 1, grad.dx.shape[1], grad.dx.shape[2]
    eye = np.broadcast_to(np.eye(P), (N, P, P))
    dZ = np.concatenate([eye, grad.dx[:-1].transpose(0, 2, 1),
                         grad.du.transpose(0, 2, 1)], axis=2)
    dzf = np.concatenate([np.eye(P), grad.dx[-1].T], axis=1)
    return dZ, dzf


def second_order_backward(p, t, theta, mu, grad, qbar=None):
    """Tangent sweep of the condensed backward recursion.

    For each parameter direction j the stage point moves along
    zdot = (e_j, dx_k/dtheta_j, du_k/dtheta_j) and the duals follow their
    closed forms lam = -mu/g and nu = h/mu.  Differentiating

      Qa  = c_a + f_a^T Vx+ + g_a^T lam + h_a^T nu
      Qab = c_ab + f_a^T Vxx+ f_b + Vx+ . f_ab + lam . g_ab + nu . h_ab
            - g_a^T diag(lam/g) g_b + h_a^T h_b / mu
      K   = -Quu^-1 Qux,   Vx = Qx + K^T Qu,   Vxx = Qxx + Qux^T K

    by the product rule gives the bundle.  Products with the dynamics Hessian
    are always taken as contractions with Vx+, never expanded.
    """
    theta = np.asarray(theta, float)
    ni, ne = p.n_in, p.n_eq
    if not p.has_constraints:
        mu = 1.0
    batch, term = p.second_derivatives(t, theta)
    dZ, dzf = _tangents(grad)
    (djac, dhess), (tdg, tdh) = p.third_directional(t, theta, dZ, dzf)
    N, P, nx, nu_ = t.N, p.n_theta, p.n_x, p.n_u
    X, U = p._cols["x"], p._cols["u"]
    F, G, H = p._rows["f"], p._rows["g"], p._rows["h"]
    Xt = slice(P, P + nx)      # x block in the terminal layout

    out = SecondOrderBundle(np.zeros((N, P, nu_)), np.zeros((N, P, nu_, nx)),
                            np.zeros((N, P, nu_, nu_)), np.zeros((N, P, nu_, nx)),
                            np.zeros((N + 1, P, nx)), np.zeros((N + 1, P, nx, nx)))
    Vx, Vxx = term.c_x.copy(), term.c_xx.copy()
    dVx, dVxx = tdg[:, Xt].copy(), tdh[:, Xt, Xt].copy()
    out.dVx[N], out.dVxx[N] = dVx, dVxx
    for k in range(N - 1, -1, -1):
        J, Hs, dJ, dH = batch.jac[k], batch.hess[k], djac[k], dhess[k]
        zd = dZ[k]
        blocks = {"x": X, "u": U}

        def jac(rows, a):
            return J[rows, blocks[a]]

        def djac_(rows, a):
            return dJ[:, rows, blocks[a]]

        def hes(rows, a, b):
            return Hs[rows, blocks[a], blocks[b]]

        def dhes(rows, a, b):
            return dH[:, rows, blocks[a], blocks[b]]

        if ni:
            g = batch.val[k, G]
            gdot = zd @ J[G].T                       # (P, n_in)
            lam = -mu / g
            lamdot = mu * gdot / g ** 2
            Dg = lam / g
            Dgdot = 2 * mu * gdot / g ** 3
        if ne:
            h = batch.val[k, H]
            hdot = zd @ J[H].T
            nu = h / mu
            nudot = hdot / mu

        def q1(a):
            """Qa and its tangents (P, dim a)."""
            fa, dfa = jac(F, a), djac_(F, a)
            q = J[0, blocks[a]] + fa.T @ Vx
            dq = dJ[:, 0, blocks[a]] + np.einsum("pia,i->pa", dfa, Vx) + dVx @ fa
            if ni:
                ga, dga = jac(G, a), djac_(G, a)
                q = q + ga.T @ lam
                dq = dq + np.einsum("pia,i->pa", dga, lam) + lamdot @ ga
            if ne:
                ha, dha = jac(H, a), djac_(H, a)
                q = q + ha.T @ nu
                dq = dq + np.einsum("pia,i->pa", dha, nu) + nudot @ ha
            return q, dq

        def q2(a, b):
            """Qab and its tangents (P, dim a, dim b)."""
            fa, fb = jac(F, a), jac(F, b)
            dfa, dfb = djac_(F, a), djac_(F, b)
            q = Hs[0, blocks[a], blocks[b]] + fa.T @ Vxx @ fb + np.tensordot(
                Vx, hes(F, a, b), axes=(0, 0))
            dq = (dH[:, 0, blocks[a], blocks[b]]
                  + np.einsum("pia,ij,jb->pab", dfa, Vxx, fb)
                  + np.einsum("ia,pij,jb->pab", fa, dVxx, fb)
                  + np.einsum("ia,ij,pjb->pab", fa, Vxx, dfb)
                  + np.einsum("pi,iab->pab", dVx, hes(F, a, b))
                  + np.einsum("i,piab->pab", Vx, dhes(F, a, b)))
            if ni:
                ga, gb, dga, dgb = jac(G, a), jac(G, b), djac_(G, a), djac_(G, b)
                q = q + np.tensordot(lam, hes(G, a, b), axes=(0, 0)) \
                    - ga.T @ (Dg[:, None] * gb)
                dq = (dq + np.einsum("pi,iab->pab", lamdot, hes(G, a, b))
                      + np.einsum("i,piab->pab", lam, dhes(G, a, b))
                      - np.einsum("pia,i,ib->pab", dga, Dg, gb)
                      - np.einsum("ia,pi,ib->pab", ga, Dgdot, gb)
                      - np.einsum("ia,i,pib->pab", ga, Dg, dgb))
            if ne:
                ha, hb, dha, dhb = jac(H, a), jac(H, b), djac_(H, a), djac_(H, b)
                q = q + np.tensordot(nu, hes(H, a, b), axes=(0, 0)) + ha.T @ hb / mu
                dq = (dq + np.einsum("pi,iab->pab", nudot, hes(H, a, b))
                      + np.einsum("i,piab->pab", nu, dhes(H, a, b))
                      + (np.einsum("pia,ib->pab", dha, hb)
                         + np.einsum("ia,pib->pab", ha, dhb)) / mu)
            return q, dq

        Qx, dQx = q1("x")
        Qu, dQu = q1("u")
        Qxx, dQxx = q2("x", "x")
        Qux, dQux = q2("u", "x")
        Quu, dQuu = q2("u", "u")
        Quu = 0.5 * (Quu + Quu.T)
        dQuu = 0.5 * (dQuu + dQuu.transpose(0, 2, 1))
        dQxx = 0.5 * (dQxx + dQxx.transpose(0, 2, 1))
        lu = sla.lu_factor(Quu)
        K = -sla.lu_solve(lu, Qux)
        rhs = dQux + np.einsum("pab,bx->pax", dQuu, K)
        dK = -np.stack([sla.lu_solve(lu, rhs[j]) for j in range(P)]) if P else rhs
        dVx_new = dQx + np.einsum("pux,u->px", dK, Qu) + dQu @ K
        dVxx_new = (dQxx + np.einsum("pux,uy->pxy", dQux, K)
                    + np.einsum("ux,puy->pxy", Qux, dK))
        dVxx_new = 0.5 * (dVxx_new + dVxx_new.transpose(0, 2, 1))
        Vx = Qx + K.T @ Qu
        Vxx = Qxx + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
        dVx, dVxx = dVx_new, dVxx_new
        out.dQu[k], out.dQux[k], out.dQuu[k], out.dK[k] = dQu, dQux, dQuu, dK
        out.dVx[k], out.dVxx[k] = dVx, dVxx
    return out


def gain_derivative(qbar, bundle, k):
    """d vec(K_k)/dtheta = -(I (x) Quu^-1) [(K^T (x) I) d vec(Quu) + d vec(Qux)]."""
    Quu, Qux = qbar.Quu[k], qbar.Qux[k]
    n_u, n_x = Qux.shape
    K = -np.linalg.solve(Quu, Qux)
    Minv = np.linalg.inv(Quu)
    return -kron(np.eye(n_x), Minv) @ (kron(K.T, np.eye(n_u)) @ bundle.dvec_Quu(k)
                                       + bundle.dvec_Qux(k))


# --------------------------------------------------------------------------
# residuals and Jacobian

@dataclass
class ResidualSystem:
    r: np.ndarray          # (rows,)
    J: np.ndarray          # (rows, n_theta)

    @property
    def loss(self):
        return float(self.r @ self.r)


def closed_loop_residual(qbar, demo, t, k):
    """r_k = Qu + Qux (x**_k - x_k) + Quu (u**_k - u_k)."""
    if k not in set(demo.indices.tolist()):
        raise KeyError(f"stage {k} is not in the demonstration sample set")
    dx = demo.states[k] - t.states[k]
    du = demo.controls[k] - t.controls[k]
    return qbar.Qu[k] + qbar.Qux[k] @ dx + qbar.Quu[k] @ du


def assemble_jacobian(bundle, qbar, grad, demo, t):
    """Stack r_k and the rows Qutheta + [dx^T (x) I] dvec Qux + [du^T (x) I] dvec Quu."""
    rs, Js = [], []
    n_u = qbar.Quu.shape[1]
    eye = np.eye(n_u)
    for k in demo.indices:
        dx = demo.states[k] - t.states[k]
        du = demo.controls[k] - t.controls[k]
        rs.append(closed_loop_residual(qbar, demo, t, int(k)))
        row = (qbar.Qutheta[k] + kron(dx[None, :], eye) @ bundle.dvec_Qux(k)
               + kron(du[None, :], eye) @ bundle.dvec_Quu(k))
        if row.shape[1] != bundle.dQu.shape[1]:
            raise ValueError("Jacobian row has the wrong parameter dimension")
        Js.append(row)
    return ResidualSystem(np.concatenate(rs), np.vstack(Js))


@dataclass
class ClosedLoopEval:
    """Everything computed at one parameter value."""
    theta: np.ndarray
    system: ResidualSystem
    trajs: list
    qbars: list
    open_loop_loss: float
    merit: float


def evaluate(p, theta, demos, solver="ipddp", cfg=None, jacobian=True):
    theta = np.asarray(theta, float)
    rs, Js, trajs, qbars = [], [], [], []
    ol = 0.0
    merit = 0.0
    q = p.without_constraints() if solver == "unconstrained" else p
    for demo in demos:
        res = _solve(p, theta, demo.x0, solver, cfg)
        t, mu = res.traj, res.mu
        merit = max(merit, res.merit)
        qbar = gradient_backward_ip(q, t, theta, mu)
        if jacobian:
            grad = gradient_forward(qbar, q)
            bundle = second_order_backward(q, t, theta, mu, grad, qbar)
            sysk = assemble_jacobian(bundle, qbar, grad, demo, t)
        else:
            r = np.concatenate([closed_loop_residual(qbar, demo, t, int(k))
                                for k in demo.indices])
            sysk = ResidualSystem(r, None)
        rs.append(sysk.r)
        Js.append(sysk.J)
        trajs.append(t)
        qbars.append(qbar)
        ol += float(np.sum((demo.states - t.states) ** 2)
                    + np.sum((demo.controls - t.controls) ** 2))
    J = np.vstack(Js) if jacobian else None
    return ClosedLoopEval(theta, ResidualSystem(np.concatenate(rs), J), trajs, qbars,
                          ol, merit)


def closed_loop_loss(p, theta, demos, solver="ipddp", cfg=None):
    return evaluate(p, theta, demos, solver, cfg, jacobian=False).system.loss


# --------------------------------------------------------------------------
# Levenberg-Marquardt

def lm_update(rs, eta_prime, bounds=None, theta=None):
    """Solve (J^T J + eta' I) delta = J^T r.  With ``theta`` and ``bounds``
    also return the clamped candidate theta - delta."""
    if eta_prime < 0:
        raise ValueError("damping must be non-negative")
    J, r = rs.J, rs.r
    A = J.T @ J + eta_prime * np.eye(J.shape[1])
    b = J.T @ r
    try:
        c = sla.cho_factor(A)
        delta = sla.cho_solve(c, b)
    except np.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(J)
        raise SingularMatrixError(f"damped normal equations singular (rank(J) = {rank})") \
            from None
    if theta is None:
        return delta
    cand = theta - delta
    if bounds is not None:
        cand = np.clip(cand, bounds[0], bounds[1])
    return delta, cand


def rank_diagnostic(rs_or_J, tol_scale=None):
    """Numerical rank with tolerance sigma_max * max(rows, cols) * eps."""
    J = rs_or_J.J if isinstance(rs_or_J, ResidualSystem) else np.asarray(rs_or_J, float)
    if J.size == 0:
        return 0, {"sigma": [], "tol": 0.0, "full_rank": False}
    s = np.linalg.svd(J, compute_uv=False)
    scale = np.finfo(float).eps if tol_scale is None else tol_scale
    tol = s.max(initial=0.0) * max(J.shape) * scale
    rank = int(np.sum(s > tol)) if s.max(initial=0.0) > 0 else 0
    return rank, {"sigma": s.tolist(), "tol": float(tol), "full_rank": rank == J.shape[1]}


@dataclass
class LMConfig:
    theta0: np.ndarray
    theta_lo: np.ndarray = None
    theta_hi: np.ndarray = None
    eta_prime_init: float = None      # None: 1e-3 * mean diag(J^T J)
    t_max: int = 50
    step_tol: float = 1e-12
    loss_tol: float = 1e-24
    solver: str = "ipddp"
    solver_cfg: IpddpConfig = None

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, float)
        if self.theta_lo is not None and np.any(np.asarray(self.theta_lo) >
                                                np.asarray(self.theta_hi)):
            raise ValueError("theta_lo must not exceed theta_hi")
        if self.eta_prime_init is not None and self.eta_prime_init < 0:
            raise ValueError("damping must be non-negative")


@dataclass
class ClosedLoopResult:
    theta: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def losses(self):
        return [row["loss_cl"] for row in self.trace]


def run_closed_loop(p, demos, cfg, theta_star=None):
    """Levenberg-Marquardt on the stacked closed-loop residual."""
    bounds = None
    if cfg.theta_lo is not None:
        bounds = (np.asarray(cfg.theta_lo, float), np.asarray(cfg.theta_hi, float))
    theta = cfg.theta0.copy() if bounds is None else np.clip(cfg.theta0, *bounds)
    cur = evaluate(p, theta, demos, cfg.solver, cfg.solver_cfg)
    eta = cfg.eta_prime_init
    if eta is None:
        eta = 1e-3 * float(np.mean(np.sum(cur.system.J ** 2, axis=0)))
        eta = max(eta, 1e-12)
    result = ClosedLoopResult(theta.copy())

    def record(it, step_norm, accepted):
        rank, _ = rank_diagnostic(cur.system)
        row = {"t": it, "loss_cl": cur.system.loss, "loss_ol": cur.open_loop_loss,
               "eta_prime": eta, "step_norm": step_norm, "rank": rank,
               "accepted": accepted, "theta": cur.theta.copy()}
        if theta_star is not None:
            row["param_residual"] = parameter_residual(cur.theta, theta_star)
        result.trace.append(row)

    record(0, 0.0, True)
    for it in range(1, cfg.t_max + 1):
        if cur.system.loss <= cfg.loss_tol:
            break
        rs = cur.system
        delta, cand = lm_update(rs, eta, bounds, cur.theta)
        s = cur.theta - cand
        if np.linalg.norm(s) <= cfg.step_tol * (1 + np.linalg.norm(cur.theta)):
            break
        pred = rs.loss - float(np.sum((rs.r - rs.J @ s) ** 2))
        try:
            new = evaluate(p, cand, demos, cfg.solver, cfg.solver_cfg)
            actual = rs.loss - new.system.loss
        except Exception as e:           # failed inner solve: treat as a rejected step
            log.debug("inner solve failed at candidate: %s", e)
            new, actual = None, -np.inf
        rho = actual / pred if pred > 0 else -1.0
        if new is not None and rho > 0:
            cur = new
            eta *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            record(it, float(np.linalg.norm(s)), True)
        else:
            eta *= 2.0
            record(it, float(np.linalg.norm(s)), False)
    result.theta = cur.theta.copy()
    result.final = cur
    return result


# --------------------------------------------------------------------------
# LQR form

def _assert_lqr(p, t, theta):
    batch, _ = p.second_derivatives(t, theta)
    F, X, U = p._rows["f"], p._cols["x"], p._cols["u"]
    xu = np.r_[np.arange(p.n_z)[X], np.arange(p.n_z)[U]]
    if p.has_constraints:
        raise ValueError("the LQR residual form needs an unconstrained problem")
    curv = batch.hess[:, F][:, :, xu][:, :, :, xu]
    if np.abs(curv).max(initial=0.0) > 1e-12:
        raise ValueError("the LQR residual form needs linear dynamics")
    ch = batch.hess[:, 0][:, xu][:, :, xu]
    if np.abs(ch - ch[0]).max(initial=0.0) > 1e-12:
        raise ValueError("the LQR residual form needs quadratic stage costs")


def lqr_residual_jacobian(p, demo, theta, cfg=None):
    """r = Qux x** + Quu u** and J = [(x**)^T (x) I] dvec Qux + [(u**)^T (x) I] dvec Quu."""
    theta = np.asarray(theta, float)
    res = solve_ipddp(p, theta, demo.x0, cfg)
    t = res.traj
    _assert_lqr(p, t, theta)
    qbar = gradient_backward_ip(p, t, theta, res.mu)
    grad = gradient_forward(qbar, p)
    bundle = second_order_backward(p, t, theta, res.mu, grad, qbar)
    eye = np.eye(p.n_u)
    rs, Js = [], []
    for k in demo.indices:
        xs, us = demo.states[k], demo.controls[k]
        rs.append(qbar.Qux[k] @ xs + qbar.Quu[k] @ us)
        Js.append(kron(xs[None, :], eye) @ bundle.dvec_Qux(k)
                  + kron(us[None, :], eye) @ bundle.dvec_Quu(k))
    return ResidualSystem(np.concatenate(rs), np.vstack(Js))
