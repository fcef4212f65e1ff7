"""Open-loop inverse reinforcement learning.

The loss compares a demonstration with the trajectory solved at theta,

    L(theta) = sum_{k in S} |x**_k - x_k(theta)|^2 + |u**_k - u_k(theta)|^2,

and its gradient is the trajectory derivative contracted with -2 * residual.
The update is projected gradient descent onto the parameter box.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import parameter_residual
from .gradient import trajectory_gradient
from .problem import DivergenceError
from .solver import IpddpConfig, SolverError, solve_active_set, solve_ipddp, solve_unconstrained

log = logging.getLogger(__name__)

SOLVERS = {"ipddp": solve_ipddp, "active-set": solve_active_set,
           "unconstrained": solve_unconstrained}
DEFAULT_FLAVOR = {"ipddp": "ip", "active-set": "active-set", "unconstrained": "unconstrained"}


@dataclass
class OpenLoopDemo:
    """Observed states on ``state_indices`` and controls on ``control_indices``."""
    x0: np.ndarray
    states: np.ndarray            # (N+1, n_x), rows outside the sample set are ignored
    controls: np.ndarray          # (N, n_u)
    state_indices: np.ndarray = None
    control_indices: np.ndarray = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        self.states = np.asarray(self.states, float)
        self.controls = np.asarray(self.controls, float)
        N = len(self.controls)
        if len(self.states) != N + 1:
            raise ValueError("demo needs N+1 states for N controls")
        if self.state_indices is None:
            self.state_indices = np.arange(N + 1)
        if self.control_indices is None:
            self.control_indices = np.arange(N)
        self.state_indices = np.unique(np.asarray(self.state_indices, int))
        self.control_indices = np.unique(np.asarray(self.control_indices, int))
        if self.state_indices.size and (self.state_indices.min() < 0
                                        or self.state_indices.max() > N):
            raise ValueError("state index out of range")
        if self.control_indices.size and (self.control_indices.min() < 0
                                          or self.control_indices.max() >= N):
            raise ValueError("control index out of range")

    @classmethod
    def from_trajectory(cls, traj, x0=None):
        return cls(traj.states[0] if x0 is None else x0, traj.states, traj.controls)

    @classmethod
    def from_closed_loop(cls, demo):
        """Same recorded data, every stage used."""
        return cls(demo.states[0], demo.states, demo.controls)


def open_loop_loss(demo, traj):
    """Loss plus its partials with respect to the states and controls."""
    gx = np.zeros_like(traj.states)
    gu = np.zeros_like(traj.controls)
    si, ci = demo.state_indices, demo.control_indices
    ex = demo.states[si] - traj.states[si]
    eu = demo.controls[ci] - traj.controls[ci]
    gx[si] = -2.0 * ex
    gu[ci] = -2.0 * eu
    return float(np.sum(ex ** 2) + np.sum(eu ** 2)), gx, gu


@dataclass
class OpenLoopConfig:
    theta0: np.ndarray
    eta: float
    theta_lo: np.ndarray = None
    theta_hi: np.ndarray = None
    t_max: int = 200
    decay: str = "constant"          # or "sqrt": eta / sqrt(t)
    ridge: float = 0.0
    backtrack: bool = False          # halve eta until the loss does not increase
    grad_tol: float = 0.0
    solver: str = "ipddp"
    flavor: str = None
    solver_cfg: IpddpConfig = None

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, float)
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if self.decay not in ("constant", "sqrt"):
            raise ValueError("decay must be 'constant' or 'sqrt'")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.flavor is None:
            self.flavor = DEFAULT_FLAVOR[self.solver]
        if self.ridge < 0:
            raise ValueError("ridge weight must be non-negative")
        if self.theta_lo is not None and np.any(np.asarray(self.theta_lo) >
                                                np.asarray(self.theta_hi)):
            raise ValueError("theta_lo must not exceed theta_hi")


@dataclass
class OpenLoopEval:
    theta: np.ndarray
    loss: float
    grad: np.ndarray
    trajs: list


def evaluate_open_loop(p, theta, demos, cfg):
    """Loss and gradient summed over demonstrations."""
    theta = np.asarray(theta, float)
    solve = SOLVERS[cfg.solver]
    loss, grad, trajs = 0.0, np.zeros_like(theta), []
    for demo in demos:
        res = solve(p, theta, demo.x0, cfg.solver_cfg)
        t = res.traj
        L, gx, gu = open_loop_loss(demo, t)
        dT = trajectory_gradient(p, t, theta, cfg.flavor, mu=res.mu, active=res.active)
        loss += L
        grad += np.einsum("kx,kxp->p", gx, dT.dx) + np.einsum("ku,kup->p", gu, dT.du)
        trajs.append(t)
    if cfg.ridge:
        loss += cfg.ridge * float(theta @ theta)
        grad += 2.0 * cfg.ridge * theta
    return OpenLoopEval(theta, loss, grad, trajs)


def _project(theta, cfg):
    if cfg.theta_lo is None:
        return theta
    return np.clip(theta, cfg.theta_lo, cfg.theta_hi)


def irl_open_step(p, cur, demos, cfg, eta):
    """One projected gradient step from ``cur``; returns (new eval, eta used)."""
    for _ in range(30):
        cand = _project(cur.theta - eta * cur.grad, cfg)
        try:
            new = evaluate_open_loop(p, cand, demos, cfg)
        except (SolverError, DivergenceError):
            if not cfg.backtrack:
                raise
            eta *= 0.5                  # failed inner solve counts as a rejected step
            continue
        if not cfg.backtrack or new.loss <= cur.loss:
            return new, eta
        eta *= 0.5
    return cur, eta


@dataclass
class OpenLoopResult:
    theta: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def losses(self):
        return [row["loss_ol"] for row in self.trace]


def run_open_loop(p, demos, cfg, theta_star=None):
    cur = evaluate_open_loop(p, _project(cfg.theta0, cfg), demos, cfg)
    out = OpenLoopResult(cur.theta.copy())
    eta = cfg.eta

    def record(t, eta_used):
        row = {"t": t, "loss_ol": cur.loss, "grad_norm": float(np.linalg.norm(cur.grad)),
               "eta": eta_used, "theta": cur.theta.copy()}
        if theta_star is not None:
            row["param_residual"] = parameter_residual(cur.theta, theta_star)
        out.trace.append(row)

    record(0, eta)
    for t in range(1, cfg.t_max + 1):
        if np.linalg.norm(cur.grad) <= cfg.grad_tol:
            break
        step = eta / np.sqrt(t) if cfg.decay == "sqrt" else eta
        cur, used = irl_open_step(p, cur, demos, cfg, step)
        if cfg.backtrack and cfg.decay == "constant":
            eta = used
        record(t, used)
    out.theta = cur.theta.copy()
    out.final = cur
    return out
