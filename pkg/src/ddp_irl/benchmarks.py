"""Benchmark systems, evaluation metrics and noisy rollouts.

Every system is integrated with forward Euler at step ``dt``.  The quadrotor
and rocket carry a unit quaternion that is renormalized after every step.

Parameter layouts (``theta``):

    scalar_example   [theta]
    lqr_ioc          [w_x1, w_x2, w_u]
    cartpole         [m_c, m_p, l, w_x(4), x_ub, f_ub]
    arm2link         [l1, l2, w_x(4), q_ub, u_ub]
    quadrotor        [m, Jx, Jy, Jz, l, w_p, w_v, w_q, w_w, r, u_ub]
    rocket           [m, Jx, Jy, Jz, w_p, w_v, w_q, w_w, alpha_ub, u_ub]

``constrained=False`` drops the constraints and the trailing bound entries.
The nonlinear systems weigh the control with a fixed 0.1 so that the state
weights are identifiable.
"""

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .linalg import cross_mat, quat_mul, quat_to_rot
from .problem import DivergenceError, OCProblem, Trajectory, evaluate_cost

W_U = 0.1
NAMES = ("scalar_example", "lqr_ioc", "cartpole", "arm2link", "quadrotor", "rocket")


@dataclass
class BenchmarkSpec:
    name: str
    theta_star: np.ndarray
    theta_names: list
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    x0: np.ndarray
    N: int
    dt: float
    constrained: bool
    constants: dict = field(default_factory=dict)

    def clamp(self, theta):
        return np.clip(theta, self.theta_lo, self.theta_hi)

    @property
    def n_theta(self):
        return len(self.theta_star)


def _box(theta_star, lo=0.2, hi=5.0):
    t = np.asarray(theta_star, float)
    return lo * t, hi * t


def _quad_weights(x, x_d, w):
    d = x - x_d
    return d @ (w * d)


# --------------------------------------------------------------------------

def _scalar_example(o):
    N = o.get("N", 2)

    def c(x, u, k, th):
        return 0.5 * (th[0] * x @ x + u @ u)

    def cf(x, th):
        return 0.5 * x @ x

    def f(x, u, k, th):
        return x + u

    p = OCProblem(1, 1, 1, N, c, cf, f, name="scalar_example", theta_names=["theta"])
    ts = np.array([1.0])
    spec = BenchmarkSpec("scalar_example", ts, ["theta"], np.array([0.05]), np.array([20.0]),
                         np.array(o.get("x0", [1.0]), float), N, 1.0, False)
    return p, spec


def _lqr_ioc(o):
    N = o.get("N", 50)
    A = np.array([[-1.0, 1.0], [0.0, 1.0]])
    B = np.array([[1.0], [3.0]])
    bound = o.get("bound", 0.1)
    constrained = o.get("constrained", True)

    def c(x, u, k, th):
        return x @ (th[:2] * x) + th[2] * u @ u

    def cf(x, th):
        return 0.0 * x @ x

    def f(x, u, k, th):
        return jnp.asarray(A) @ x + jnp.asarray(B) @ u

    def g(x, u, k, th):
        return jnp.array([(x[0] * u[0]) ** 2 - bound ** 2])

    names = ["w_x1", "w_x2", "w_u"]
    p = OCProblem(2, 1, 3, N, c, cf, f, ineq=g if constrained else None,
                  n_in=1 if constrained else 0, name="lqr_ioc", theta_names=names)
    ts = np.array([0.1, 0.3, 0.6])
    lo, hi = _box(ts, 0.01, 100.0)
    x0 = np.array(o.get("x0", [0.6, -0.5]), float)
    spec = BenchmarkSpec("lqr_ioc", ts, names, lo, hi, x0, N, 1.0, constrained,
                         {"A": A, "B": B, "bound": bound})
    return p, spec


def _cartpole(o):
    N = o.get("N", 12)
    dt = o.get("dt", 0.05)
    grav = 9.81
    constrained = o.get("constrained", True)
    x_d = jnp.array([0.0, 0.0, np.pi, 0.0])

    def f(x, u, k, th):
        mc, mp, l = th[0], th[1], th[2]
        q, qd = x[2], x[3]
        s, co = jnp.sin(q), jnp.cos(q)
        b = mc + mp * s ** 2
        xdd = (u[0] + mp * s * (l * qd ** 2 + grav * co)) / b
        qdd = (-u[0] * co - mp * l * qd ** 2 * co * s - (mc + mp) * grav * s) / (l * b)
        return x + dt * jnp.array([x[1], xdd, qd, qdd])

    def c(x, u, k, th):
        return _quad_weights(x, x_d, th[3:7]) + W_U * u @ u

    def cf(x, th):
        return _quad_weights(x, x_d, th[3:7])

    def g(x, u, k, th):
        return jnp.array([x[0] - th[7], -x[0] - th[7], u[0] - th[8], -u[0] - th[8]])

    names = ["m_c", "m_p", "l", "w_x", "w_xd", "w_q", "w_qd"]
    ts = [1.0, 0.5, 1.0, 1.0, 0.5, 4.0, 0.5]
    if constrained:
        names += ["x_ub", "f_ub"]
        ts += [2.0, 6.5]
    ts = np.array(o.get("theta_star", ts), float)
    p = OCProblem(4, 1, len(ts), N, c, cf, f, ineq=g if constrained else None,
                  n_in=4 if constrained else 0, name="cartpole", theta_names=names)
    lo, hi = _box(ts)
    x0 = np.array(o.get("x0", [1.0, 0.5, 1.0, 1.0]), float)
    return p, BenchmarkSpec("cartpole", ts, names, lo, hi, x0, N, dt, constrained,
                            {"g": grav, "x_d": np.asarray(x_d)})


def _arm2link(o):
    N = o.get("N", 10)
    dt = o.get("dt", 0.05)
    grav = 9.81
    m1 = m2 = 1.0
    constrained = o.get("constrained", True)
    x_d = jnp.array([np.pi / 2, 0.0, 0.0, 0.0])

    def f(x, u, k, th):
        l1, l2 = th[0], th[1]
        q1, q2, d1, d2 = x[0], x[1], x[2], x[3]
        I1, I2 = m1 * l1 ** 2 / 12, m2 * l2 ** 2 / 12
        c2 = jnp.cos(q2)
        M11 = m1 * l1 ** 2 / 4 + I1 + m2 * (l1 ** 2 + l2 ** 2 / 4 + l1 * l2 * c2) + I2
        M12 = m2 * (l2 ** 2 / 4 + l1 * l2 * c2 / 2) + I2
        M22 = m2 * l2 ** 2 / 4 + I2
        hcor = m2 * l1 * l2 * jnp.sin(q2) * jnp.array([-d2 ** 2 - 2 * d1 * d2, d1 ** 2]) / 2
        grv = jnp.array([
            m1 * l1 * grav * jnp.cos(q1) / 2
            + m2 * grav * (l2 * jnp.cos(q1 + q2) / 2 + l1 * jnp.cos(q1)),
            m2 * grav * l2 * jnp.cos(q1 + q2) / 2])
        rhs = u - hcor - grv
        det = M11 * M22 - M12 ** 2
        qdd = jnp.array([M22 * rhs[0] - M12 * rhs[1], -M12 * rhs[0] + M11 * rhs[1]]) / det
        return x + dt * jnp.concatenate([x[2:], qdd])

    def c(x, u, k, th):
        return _quad_weights(x, x_d, th[2:6]) + W_U * u @ u

    def cf(x, th):
        return _quad_weights(x, x_d, th[2:6])

    def g(x, u, k, th):
        qub, uub = th[6], th[7]
        return jnp.concatenate([x[:2] - qub, -x[:2] - qub, u - uub, -u - uub])

    names = ["l1", "l2", "w_q1", "w_q2", "w_dq1", "w_dq2"]
    ts = [1.0, 1.0, 2.0, 1.0, 0.2, 0.2]
    if constrained:
        names += ["q_ub", "u_ub"]
        ts += [3.0, 2.4]
    ts = np.array(o.get("theta_star", ts), float)
    p = OCProblem(4, 2, len(ts), N, c, cf, f, ineq=g if constrained else None,
                  n_in=8 if constrained else 0, name="arm2link", theta_names=names)
    lo, hi = _box(ts)
    x0 = np.array(o.get("x0", [0.0, 0.0, 0.0, 0.0]), float)
    return p, BenchmarkSpec("arm2link", ts, names, lo, hi, x0, N, dt, constrained,
                            {"g": grav, "m1": m1, "m2": m2, "x_d": np.asarray(x_d)})


def _attitude_error(q, q_d):
    R = quat_to_rot(q)
    Rd = quat_to_rot(q_d)
    return 0.5 * (3.0 - jnp.sum(Rd * R))


def _rigid_body_step(x, force_w, torque_b, m, J, grav, dt):
    p, v, q, w = x[0:3], x[3:6], x[6:10], x[10:13]
    acc = force_w / m - grav * jnp.array([0.0, 0.0, 1.0])
    qdot = 0.5 * quat_mul(q, jnp.concatenate([jnp.zeros(1), w]))
    wdot = (torque_b - cross_mat(w) @ (J * w)) / J
    qn = q + dt * qdot
    qn = qn / jnp.sqrt(qn @ qn)
    return jnp.concatenate([p + dt * v, v + dt * acc, qn, w + dt * wdot])


def _rigid_costs(th_w, q_d):
    def c_state(x, th):
        w_p, w_v, w_q, w_w = th_w(th)
        return (w_p * x[0:3] @ x[0:3] + w_v * x[3:6] @ x[3:6]
                + w_q * _attitude_error(x[6:10], q_d) + w_w * x[10:13] @ x[10:13])
    return c_state


def _quadrotor(o):
    N = o.get("N", 10)
    dt = o.get("dt", 0.05)
    grav = 10.0
    ctt = o.get("c", 0.02)
    constrained = o.get("constrained", True)
    q_d = jnp.array([1.0, 0.0, 0.0, 0.0])

    def f(x, u, k, th):
        m, J, l = th[0], th[1:4], th[4]
        T = jnp.sum(u)
        tau = jnp.array([l / 2 * (u[3] - u[1]), l / 2 * (u[2] - u[0]),
                         ctt * (u[0] - u[1] + u[2] - u[3])])
        R = quat_to_rot(x[6:10])
        return _rigid_body_step(x, T * R[:, 2], tau, m, J, grav, dt)

    cs = _rigid_costs(lambda th: (th[5], th[6], th[7], th[8]), q_d)

    def c(x, u, k, th):
        return cs(x, th) + W_U * u @ u

    def cf(x, th):
        return cs(x, th)

    def g(x, u, k, th):
        r, uub = th[9], th[10]
        return jnp.concatenate([jnp.array([x[0:3] @ x[0:3] - r ** 2]), u - uub, -u - uub])

    names = ["m", "Jx", "Jy", "Jz", "l", "w_p", "w_v", "w_q", "w_w"]
    ts = [1.0, 1.0, 1.0, 1.0, 0.4, 1.0, 0.5, 2.0, 0.5]
    if constrained:
        names += ["r", "u_ub"]
        ts += [3.0, 1.0]
    ts = np.array(o.get("theta_star", ts), float)
    p = OCProblem(13, 4, len(ts), N, c, cf, f, ineq=g if constrained else None,
                  n_in=9 if constrained else 0, name="quadrotor", theta_names=names)
    lo, hi = _box(ts)
    q0 = np.array([np.cos(0.2), np.sin(0.2), 0.0, 0.0])
    x0 = np.concatenate([[0.5, -0.5, 0.5], np.zeros(3), q0, np.zeros(3)])
    x0 = np.array(o.get("x0", x0), float)
    return p, BenchmarkSpec("quadrotor", ts, names, lo, hi, x0, N, dt, constrained,
                            {"g": grav, "c": ctt, "q_d": np.asarray(q_d)})


def _rocket(o):
    N = o.get("N", 40)
    dt = o.get("dt", 0.05)
    grav = 10.0
    r_gp = jnp.array(o.get("r_gp", [0.05, 0.0, -0.5]))
    constrained = o.get("constrained", True)
    q_d = jnp.array([1.0, 0.0, 0.0, 0.0])

    def f(x, u, k, th):
        m, J = th[0], th[1:4]
        R = quat_to_rot(x[6:10])
        return _rigid_body_step(x, R @ u, cross_mat(r_gp) @ u, m, J, grav, dt)

    cs = _rigid_costs(lambda th: (th[4], th[5], th[6], th[7]), q_d)

    def c(x, u, k, th):
        return cs(x, th) + W_U * u @ u

    def cf(x, th):
        return cs(x, th)

    def g(x, u, k, th):
        return jnp.array([_attitude_error(x[6:10], q_d) - th[8], u @ u - th[9] ** 2])

    names = ["m", "Jx", "Jy", "Jz", "w_p", "w_v", "w_q", "w_w"]
    ts = [1.0, 0.5, 0.5, 0.2, 1.0, 0.5, 2.0, 0.5]
    if constrained:
        names += ["alpha_ub", "u_ub"]
        ts += [0.3, 6.5]
    ts = np.array(o.get("theta_star", ts), float)
    p = OCProblem(13, 3, len(ts), N, c, cf, f, ineq=g if constrained else None,
                  n_in=2 if constrained else 0, name="rocket", theta_names=names)
    lo, hi = _box(ts)
    q0 = np.array([np.cos(0.15), 0.0, np.sin(0.15), 0.0])
    x0 = np.concatenate([[0.5, -0.5, 1.0], np.zeros(3), q0, np.zeros(3)])
    x0 = np.array(o.get("x0", x0), float)
    return p, BenchmarkSpec("rocket", ts, names, lo, hi, x0, N, dt, constrained,
                            {"g": grav, "r_gp": np.asarray(r_gp), "q_d": np.asarray(q_d)})


_BUILDERS = {
    "scalar_example": _scalar_example,
    "lqr_ioc": _lqr_ioc,
    "cartpole": _cartpole,
    "arm2link": _arm2link,
    "quadrotor": _quadrotor,
    "rocket": _rocket,
}

_CACHE = {}


def make_system(name, overrides=None, constrained=True):
    """Return ``(OCProblem, BenchmarkSpec)`` for a named benchmark.

    Problems are cached on (name, overrides, constrained) so repeated calls
    reuse the compiled derivative oracles.
    """
    if name not in _BUILDERS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(NAMES)}")
    o = dict(overrides or {})
    o.setdefault("constrained", constrained)
    key = (name, repr(sorted(o.items())))
    if key not in _CACHE:
        _CACHE[key] = _BUILDERS[name](o)
    return _CACHE[key]


# --------------------------------------------------------------------------
# metrics

def parameter_residual(theta, theta_star):
    theta, theta_star = np.asarray(theta, float), np.asarray(theta_star, float)
    if theta.shape != theta_star.shape:
        raise ValueError(f"parameter layout mismatch: {theta.shape} vs {theta_star.shape}")
    d = theta - theta_star
    return float(d @ d)


def trajectory_residual(demo, traj):
    """Sum of squared state and control deviations."""
    if demo.states.shape != traj.states.shape or demo.controls.shape != traj.controls.shape:
        raise ValueError("trajectory length mismatch")
    return float(np.sum((demo.states - traj.states) ** 2)
                 + np.sum((demo.controls - traj.controls) ** 2))


def suboptimality_gap(rollout_traj, demo_traj, p, theta_e):
    """Cost of the rollout minus cost of the demonstration, both under theta_e."""
    return evaluate_cost(p, rollout_traj, theta_e) - evaluate_cost(p, demo_traj, theta_e)


def noisy_feedback_rollout(p, theta_true, nominal, K, sigma=0.0, seed=None,
                           additive=None, x0=None):
    """Run ``u_k = u*_k + K_k (x_k - x*_k)`` on the true dynamics with process noise.

    The state update is ``f(x, u) * (1 + sigma * eps) + w`` componentwise with
    standard normal ``eps`` drawn from ``seed`` and an optional additive array
    ``w`` of shape (N+1, n_x) (row k is added to x_k; row 0 is ignored).
    """
    theta_true = np.asarray(theta_true, float)
    rng = np.random.default_rng(seed)
    N = nominal.N
    K = np.asarray(K, float)
    if K.shape[0] < N:
        raise ValueError("gains do not cover the horizon")
    xs = np.zeros((N + 1, p.n_x))
    us = np.zeros((N, p.n_u))
    xs[0] = nominal.states[0] if x0 is None else x0
    for k in range(N):
        us[k] = nominal.controls[k] + K[k] @ (xs[k] - nominal.states[k])
        nxt = p.step(xs[k], us[k], k, theta_true)
        if sigma:
            nxt = nxt * (1.0 + sigma * rng.standard_normal(p.n_x))
        if additive is not None:
            nxt = nxt + additive[k + 1]
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"noisy rollout diverged at stage {k}")
        xs[k + 1] = nxt
    return Trajectory(xs, us)
