"""Parameterized constrained optimal control problems.

A problem is

    min  sum_{k<N} c(x_k, u_k, k; theta) + c_f(x_N; theta)
    s.t. x_{k+1} = f(x_k, u_k, k; theta),  g(x_k, u_k, k; theta) <= 0,
         h(x_k, u_k, k; theta) = 0,  x_0 given.

The user supplies the functions written with ``jax.numpy``.  Exact partial
derivatives (first, second and the directional third-order terms needed by the
closed-loop learner) are produced by forward-mode differentiation of those
closed-form expressions and compiled once per problem.  ``fd_derivatives_at``
is an independent central-difference oracle meant for verification only.

Internally every stage function is differentiated with respect to the joint
variable ``z = [theta; x; u]``.  Its leading ``n_theta + n_x`` entries form the
augmented state ``y = [theta; x]`` used by the gradient solver.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)


class DivergenceError(RuntimeError):
    """A rollout produced non-finite states."""


def _no_constraint(x, u, k, theta):
    return jnp.zeros(0, dtype=x.dtype)


class OCProblem:
    """Horizon-N optimal control problem with derivative oracles.

    Callables take ``(x, u, k, theta)`` (``terminal_cost`` takes ``(x, theta)``)
    and must be traceable by jax.  Inequalities are feasible when ``<= 0``.
    """

    def __init__(self, n_x, n_u, n_theta, N, stage_cost, terminal_cost, dynamics,
                 ineq=None, n_in=0, eq=None, n_eq=0, name="problem",
                 theta_names=None):
        if ineq is None and n_in:
            raise ValueError("n_in > 0 but no inequality function given")
        if eq is None and n_eq:
            raise ValueError("n_eq > 0 but no equality function given")
        self.n_x, self.n_u, self.n_theta = int(n_x), int(n_u), int(n_theta)
        self.n_in, self.n_eq, self.N = int(n_in), int(n_eq), int(N)
        self.stage_cost = stage_cost
        self.terminal_cost = terminal_cost
        self.dynamics = dynamics
        self.ineq = ineq if ineq is not None else _no_constraint
        self.eq = eq if eq is not None else _no_constraint
        self.name = name
        self.theta_names = list(theta_names) if theta_names else [
            f"theta{i}" for i in range(self.n_theta)]
        self.n_y = self.n_theta + self.n_x
        self.n_z = self.n_y + self.n_u
        self.n_out = 1 + self.n_x + self.n_in + self.n_eq
        nt, nx, nu, ni, ne = self.n_theta, self.n_x, self.n_u, self.n_in, self.n_eq
        self._cols = {"theta": slice(0, nt), "x": slice(nt, nt + nx),
                      "u": slice(nt + nx, nt + nx + nu), "y": slice(0, nt + nx)}
        self._rows = {"c": 0, "f": slice(1, 1 + nx), "g": slice(1 + nx, 1 + nx + ni),
                      "h": slice(1 + nx + ni, 1 + nx + ni + ne)}

    # -- layout -----------------------------------------------------------
    @property
    def has_constraints(self):
        return self.n_in + self.n_eq > 0

    def pack(self, x, u, theta):
        return np.concatenate([np.asarray(theta, float), np.asarray(x, float),
                               np.asarray(u, float)])

    def _split(self, z):
        nt, ny = self.n_theta, self.n_y
        return z[nt:ny], z[ny:], z[:nt]

    def _stacked(self, z, k):
        x, u, theta = self._split(z)
        c = jnp.reshape(self.stage_cost(x, u, k, theta), (1,))
        f = jnp.reshape(self.dynamics(x, u, k, theta), (self.n_x,))
        g = jnp.reshape(self.ineq(x, u, k, theta), (self.n_in,))
        h = jnp.reshape(self.eq(x, u, k, theta), (self.n_eq,))
        return jnp.concatenate([c, f, g, h])

    def _terminal(self, zf):
        theta, x = zf[:self.n_theta], zf[self.n_theta:]
        return jnp.reshape(self.terminal_cost(x, theta), ())

    def without_constraints(self):
        """The same costs and dynamics with all constraints dropped."""
        return self._unconstrained

    @cached_property
    def _unconstrained(self):
        if not self.has_constraints:
            return self
        return OCProblem(self.n_x, self.n_u, self.n_theta, self.N, self.stage_cost,
                         self.terminal_cost, self.dynamics, name=self.name,
                         theta_names=self.theta_names)

    def with_horizon(self, N):
        return OCProblem(self.n_x, self.n_u, self.n_theta, N, self.stage_cost,
                         self.terminal_cost, self.dynamics,
                         ineq=self.ineq if self.n_in else None, n_in=self.n_in,
                         eq=self.eq if self.n_eq else None, n_eq=self.n_eq,
                         name=self.name, theta_names=self.theta_names)

    # -- compiled oracles -------------------------------------------------
    @cached_property
    def _jit(self):
        F = self._stacked
        jac = jax.jacfwd(F)
        hess = jax.jacfwd(jac)

        def second(z, k):
            return F(z, k), jac(z, k), hess(z, k)

        def second_jvp(z, k, dirs):
            # tangents of (jac, hess) along each direction in dirs
            def one(d):
                return jax.jvp(lambda zz: (jac(zz, k), hess(zz, k)), (z,), (d,))[1]
            return jax.vmap(one)(dirs)

        T = self._terminal
        tg = jax.grad(T)
        th = jax.hessian(T)

        def term_second(zf):
            return T(zf), tg(zf), th(zf)

        def term_jvp(zf, dirs):
            def one(d):
                return jax.jvp(lambda zz: (tg(zz), th(zz)), (zf,), (d,))[1]
            return jax.vmap(one)(dirs)

        def step(x, u, k, theta):
            return jnp.reshape(self.dynamics(x, u, k, theta), (self.n_x,))

        def rollout_fb(x0, xs, us, kff, K, alpha, theta):
            ks = jnp.arange(us.shape[0], dtype=x0.dtype)

            def body(xn, inp):
                x, u, kf, Kk, k = inp
                un = u + alpha * kf + Kk @ (xn - x)
                return step(xn, un, k, theta), (xn, un)

            xl, (xs_new, us_new) = jax.lax.scan(body, x0, (xs[:-1], us, kff, K, ks))
            return jnp.concatenate([xs_new, xl[None]]), us_new

        return {
            "vals": jax.jit(jax.vmap(F)),
            "first": jax.jit(jax.vmap(lambda z, k: (F(z, k), jac(z, k)))),
            "second": jax.jit(jax.vmap(second)),
            "second_jvp": jax.jit(jax.vmap(second_jvp)),
            "one_vals": jax.jit(F),
            "one_second": jax.jit(second),
            "term_val": jax.jit(T),
            "term_first": jax.jit(lambda zf: (T(zf), tg(zf))),
            "term_second": jax.jit(term_second),
            "term_jvp": jax.jit(term_jvp),
            "rollout_fb": jax.jit(rollout_fb),
        }

    def _stage_points(self, traj, theta):
        N = traj.controls.shape[0]
        th = np.broadcast_to(np.asarray(theta, float), (N, self.n_theta))
        Z = np.concatenate([th, traj.states[:-1], traj.controls], axis=1)
        return Z, np.arange(N, dtype=float)

    def _terminal_point(self, traj, theta):
        return np.concatenate([np.asarray(theta, float), traj.states[-1]])

    def values(self, traj, theta):
        """Stacked stage values, shape (N, n_out): [c, f, g, h] per stage."""
        Z, K = self._stage_points(traj, theta)
        if Z.shape[0] == 0:
            return np.zeros((0, self.n_out))
        return np.asarray(self._jit["vals"](Z, K))

    def first_derivatives(self, traj, theta):
        Z, K = self._stage_points(traj, theta)
        val, jac = self._jit["first"](Z, K)
        tv, tg = self._jit["term_first"](self._terminal_point(traj, theta))
        return (StageBatch(self, np.asarray(val), np.asarray(jac), None),
                TerminalDerivatives(self, float(tv), np.asarray(tg), None))

    def second_derivatives(self, traj, theta):
        Z, K = self._stage_points(traj, theta)
        val, jac, hess = self._jit["second"](Z, K)
        tv, tg, th = self._jit["term_second"](self._terminal_point(traj, theta))
        return (StageBatch(self, np.asarray(val), np.asarray(jac), np.asarray(hess)),
                TerminalDerivatives(self, float(tv), np.asarray(tg), np.asarray(th)))

    def third_directional(self, traj, theta, dZ, dzf):
        """Directional derivatives of all first/second partials.

        ``dZ`` has shape (N, p, n_z) (one tangent of z per stage and
        direction) and ``dzf`` shape (p, n_y) for the terminal point.  Returns
        ``(djac, dhess)`` with shapes (N, p, n_out, n_z) and
        (N, p, n_out, n_z, n_z), plus the terminal ``(dgrad, dhess)``.
        """
        Z, K = self._stage_points(traj, theta)
        djac, dhess = self._jit["second_jvp"](Z, K, dZ)
        tdg, tdh = self._jit["term_jvp"](self._terminal_point(traj, theta), dzf)
        return (np.asarray(djac), np.asarray(dhess)), (np.asarray(tdg), np.asarray(tdh))

    def step(self, x, u, k, theta):
        v = np.asarray(self._jit["one_vals"](self.pack(x, u, theta), float(k)))
        return v[1:1 + self.n_x]

    def rollout_feedback(self, x0, traj, kff, K, alpha, theta):
        """Rollout of ``u = u_bar + alpha*k + K (x - x_bar)`` through the dynamics."""
        xs, us = self._jit["rollout_fb"](
            np.asarray(x0, float), traj.states, traj.controls, kff, K,
            float(alpha), np.asarray(theta, float))
        xs, us = np.asarray(xs), np.asarray(us)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            bad = int(np.argmax(~np.all(np.isfinite(xs), axis=1)))
            raise DivergenceError(f"non-finite state at stage {bad}")
        return xs, us


@dataclass
class Trajectory:
    """States (N+1, n_x), controls (N, n_u) and constraint duals (N, n_in), (N, n_eq)."""
    states: np.ndarray
    controls: np.ndarray
    duals_in: np.ndarray = field(default=None)
    duals_eq: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, float))
        N = len(self.states) - 1
        self.controls = np.asarray(self.controls, float).reshape(N, -1)
        if self.duals_in is None:
            self.duals_in = np.zeros((N, 0))
        if self.duals_eq is None:
            self.duals_eq = np.zeros((N, 0))
        self.duals_in = np.asarray(self.duals_in, float).reshape(N, -1)
        self.duals_eq = np.asarray(self.duals_eq, float).reshape(N, -1)

    @property
    def N(self):
        return self.controls.shape[0]

    def copy(self, **changes):
        t = replace(self, **changes)
        for name in ("states", "controls", "duals_in", "duals_eq"):
            if name not in changes:
                setattr(t, name, getattr(self, name).copy())
        return t


_BLOCKS = ("theta", "x", "u", "y")


class StageDerivatives:
    """Value, Jacobian and Hessian of the stacked stage map [c; f; g; h] at one
    point, with named accessors such as ``d.f_x``, ``d.c_ux`` or ``d.g_uu``.

    Second-order blocks of vector functions are tensors of shape
    (value-dim, a-dim, b-dim); for the scalar cost they are matrices.
    The ``y`` block is ``[theta; x]``.
    """

    def __init__(self, p, val, jac, hess):
        self.p, self.val, self.jac, self.hess = p, val, jac, hess
        self._cols, self._rows = p._cols, p._rows

    def value(self, fn):
        return self.val[self._rows[fn]]

    def first(self, fn, a):
        return self.jac[self._rows[fn], self._cols[a]]

    def second(self, fn, a, b):
        if self.hess is None:
            raise KeyError("second-order block requested from a first-order oracle")
        return self.hess[self._rows[fn], self._cols[a], self._cols[b]]

    def __getattr__(self, name):
        # c, f_x, c_ux, g_uu, h_theta, f_utheta, ...
        if name.startswith("_"):
            raise AttributeError(name)
        fn, _, rest = name.partition("_")
        if fn not in ("c", "f", "g", "h"):
            raise AttributeError(name)
        if not rest:
            return self.value(fn)
        parts = _parse_blocks(rest)
        if parts is None:
            raise AttributeError(name)
        if len(parts) == 1:
            return self.first(fn, parts[0])
        return self.second(fn, parts[0], parts[1])


def _parse_blocks(s):
    out = []
    while s:
        for b in _BLOCKS:
            if s.startswith(b):
                out.append(b)
                s = s[len(b):]
                break
        else:
            return None
    return out if 1 <= len(out) <= 2 else None


class StageBatch:
    """Derivatives at every stage of a trajectory; ``batch[k]`` is a
    ``StageDerivatives`` view."""

    def __init__(self, p, val, jac, hess):
        self.p, self.val, self.jac, self.hess = p, val, jac, hess

    def __len__(self):
        return self.val.shape[0]

    def __getitem__(self, k):
        return StageDerivatives(self.p, self.val[k], self.jac[k],
                                None if self.hess is None else self.hess[k])


class TerminalDerivatives:
    """Terminal cost value, gradient and Hessian over ``[theta; x]``."""

    def __init__(self, p, val, grad, hess):
        self.p, self.val, self.grad, self.hess = p, val, grad, hess
        nt = p.n_theta
        self._cols = {"theta": slice(0, nt), "x": slice(nt, nt + p.n_x),
                      "y": slice(0, nt + p.n_x)}

    @property
    def c(self):
        return self.val

    def first(self, a):
        return self.grad[self._cols[a]]

    def second(self, a, b):
        return self.hess[self._cols[a], self._cols[b]]

    def __getattr__(self, name):
        if not name.startswith("c_"):
            raise AttributeError(name)
        parts = _parse_blocks(name[2:])
        if parts is None or "u" in parts:
            raise AttributeError(name)
        return self.first(parts[0]) if len(parts) == 1 else self.second(*parts)


# --------------------------------------------------------------------------
# operations

def _check_dims(p, t):
    if t.states.shape[1] != p.n_x or t.controls.shape[1] != p.n_u:
        raise ValueError(
            f"trajectory dims ({t.states.shape[1]}, {t.controls.shape[1]}) do not "
            f"match problem ({p.n_x}, {p.n_u})")


def evaluate_cost(p, t, theta):
    """Total cost: sum of stage costs plus terminal cost."""
    _check_dims(p, t)
    vals = p.values(t, theta)
    term = float(p._jit["term_val"](p._terminal_point(t, theta)))
    return float(np.sum(vals[:, 0])) + term


def initial_duals(g, mu, floor=1e-3):
    """lambda = max(mu / (-g), floor) componentwise (defined for g < 0)."""
    g = np.asarray(g, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(g < 0, mu / np.maximum(-g, 1e-300), floor)
    return np.maximum(lam, floor)


def rollout(p, x0, controls, theta, mu=None):
    """Open-loop rollout.  Inequality duals are initialized with
    ``initial_duals`` at perturbation ``mu`` (``floor`` when mu is None) and
    equality duals with zeros."""
    controls = np.asarray(controls, float).reshape(-1, p.n_u)
    N = controls.shape[0]
    x0 = np.asarray(x0, float)
    states = np.zeros((N + 1, p.n_x))
    states[0] = x0
    nominal = Trajectory(states, controls)
    if N:
        xs, us = p.rollout_feedback(x0, nominal, np.zeros((N, p.n_u)),
                                    np.zeros((N, p.n_u, p.n_x)), 0.0, theta)
    else:
        xs, us = states, controls
    t = Trajectory(xs, us)
    if p.n_in and N:
        g = p.values(t, theta)[:, 1 + p.n_x:1 + p.n_x + p.n_in]
        t.duals_in = initial_duals(g, mu) if mu is not None else np.full_like(g, 1e-3)
    else:
        t.duals_in = np.zeros((N, p.n_in))
    t.duals_eq = np.zeros((N, p.n_eq))
    return t


def derivatives_at(p, k, x, u, theta):
    """Exact partials at one point.  For ``k == p.N`` (or ``u is None``) the
    terminal-cost derivatives are returned."""
    if u is None or k == p.N:
        zf = np.concatenate([np.asarray(theta, float), np.asarray(x, float)])
        v, g, h = p._jit["term_second"](zf)
        return TerminalDerivatives(p, float(v), np.asarray(g), np.asarray(h))
    z = p.pack(x, u, theta)
    val, jac, hess = p._jit["one_second"](z, float(k))
    return StageDerivatives(p, np.asarray(val), np.asarray(jac), np.asarray(hess))


def fd_derivatives_at(p, k, x, u, theta, h=1e-4):
    """Central-difference partials (verification grade).  Step sizes are
    scaled by ``max(1, |z_i|)``."""
    if h <= 0:
        raise ValueError("step must be positive")
    terminal = u is None or k == p.N
    if terminal:
        z = np.concatenate([np.asarray(theta, float), np.asarray(x, float)])

        def F(zz):
            return np.array([float(p._jit["term_val"](zz))])
    else:
        z = p.pack(x, u, theta)

        def F(zz):
            return np.asarray(p._jit["one_vals"](zz, float(k)))

    n = z.size
    steps = h * np.maximum(1.0, np.abs(z))
    f0 = F(z)
    jac = np.zeros((f0.size, n))
    hess = np.zeros((f0.size, n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        fp, fm = F(z + ei), F(z - ei)
        jac[:, i] = (fp - fm) / (2 * steps[i])
        hess[:, i, i] = (fp - 2 * f0 + fm) / steps[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = steps[j]
            v = (F(z + ei + ej) - F(z + ei - ej) - F(z - ei + ej) + F(z - ei - ej))
            v /= 4 * steps[i] * steps[j]
            hess[:, i, j] = hess[:, j, i] = v
    if terminal:
        return TerminalDerivatives(p, float(f0[0]), jac[0], hess[0])
    return StageDerivatives(p, f0, jac, hess)
