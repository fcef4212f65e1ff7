import time

import jax.numpy as jnp
import numpy as np
import pytest

from ddp_irl.benchmarks import make_system
from ddp_irl.gradient import gradient_unconstrained
from ddp_irl.problem import OCProblem, evaluate_cost, rollout
from ddp_irl.solver import (InfeasiblePointError, IpddpConfig, MaxIterationsError,
                            kkt_stage, merit, solve_active_set, solve_ipddp,
                            solve_unconstrained)
from ddp_irl.solver import KKTSingularError


def scalar_with_lower_bound(lb=-0.5):
    """Scalar example with u >= lb; the bound is active at the first stage."""
    def c(x, u, k, th):
        return 0.5 * (th[0] * x @ x + u @ u)

    def cf(x, th):
        return 0.5 * x @ x

    def f(x, u, k, th):
        return x + u

    def g(x, u, k, th):
        return jnp.array([lb - u[0]])

    return OCProblem(1, 1, 1, 2, c, cf, f, ineq=g, n_in=1, name="bounded_scalar")


def riccati(A, B, Q, R, N, P_N=None):
    """Finite-horizon gains for sum x'Qx + u'Ru, u_k = K_k x_k."""
    P = np.zeros_like(Q) if P_N is None else P_N
    Ks = []
    for _ in range(N):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
        Ks.append(K)
    return Ks[::-1]


@pytest.mark.parametrize("solve", [solve_ipddp, solve_unconstrained])
def test_scalar_example_values(solve):
    p, s = make_system("scalar_example")
    r = solve(p, [1.0], [1.0])
    assert np.allclose(r.traj.controls.ravel(), [-0.6, -0.2], atol=1e-8)
    assert np.allclose(r.traj.states.ravel(), [1.0, 0.4, 0.2], atol=1e-8)
    # feedback gains from the same recursion: K0 = -3/5, K1 = -1/2
    assert np.allclose(r.gains.K.ravel(), [-0.6, -0.5], atol=1e-10)
    traj, value, gains, mu = r
    assert traj is r.traj


def test_bounded_scalar_hits_the_bound():
    p = scalar_with_lower_bound()
    ip = solve_ipddp(p, [1.0], [1.0], IpddpConfig(tol=1e-11))
    assert np.allclose(ip.traj.controls.ravel(), [-0.5, -0.25], atol=1e-6)
    assert ip.traj.duals_in[0, 0] > 1e-3 and ip.traj.duals_in[1, 0] < 1e-5
    aset = solve_active_set(p, [1.0], [1.0])
    assert np.allclose(aset.traj.controls.ravel(), [-0.5, -0.25], atol=1e-12)
    assert aset.active.ravel().tolist() == [True, False]
    # multiplier = derivative of the cost-to-go in u0 at the bound, u0 + V1 x1 with V1 = 3/2
    assert np.isclose(aset.traj.duals_in[0, 0], -0.5 + 1.5 * 0.5, atol=1e-8)


def test_interior_and_active_set_agree_on_benchmarks():
    cfg = IpddpConfig(tol=1e-10)
    for name in ("cartpole", "arm2link"):
        p, s = make_system(name)
        ip = solve_ipddp(p, s.theta_star, s.x0, cfg)
        aset = solve_active_set(p, s.theta_star, s.x0, cfg)
        assert np.abs(ip.traj.controls - aset.traj.controls).max() < 1e-5
        assert aset.active.any()


def test_converged_merit_and_feasibility():
    p, s = make_system("cartpole")
    r = solve_ipddp(p, s.theta_star, s.x0)
    assert r.merit < 1e-9 and r.mu == pytest.approx(1e-8)
    g = p.values(r.traj, s.theta_star)[:, p._rows["g"]]
    assert np.all(g < 0) and np.all(r.traj.duals_in > 0)
    assert merit(p, r.traj, s.theta_star, r.mu) == pytest.approx(r.merit, rel=1e-6)
    mus = [row["mu"] for row in r.log]
    assert all(a >= b for a, b in zip(mus, mus[1:]))


def test_solution_beats_perturbed_controls():
    p, s = make_system("arm2link", constrained=False)
    r = solve_unconstrained(p, s.theta_star, s.x0)
    best = evaluate_cost(p, r.traj, s.theta_star)
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = r.traj.controls + 1e-3 * rng.standard_normal(r.traj.controls.shape)
        assert evaluate_cost(p, rollout(p, s.x0, u, s.theta_star), s.theta_star) > best


def test_warm_start_converges_immediately():
    p, s = make_system("cartpole")
    r = solve_ipddp(p, s.theta_star, s.x0)
    w = solve_ipddp(p, s.theta_star, s.x0, IpddpConfig(mu_init=1e-8), warm_start=r.traj)
    assert w.iterations <= 2
    assert np.abs(w.traj.controls - r.traj.controls).max() < 1e-8


def test_riccati_gains_and_gradient():
    p, s = make_system("lqr_ioc", constrained=False)
    A, B = s.constants["A"], s.constants["B"]

    def gains(th):
        return riccati(A, B, 2 * np.diag(th[:2]), 2 * th[2:3, None], p.N)

    th = s.theta_star
    r = solve_unconstrained(p, th, s.x0)
    assert np.abs(r.gains.K - np.array(gains(th))).max() < 1e-10
    assert np.abs(r.gains.k).max() < 1e-10

    def traj(theta):
        x, xs, us = s.x0.copy(), [s.x0.copy()], []
        for K in gains(theta):
            u = K @ x
            x = A @ x + B @ u
            xs.append(x)
            us.append(u)
        return np.array(xs), np.array(us)

    G = gradient_unconstrained(p, r.traj, th)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        (xa, ua), (xb, ub) = traj(th + e), traj(th - e)
        assert np.abs(G.dx[..., j] - (xa - xb) / (2 * h)).max() < 1e-6
        assert np.abs(G.du[..., j] - (ua - ub) / (2 * h)).max() < 1e-6


def test_error_paths():
    p, s = make_system("cartpole")
    bad = s.x0.copy()
    bad[0] = 10.0                       # beyond the cart bound
    with pytest.raises(InfeasiblePointError):
        solve_ipddp(p, s.theta_star, bad)
    with pytest.raises(MaxIterationsError):
        solve_ipddp(p, s.theta_star, s.x0, IpddpConfig(max_iters=1))
    with pytest.raises(ValueError):
        solve_ipddp(p, s.theta_star, [np.nan] * 4)
    with pytest.raises(ValueError):
        IpddpConfig(mu_init=1e-10, mu_floor=1e-8)


def test_kkt_stage_solution_and_rank_check():
    H = np.array([[2.0, 0.0], [0.0, 4.0]])
    Gu, Gux = np.array([1.0, -1.0]), np.zeros((2, 1))
    Au, Ax, a = np.array([[1.0, 1.0]]), np.zeros((1, 1)), np.array([0.5])
    k, K, kappa, Omega = kkt_stage(Gu, Gux, H, Au, Ax, a)
    assert np.allclose(Au @ k + a, 0)
    assert np.allclose(H @ k + Gu + Au.T @ kappa, 0)
    with pytest.raises(KKTSingularError):
        kkt_stage(Gu, Gux, H, np.array([[1.0, 1.0], [2.0, 2.0]]), np.zeros((2, 1)), np.zeros(2))


def test_scalar_solve_is_fast():
    p, s = make_system("scalar_example")
    solve_ipddp(p, s.theta_star, s.x0)
    t0 = time.perf_counter()
    solve_ipddp(p, s.theta_star, s.x0)
    assert time.perf_counter() - t0 < 0.1
