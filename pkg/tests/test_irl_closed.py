import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddp_irl.benchmarks import make_system
from ddp_irl.gradient import gradient_backward_ip, gradient_forward
from ddp_irl.irl_closed import (LMConfig, NoiseModel, ResidualSystem, closed_loop_loss,
                                closed_loop_residual, evaluate, gain_derivative,
                                generate_closed_loop_demo, lm_update, lqr_residual_jacobian,
                                rank_diagnostic, run_closed_loop, second_order_backward)
from ddp_irl.linalg import SingularMatrixError, dvec
from ddp_irl.solver import IpddpConfig, solve_ipddp

CFG = IpddpConfig(tol=1e-11)


def _bundle(p, th, x0, cfg=CFG):
    r = solve_ipddp(p, th, x0, cfg)
    q = gradient_backward_ip(p, r.traj, th, r.mu)
    G = gradient_forward(q, p)
    return r, q, second_order_backward(p, r.traj, th, r.mu, G, q)


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.2, 3.0))
@settings(max_examples=25, deadline=None)
def test_scalar_noisy_demo_formulas(w1, w2, x0):
    p, s = make_system("scalar_example")
    add = np.array([[0.0], [w1], [w2]])
    d = generate_closed_loop_demo(p, [1.0], [x0], NoiseModel(0.0, add), cfg=CFG)
    assert abs(d.controls[1, 0] - (-x0 / 5 - w1 / 2)) < 1e-12
    assert abs(d.states[2, 0] - (x0 / 5 + w1 / 2 + w2)) < 1e-12
    assert d.indices.tolist() == [0, 1]


def test_scalar_gain_derivative_by_hand():
    # K0 = -(theta + 1/2)/(theta + 3/2), K1 = -1/2
    p, s = make_system("scalar_example")
    r, q, b = _bundle(p, np.array([1.0]), s.x0)
    assert np.allclose(b.dK[:, 0].ravel(), [-0.16, 0.0], atol=1e-12)
    for k in range(2):
        assert np.allclose(gain_derivative(q, b, k), dvec(b.dK[k]), atol=1e-14)


@pytest.mark.parametrize("name,constrained", [("cartpole", False), ("cartpole", True),
                                              ("arm2link", True)])
def test_tangent_sweep_matches_differenced_blocks(name, constrained):
    # at mu = 1e-3 the barrier terms are smooth enough for central differences
    cfg = IpddpConfig(tol=1e-11, mu_floor=1e-3)
    p, s = make_system(name, constrained=constrained)
    th = s.theta_star
    r, q, b = _bundle(p, th, s.x0, cfg)
    for k in range(p.N):
        assert np.allclose(gain_derivative(q, b, k), dvec(b.dK[k]), atol=1e-9)
    h = 1e-5
    for j in range(len(th)):
        e = np.zeros(len(th))
        e[j] = h
        blocks = []
        for sgn in (1, -1):
            rr = solve_ipddp(p, th + sgn * e, s.x0, cfg)
            qq = gradient_backward_ip(p, rr.traj, th + sgn * e, rr.mu)
            blocks.append((qq.Qux, qq.Quu, qq.Kbar[:, :, p.n_theta:]))
        for an, a, c in zip((b.dQux[:, j], b.dQuu[:, j], b.dK[:, j]), *blocks):
            fd = (a - c) / (2 * h)
            scale = max(1.0, np.abs(fd).max())
            assert np.abs(an - fd).max() < 1e-5 * scale


def _noisy(name, sigma=0.05, seed=0, constrained=False):
    p, s = make_system(name, constrained=constrained)
    solver = "ipddp" if constrained else "unconstrained"
    d = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(sigma), seed=seed,
                                  solver=solver, cfg=CFG)
    return p, s, d, solver


@pytest.mark.parametrize("name", ["cartpole", "arm2link"])
def test_gauss_newton_gradient_is_half_loss_gradient(name):
    p, s, d, solver = _noisy(name)
    th = s.theta_star * 1.05
    ev = evaluate(p, th, [d], solver, CFG)
    g = ev.system.J.T @ ev.system.r
    h = 1e-6
    for j in range(len(th)):
        e = np.zeros(len(th))
        e[j] = h * max(1.0, abs(th[j]))
        fd = (closed_loop_loss(p, th + e, [d], solver, CFG)
              - closed_loop_loss(p, th - e, [d], solver, CFG)) / (2 * e[j])
        assert abs(g[j] - fd / 2) < 1e-5 * max(1.0, np.abs(g).max())


@given(st.integers(0, 10_000), st.floats(0.0, 0.2))
@settings(max_examples=15, deadline=None)
def test_loss_vanishes_at_true_parameters(seed, sigma):
    p, s = make_system("scalar_example")
    d = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(sigma), seed=seed, cfg=CFG)
    assert closed_loop_loss(p, s.theta_star, [d], cfg=CFG) < 1e-24


def test_loss_vanishes_at_true_parameters_nonlinear():
    # active bounds make the condensed Hessian ~ lambda^2/mu, so each stage's
    # residual is zero only relative to that stage's curvature
    for name, con in (("cartpole", False), ("cartpole", True), ("arm2link", True)):
        p, s, d, solver = _noisy(name, 0.05, 3, con)
        ev = evaluate(p, s.theta_star, [d], solver, CFG, jacobian=False)
        r = ev.system.r.reshape(-1, p.n_u)
        scale = np.maximum(1.0, np.abs(ev.qbars[0].Quu).max(axis=(1, 2)))
        assert np.all(np.abs(r).max(axis=1) < 1e-12 * scale)


def test_residual_rejects_unsampled_stage():
    p, s = make_system("scalar_example")
    d = generate_closed_loop_demo(p, [1.0], s.x0, indices=[1], cfg=CFG)
    r = solve_ipddp(p, [1.0], s.x0, CFG)
    q = gradient_backward_ip(p, r.traj, [1.0], r.mu)
    with pytest.raises(KeyError):
        closed_loop_residual(q, d, r.traj, 0)
    with pytest.raises(ValueError):
        d.with_indices([2])


def test_lm_update_closed_forms():
    r = np.array([1.0, -2.0, 4.0])
    rs = ResidualSystem(r, np.eye(3))
    assert np.allclose(lm_update(rs, 1.0), r / 2)
    assert np.allclose(lm_update(rs, 0.0), r)
    J = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    rs = ResidualSystem(r, J)
    assert np.allclose(lm_update(rs, 0.0), np.linalg.lstsq(J, r, rcond=None)[0])
    delta, cand = lm_update(rs, 0.0, bounds=(np.zeros(2), np.ones(2)), theta=np.array([0.2, 0.2]))
    assert np.all(cand >= 0) and np.all(cand <= 1)
    with pytest.raises(SingularMatrixError):
        lm_update(ResidualSystem(r, np.zeros((3, 2))), 0.0)
    with pytest.raises(ValueError):
        lm_update(rs, -1.0)


def test_rank_diagnostic():
    assert rank_diagnostic(np.eye(3))[0] == 3
    J = np.array([[1.0, 2.0], [2.0, 4.0]])
    rank, info = rank_diagnostic(J)
    assert rank == 1 and not info["full_rank"]


def test_scalar_recovery_from_noisy_demo():
    p, s = make_system("scalar_example")
    add = np.array([[0.0], [0.05], [-0.03]])
    d = generate_closed_loop_demo(p, [1.0], s.x0, NoiseModel(0.0, add), cfg=CFG)
    res = run_closed_loop(p, [d], LMConfig([1.5], s.theta_lo, s.theta_hi, solver_cfg=CFG),
                          theta_star=s.theta_star)
    assert abs(res.theta[0] - 1.0) < 1e-8
    assert res.trace[-1]["param_residual"] < 1e-16
    losses = [row["loss_cl"] for row in res.trace if row["accepted"]]
    assert all(a >= b for a, b in zip(losses, losses[1:]))


def test_lqr_form_matches_general_residual():
    p, s = make_system("lqr_ioc", constrained=False)
    d = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(0.05), seed=2,
                                  indices=range(8), solver="unconstrained", cfg=CFG)
    th = s.theta_star * np.array([1.2, 0.9, 1.1])
    a = lqr_residual_jacobian(p, d, th, CFG)
    b = evaluate(p, th, [d], "unconstrained", CFG).system
    assert np.abs(a.r - b.r).max() < 1e-8
    assert np.abs(a.J - b.J).max() < 1e-8 * max(1.0, np.abs(b.J).max())
    pc, _ = make_system("lqr_ioc")
    with pytest.raises(ValueError):
        lqr_residual_jacobian(pc, d, th, CFG)


def test_solver_restriction_and_config_checks():
    p, s = make_system("scalar_example")
    with pytest.raises(ValueError):
        generate_closed_loop_demo(p, [1.0], s.x0, solver="active-set")
    with pytest.raises(ValueError):
        NoiseModel(-0.1)
    with pytest.raises(ValueError):
        LMConfig([1.0], [2.0], [1.0])
