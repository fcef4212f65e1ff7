"""Acceptance criteria 1-12, one test each.

Every test prints one ``criterion N: PASS/FAIL`` line (also repeated in the
terminal summary).  Wall-clock limits are measured after a warm-up call so
that one-off derivative compilation is excluded.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import fd_rel_error, fd_trajectory, record_criterion
from ddp_irl.benchmarks import make_system, parameter_residual
from ddp_irl.gradient import (gradient_activeset, gradient_backward_ip, gradient_barrier,
                              gradient_ip, gradient_unconstrained, pdp_oracle_gradient)
from ddp_irl.irl_closed import (ClosedLoopDemo, LMConfig, NoiseModel, evaluate,
                                generate_closed_loop_demo, run_closed_loop)
from ddp_irl.irl_open import OpenLoopConfig, OpenLoopDemo, run_open_loop
from ddp_irl.ioc_linear import (build_recovery_system, generate_ioc_demo, rank_profile,
                                recover_parameters)
from ddp_irl.solver import IpddpConfig, solve_active_set, solve_ipddp, solve_unconstrained

NONLINEAR = ("cartpole", "arm2link", "quadrotor", "rocket")
TIGHT = IpddpConfig(tol=1e-11)


def _theta0(spec, seed, scale=0.2):
    rng = np.random.default_rng(10_000 + seed)
    return spec.clamp(spec.theta_star * (1 + scale * rng.uniform(-1, 1, spec.n_theta)))


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _riccati(A, B, Q, R, N):
    P, Ks = np.zeros_like(Q), []
    for _ in range(N):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
        Ks.append(K)
    return Ks[::-1]


# --------------------------------------------------------------------------

def test_criterion_01_scalar_example_values():
    p, s = make_system("scalar_example")
    errs, walls = [], []
    for solve in (solve_ipddp, solve_unconstrained):
        solve(p, [1.0], [1.0])
        r, wall = _timed(lambda: solve(p, [1.0], [1.0]))
        errs.append(max(np.abs(r.traj.controls.ravel() - [-0.6, -0.2]).max(),
                        np.abs(r.traj.states.ravel() - [1.0, 0.4, 0.2]).max()))
        walls.append(wall)
    ok = max(errs) < 1e-8 and max(walls) < 0.1
    record_criterion(1, ok, f"max err {max(errs):.1e} (<1e-8), max runtime {max(walls):.4f}s (<0.1s)")
    assert ok


def test_criterion_02_noisy_demo_formulas():
    p, s = make_system("scalar_example")
    worst = 0.0
    for x0, w1, w2 in ((1.0, 0.05, -0.03), (2.0, -0.1, 0.07), (0.5, 0.2, 0.0)):
        add = np.array([[0.0], [w1], [w2]])
        d = generate_closed_loop_demo(p, [1.0], [x0], NoiseModel(0.0, add), cfg=TIGHT)
        worst = max(worst, abs(d.controls[1, 0] - (-x0 / 5 - w1 / 2)),
                    abs(d.states[2, 0] - (x0 / 5 + w1 / 2 + w2)))
    ok = worst < 1e-12
    record_criterion(2, ok, f"max deviation of u1**, x2** from closed forms {worst:.1e} (<1e-12)")
    assert ok


def test_criterion_03_open_loop_offset():
    p, s = make_system("scalar_example")
    cfg_s = IpddpConfig(tol=1e-12)
    x0, w1, w2 = 1.0, 0.05, -0.03
    add = np.array([[0.0], [w1], [w2]])
    d = generate_closed_loop_demo(p, [1.0], [x0], NoiseModel(0.0, add), cfg=cfg_s)
    cfg = OpenLoopConfig([1.0], 2.0, s.theta_lo, s.theta_hi, t_max=300, grad_tol=1e-14,
                         solver_cfg=cfg_s)
    res = run_open_loop(p, [OpenLoopDemo.from_closed_loop(d)], cfg)

    def gain(th):                        # u0 = -gain(theta) x0
        return (2 * th + 1) / (2 * th + 3)

    learned = gain(res.theta[0]) - gain(1.0)
    want = -(3 * w1 + w2) / (5 * x0)

    # analytic loss in the first-stage increment s0 = u0 + 0.6 x0
    def loss(s0):
        u0 = -0.6 * x0 + s0
        x1 = x0 + u0
        return ((d.controls[0, 0] - u0) ** 2 + (d.states[1, 0] - x1) ** 2
                + (d.controls[1, 0] + x1 / 2) ** 2 + (d.states[2, 0] - x1 / 2) ** 2)

    analytic = -minimize_scalar(loss, tol=1e-14).x / x0
    err = max(abs(learned - want), abs(analytic - want))
    ok = err < 1e-6
    record_criterion(3, ok, f"offset learned {learned:.9f}, analytic {analytic:.9f}, "
                            f"formula {want:.9f}; err {err:.1e} (<1e-6)")
    assert ok


@pytest.mark.slow
def test_criterion_04_gradient_equivalence():
    # a comparison is the computation of the gradients being compared on a shared
    # solved trajectory; the solve time is reported alongside but not limited
    lines, ok = [], True
    for name in NONLINEAR:
        pu, su = make_system(name, constrained=False)
        pc, sc = make_system(name)
        assert pu.N <= 40
        r_u, t_solve_u = _timed(lambda: solve_unconstrained(pu, su.theta_star, su.x0, TIGHT))
        gradient_unconstrained(pu, r_u.traj, su.theta_star)             # warm-up

        def unc():
            G = gradient_unconstrained(pu, r_u.traj, su.theta_star)
            return G.max_abs_diff(pdp_oracle_gradient(pu, r_u.traj, su.theta_star))

        d_unc, t_unc = _timed(unc)

        def solves():
            return (solve_ipddp(pc, sc.theta_star, sc.x0, TIGHT),
                    solve_active_set(pc, sc.theta_star, sc.x0, TIGHT))

        (ip, aset), t_solve_c = _timed(solves)
        gradient_ip(pc, ip.traj, sc.theta_star, ip.mu)                  # warm-up
        gradient_barrier(pc, ip.traj, sc.theta_star, ip.mu)
        gradient_activeset(pc, aset.traj, sc.theta_star, aset.active)

        def con():
            Gi = gradient_ip(pc, ip.traj, sc.theta_star, ip.mu)
            Gb = gradient_barrier(pc, ip.traj, sc.theta_star, ip.mu)
            Ga = gradient_activeset(pc, aset.traj, sc.theta_star, aset.active)
            return max(Gi.max_abs_diff(Gb), Gi.max_abs_diff(Ga), Gb.max_abs_diff(Ga))

        d_con, t_con = _timed(con)
        good = d_unc < 1e-8 and d_con < 1e-5 and t_unc < 10 and t_con < 10 and ip.mu <= 1e-8
        ok &= good
        lines.append(f"{name}: ddp-oracle {d_unc:.1e} ({t_unc:.2f}s), ip/barrier/as "
                     f"{d_con:.1e} ({t_con:.2f}s; solves {t_solve_u + t_solve_c:.1f}s)")
    record_criterion(4, ok, "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_05_finite_difference_validation():
    # every flavor against central differences of full re-solves; error per entry
    # in units of max(1, |reference|), so < 1e-3 covers max(1e-3 abs, 1e-3 rel)
    worst, where = 0.0, ""
    for name in ("scalar_example", "lqr_ioc") + NONLINEAR:
        pc, s = make_system(name)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            th = s.clamp(s.theta_star * (1 + 0.05 * rng.uniform(-1, 1, s.n_theta)))
            errs = {}
            r = solve_ipddp(pc, th, s.x0, TIGHT)
            F = fd_trajectory(lambda *a: solve_ipddp(*a, TIGHT), pc, s.x0, th)
            errs["ip"] = fd_rel_error(gradient_ip(pc, r.traj, th, r.mu), F)
            errs["pdp-oracle"] = fd_rel_error(pdp_oracle_gradient(pc, r.traj, th, mu=r.mu), F)
            if pc.has_constraints:
                errs["barrier"] = fd_rel_error(gradient_barrier(pc, r.traj, th, r.mu), F)
                a = solve_active_set(pc, th, s.x0, TIGHT)
                Fa = fd_trajectory(lambda *a_: solve_active_set(*a_, TIGHT), pc, s.x0, th)
                errs["active-set"] = fd_rel_error(gradient_activeset(pc, a.traj, th, a.active), Fa)
            pu, su = make_system(name, constrained=False)
            thu = th[:su.n_theta]
            ru = solve_unconstrained(pu, thu, s.x0, TIGHT)
            Fu = fd_trajectory(lambda *a_: solve_unconstrained(*a_, TIGHT), pu, s.x0, thu)
            errs["unconstrained"] = fd_rel_error(gradient_unconstrained(pu, ru.traj, thu), Fu)
            fl, e = max(errs.items(), key=lambda kv: kv[1])
            if e > worst:
                worst, where = e, f"{name} seed {seed} {fl}"
    ok = worst < 1e-3
    record_criterion(5, ok, f"worst scaled error {worst:.1e} at {where} (<1e-3), "
                            f"6 benchmarks x 5 parameter draws")
    assert ok


def test_criterion_06_riccati_oracle():
    p, s = make_system("lqr_ioc", constrained=False)
    A, B = s.constants["A"], s.constants["B"]

    def gains(th):                       # stage cost x'diag(w)x + w_u u^2
        return np.array(_riccati(A, B, 2 * np.diag(th[:2]), 2 * th[2:3, None], p.N))

    def traj(th):
        x, xs, us = s.x0.copy(), [s.x0.copy()], []
        for K in gains(th):
            u = K @ x
            x = A @ x + B @ u
            xs.append(x)
            us.append(u)
        return np.array(xs), np.array(us)

    th = s.theta_star
    r = solve_unconstrained(p, th, s.x0)
    d_gain = np.abs(r.gains.K - gains(th)).max()
    G = gradient_unconstrained(p, r.traj, th)
    h, d_grad = 1e-6, 0.0
    for j in range(p.n_theta):
        e = np.zeros(p.n_theta)
        e[j] = h
        (xa, ua), (xb, ub) = traj(th + e), traj(th - e)
        d_grad = max(d_grad, np.abs(G.dx[..., j] - (xa - xb) / (2 * h)).max(),
                     np.abs(G.du[..., j] - (ua - ub) / (2 * h)).max())
    ok = d_gain < 1e-10 and d_grad < 1e-6
    record_criterion(6, ok, f"gain diff {d_gain:.1e} (<1e-10), gradient vs differenced "
                            f"Riccati {d_grad:.1e} (<1e-6)")
    assert ok


@pytest.mark.slow
def test_criterion_07_closed_loop_convergence():
    lines, ok = [], True
    for name, constrained in (("scalar_example", True), ("cartpole", False),
                              ("arm2link", False)):
        p, s = make_system(name, constrained=constrained)
        solver = "unconstrained" if not p.has_constraints else "ipddp"
        demo = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(0.0),
                                         solver=solver, cfg=TIGHT)
        assert len(demo.indices) * p.n_u >= p.n_theta
        evaluate(p, s.theta_star, [demo], solver, TIGHT)           # warm-up
        for seed in range(5):
            cfg = LMConfig(_theta0(s, seed), s.theta_lo, s.theta_hi, t_max=50,
                           solver=solver, solver_cfg=TIGHT)
            res, wall = _timed(lambda: run_closed_loop(p, [demo], cfg, s.theta_star))
            first = next((row["t"] for row in res.trace if row["param_residual"] < 1e-6), None)
            good = first is not None and first <= 50 and wall < 60
            ok &= good
            lines.append(f"{name}/{seed}: it {first} {wall:.1f}s")
    record_criterion(7, ok, "iterations to residual <1e-6 (<=50, <60s): " + ", ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_08_closed_beats_open_loop():
    lines, ok = [], True
    for name, eta in (("scalar_example", 2.0), ("cartpole", 1e-3)):
        p, s = make_system(name, constrained=False)
        solver = "unconstrained"
        ol_res, cl_res = [], []
        for seed in range(20):
            demo = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(0.05),
                                             seed=seed, solver=solver, cfg=TIGHT)
            th0 = _theta0(s, seed)
            ol = run_open_loop(p, [OpenLoopDemo.from_closed_loop(demo)], OpenLoopConfig(
                th0, eta, s.theta_lo, s.theta_hi, t_max=200, solver=solver, solver_cfg=TIGHT))
            cl = run_closed_loop(p, [demo], LMConfig(th0, s.theta_lo, s.theta_hi, t_max=50,
                                                     solver=solver, solver_cfg=TIGHT))
            ol_res.append(parameter_residual(ol.theta, s.theta_star))
            cl_res.append(parameter_residual(cl.theta, s.theta_star))
        m_ol, m_cl = np.median(ol_res), np.median(cl_res)
        ok &= m_cl < m_ol
        lines.append(f"{name}: median closed {m_cl:.1e} vs open {m_ol:.1e}")
    record_criterion(8, ok, "; ".join(lines) + " (20 seeds, sigma 0.05)")
    assert ok


@pytest.mark.slow
def test_criterion_09_rank_and_sample_length():
    p, s = make_system("arm2link", constrained=False)
    need = -(-p.n_theta // p.n_u)
    demo = generate_closed_loop_demo(p, s.theta_star, s.x0, NoiseModel(0.0),
                                     solver="unconstrained", cfg=TIGHT)
    th0 = _theta0(s, 0)
    rows = {}
    for L in range(1, p.N + 1):
        res = run_closed_loop(p, [demo.with_indices(range(L))], LMConfig(
            th0, s.theta_lo, s.theta_hi, t_max=50, solver="unconstrained", solver_cfg=TIGHT),
            s.theta_star)
        last = res.trace[-1]
        rows[L] = (last["rank"], last["loss_cl"], last["param_residual"])
    rank2, loss2, res2 = rows[2]
    first_full = min(L for L, r in rows.items() if r[0] == p.n_theta)
    after = max(r[2] for L, r in rows.items() if L >= first_full)
    ok = (2 < need and loss2 < 1e-8 and res2 > 1e-3 and first_full == need and after < 1e-6)
    record_criterion(9, ok, f"arm2link: |S|=2 loss {loss2:.1e} (<1e-8), residual {res2:.1e} "
                            f"(>1e-3); first full rank at |S|={first_full} "
                            f"(ceil(n_theta/n_u)={need}); worst residual after {after:.1e} (<1e-6)")
    assert ok


def test_criterion_10_constrained_ioc():
    p, s = make_system("lqr_ioc")
    th = s.theta_star
    generate_ioc_demo(p, th, s.x0, 1e-2)                               # warm-up

    def run():
        profile = rank_profile(p, {mu: generate_ioc_demo(p, th, s.x0, mu)
                                   for mu in (1e-2, 1e-4, 1e-6)}, range(1, p.N), th)
        demo = generate_ioc_demo(p, th, s.x0, 1e-6)
        res = []
        for mu in (1e-2, 1e-4, 1e-6):
            rec = recover_parameters(build_recovery_system(demo, p, mu), p.n_theta, p.n_x)
            res.append(parameter_residual(rec.theta, th))
        return profile, res

    (profile, res), wall = _timed(run)
    full = p.n_theta + p.n_x
    rank_ok = all((r["rank"] < full) if r["length"] < 5 else (r["rank"] == full)
                  for r in profile)
    ok = rank_ok and res[0] > res[1] > res[2] and res[2] < 1e-4 and wall < 5
    record_criterion(10, ok, f"rank threshold at |S|=5 {'holds' if rank_ok else 'fails'}; "
                             f"residual over mu 1e-2/1e-4/1e-6: "
                             f"{res[0]:.1e} > {res[1]:.1e} > {res[2]:.1e} (<1e-4); {wall:.2f}s (<5s)")
    assert ok


def test_criterion_11_linear_complexity():
    # repetitions are interleaved across horizons so that machine-load drift
    # hits every N alike; each timed call directly follows an untimed one so
    # it runs with warm caches, and the minimum per N is the least disturbed run
    Ns = (10, 20, 40, 80)
    jobs = []
    for N in Ns:
        p, s = make_system("cartpole", {"N": N}, constrained=False)
        r = solve_ipddp(p, s.theta_star, s.x0, IpddpConfig(tol=1e-10))
        job = (lambda p=p, t=r.traj, th=s.theta_star: gradient_unconstrained(p, t, th))
        job()                                                          # warm-up
        jobs.append(job)
    reps = [[] for _ in Ns]
    for _ in range(40):
        for i, job in enumerate(jobs):
            job()
            reps[i].append(_timed(job)[1])
    walls = [min(r) for r in reps]
    slope = float(np.polyfit(np.log(Ns), np.log(walls), 1)[0])
    ok = 0.8 <= slope <= 1.2
    record_criterion(11, ok, f"log-log slope {slope:.3f} in [0.8, 1.2]; "
                             + ", ".join(f"N={N}: {w * 1e3:.2f}ms" for N, w in zip(Ns, walls)))
    assert ok


def test_criterion_12_linear_form_identity():
    p, s = make_system("lqr_ioc")
    th, worst = s.theta_star, 0.0
    for mu in (1e-2, 1e-4, 1e-6):
        traj = generate_ioc_demo(p, th, s.x0, mu)
        cfg = IpddpConfig(tol=1e-12, mu_floor=mu, mu_init=mu)
        for m in (4, 9, 30):
            demo = ClosedLoopDemo(np.arange(m + 1), traj.states, traj.controls, traj,
                                  np.zeros((p.N, p.n_u, p.n_x)), th)
            ev = evaluate(p, th, [demo], "ipddp", cfg, jacobian=False)
            v_tail = ev.qbars[0].Vy[m + 1][p.n_theta:]
            rs = build_recovery_system(traj, p, mu, m)
            lin = rs.J1 @ th + rs.J2 @ v_tail + rs.J3
            worst = max(worst, float(np.abs(ev.system.r - lin).max()))
    ok = worst < 1e-8
    record_criterion(12, ok, f"max |closed-loop residual - (J1 theta + J2 V + J3)| "
                             f"{worst:.1e} (<1e-8) over 3 mu x 3 lengths")
    assert ok
