"""Open- versus closed-loop learning from noisy feedback demonstrations.

Demonstrations are produced by the optimal feedback policy at theta* acting on
a system with multiplicative process noise.  Both learners start from the same
perturbed parameters and see the same data.
"""

import numpy as np

from ddp_irl import (LMConfig, NoiseModel, OpenLoopConfig, OpenLoopDemo, generate_closed_loop_demo,
                     make_system, parameter_residual, run_closed_loop, run_open_loop)
from ddp_irl.solver import IpddpConfig

cfg = IpddpConfig(tol=1e-10)
p, spec = make_system("cartpole", constrained=False)
rng = np.random.default_rng(0)
for seed in range(3):
    demo = generate_closed_loop_demo(p, spec.theta_star, spec.x0, NoiseModel(0.05), seed=seed,
                                     solver="unconstrained", cfg=cfg)
    th0 = spec.clamp(spec.theta_star * (1 + 0.2 * rng.uniform(-1, 1, spec.n_theta)))
    ol = run_open_loop(p, [OpenLoopDemo.from_closed_loop(demo)], OpenLoopConfig(
        th0, 1e-3, spec.theta_lo, spec.theta_hi, t_max=200, solver="unconstrained",
        solver_cfg=cfg))
    cl = run_closed_loop(p, [demo], LMConfig(th0, spec.theta_lo, spec.theta_hi,
                                             solver="unconstrained", solver_cfg=cfg))
    print(f"seed {seed}: start {parameter_residual(th0, spec.theta_star):.2e}  "
          f"open loop {parameter_residual(ol.theta, spec.theta_star):.2e}  "
          f"closed loop {parameter_residual(cl.theta, spec.theta_star):.2e}")
