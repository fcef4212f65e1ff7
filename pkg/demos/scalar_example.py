"""Scalar example: solve, perturb the executed policy, and learn theta back.

The system is x+ = x + u with stage cost (theta x^2 + u^2)/2 and terminal
cost x^2/2, horizon 2.  With theta = 1 and x0 = 1 the optimal plan is
u = (-0.6, -0.2).  Process noise enters after the feedback policy acts, so the
open-loop loss is biased while the closed-loop residual is not.
"""

import numpy as np

from ddp_irl import (LMConfig, NoiseModel, OpenLoopConfig, OpenLoopDemo, generate_closed_loop_demo,
                     make_system, run_closed_loop, run_open_loop, solve_ipddp)

p, spec = make_system("scalar_example")
res = solve_ipddp(p, [1.0], [1.0])
print("controls", res.traj.controls.ravel(), "states", res.traj.states.ravel())
print("feedback gains", res.gains.K.ravel())

w1, w2 = 0.05, -0.03
noise = NoiseModel(0.0, np.array([[0.0], [w1], [w2]]))
demo = generate_closed_loop_demo(p, [1.0], [1.0], noise)
print("noisy demo controls", demo.controls.ravel(), "states", demo.states.ravel())

ol = run_open_loop(p, [OpenLoopDemo.from_closed_loop(demo)],
                   OpenLoopConfig([1.5], 2.0, spec.theta_lo, spec.theta_hi, t_max=200))
cl = run_closed_loop(p, [demo], LMConfig([1.5], spec.theta_lo, spec.theta_hi))
print(f"open-loop estimate   theta = {ol.theta[0]:.6f}")
print(f"closed-loop estimate theta = {cl.theta[0]:.6f}  ({len(cl.trace) - 1} LM iterations)")
