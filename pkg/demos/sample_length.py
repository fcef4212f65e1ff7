"""How many observed stages are needed to pin down the parameters.

Each stage contributes n_u residual rows, so the residual Jacobian cannot have
full column rank before ceil(n_theta / n_u) stages.  Shorter samples are
matched perfectly by wrong parameters.
"""

import numpy as np

from ddp_irl import LMConfig, NoiseModel, generate_closed_loop_demo, make_system, run_closed_loop
from ddp_irl.solver import IpddpConfig

cfg = IpddpConfig(tol=1e-11)
p, spec = make_system("arm2link", constrained=False)
demo = generate_closed_loop_demo(p, spec.theta_star, spec.x0, solver="unconstrained", cfg=cfg,
                                 noise=NoiseModel(0.0))
th0 = spec.theta_star * 1.15
print(f"n_theta = {p.n_theta}, n_u = {p.n_u}")
print("length  rank  loss_cl     param_residual")
for L in range(1, 7):
    res = run_closed_loop(p, [demo.with_indices(np.arange(L))],
                          LMConfig(th0, spec.theta_lo, spec.theta_hi, solver="unconstrained",
                                   solver_cfg=cfg), spec.theta_star)
    last = res.trace[-1]
    print(f"{L:6d}  {last['rank']:4d}  {last['loss_cl']:.2e}  {last['param_residual']:.2e}")
