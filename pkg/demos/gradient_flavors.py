"""Trajectory derivatives on the constrained cartpole, four ways.

Interior point (duals eliminated), barrier, active set and the dense KKT
oracle all differentiate the same solution; they agree up to the interior-point
perturbation mu, and each matches central differences of full re-solves.
"""

import time

import numpy as np

from ddp_irl import make_system, solve_active_set, solve_ipddp, trajectory_gradient
from ddp_irl.solver import IpddpConfig

cfg = IpddpConfig(tol=1e-11)
p, spec = make_system("cartpole")
th = spec.theta_star
ip = solve_ipddp(p, th, spec.x0, cfg)
aset = solve_active_set(p, th, spec.x0, cfg)
print("active bound rows per stage:", aset.active.sum(axis=1))

grads = {}
for flavor, res in (("ip", ip), ("barrier", ip), ("active-set", aset), ("pdp-oracle", ip)):
    t0 = time.perf_counter()
    grads[flavor] = trajectory_gradient(p, res.traj, th, flavor, mu=res.mu, active=res.active)
    print(f"{flavor:12s} {1e3 * (time.perf_counter() - t0):7.1f} ms")

for a in grads:
    for b in grads:
        if a < b:
            print(f"max |{a} - {b}| = {grads[a].max_abs_diff(grads[b]):.2e}")

j = p.theta_names.index("l") if "l" in p.theta_names else 2
h = 1e-5
e = np.zeros_like(th)
e[j] = h
fd = (solve_ipddp(p, th + e, spec.x0, cfg).traj.controls
      - solve_ipddp(p, th - e, spec.x0, cfg).traj.controls) / (2 * h)
print(f"du/d{p.theta_names[j]} vs central differences: "
      f"{np.abs(grads['ip'].du[..., j] - fd).max():.2e}")
