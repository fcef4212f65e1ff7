"""Linear recovery of cost weights from one constrained demonstration.

The two-state system carries the bound |x1 u| <= 0.1.  Along an interior
solution the condensed stationarity conditions are linear in the weights and
in one unknown costate, so least squares recovers both once enough stages are
observed.  Without an active bound the constant term vanishes and the weights
are only known up to scale.
"""

from ddp_irl import make_system
from ddp_irl.ioc_linear import (build_recovery_system, generate_ioc_demo, rank_profile,
                                recover_parameters)

p, spec = make_system("lqr_ioc")
demo = generate_ioc_demo(p, spec.theta_star, spec.x0, 1e-4)
print("rank of the stacked blocks by sample length (mu = 1e-4):")
for row in rank_profile(p, {1e-4: demo}, range(1, 8), spec.theta_star):
    print(f"  |S| = {row['length']}: rank {row['rank']}, residual {row['residual']:.1e}")

demo = generate_ioc_demo(p, spec.theta_star, spec.x0, 1e-6)
print("one demonstration solved at mu = 1e-6, recovered with an assumed mu:")
for mu in (1e-2, 1e-4, 1e-6):
    rec = recover_parameters(build_recovery_system(demo, p, mu), p.n_theta, p.n_x)
    print(f"  mu = {mu:.0e}: theta = {rec.theta.round(6)}")
