"""Solve the mean-field game of controls directly with a damped Picard iteration.

For the quadratic model the mean and variance of the equilibrium flow solve
two scalar ODEs, which the grid solution reproduces.
"""

import numpy as np

from mfgc import Grid, LqSpec, lq_model, lq_moment_flow, solve_mfgc_picard

model = lq_model(LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))
grid = Grid.for_problem(5.0, 201, 1.0, 1)
sol = solve_mfgc_picard(model, grid, tol=1e-5, m0_mean=1.0, m0_std=0.5, particles=64)
mean, var = sol.moments()
ref_mean, ref_var = lq_moment_flow(model, sol.times, 1.0, 0.5)
print(f"Picard iterations: {sol.iterations}")
for k in np.linspace(0, sol.times.size - 1, 5).astype(int):
    print(f"t={sol.times[k]:.2f}  mean {mean[k]:+.4f} (ODE {ref_mean[k]:+.4f})  var {var[k]:.4f} (ODE {ref_var[k]:.4f})")
a = sol.action_flow(0).a[:, 0]
print(f"initial mean action {a.mean():+.4f}")
