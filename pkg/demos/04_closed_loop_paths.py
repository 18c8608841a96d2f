"""Simulate equilibrium trajectories and measure how much a player's value depends on the others.

The energy of the off-diagonal gradient along equilibrium paths decreases
as the number of players grows.
"""

import numpy as np

from mfgc import LqSpec, lq_model, offdiag_energy_norm, simulate_closed_loop, solve_nash_riccati

model = lq_model(LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))
for N in (2, 3, 4, 8):
    sol = solve_nash_riccati(model, N, dt=1e-3)
    x0 = [s * np.linspace(-1, 1, N) for s in (0.5, 1.0, 1.5)]
    norm = offdiag_energy_norm(model, sol, x0, n_paths=2000, n_steps=50, seed=7)
    batch = simulate_closed_loop(model, sol, 0.0, x0[1], 2000, 50, seed=7)
    spread = batch.paths[-1].std(axis=0).mean()
    print(f"N={N}: off-diagonal energy {norm:.4f}, terminal spread {spread:.3f}")
