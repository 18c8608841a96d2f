"""Solve the N-player Nash system on a grid and compare with the exact Riccati solution.

For the quadratic model the Nash system reduces to matrix Riccati equations,
which give an exact reference for the finite-difference solver.
"""

from mfgc import Grid, LqSpec, derivative_decay_report, lq_model, solve_nash_grid, solve_nash_riccati
from mfgc.experiments import riccati_grid_error

model = lq_model(LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))
for n in (33, 65):
    grid = Grid.for_problem(4.0, n, 1.0, 2)
    field = solve_nash_grid(model, 2, grid)
    err = riccati_grid_error(field, solve_nash_riccati(model, 2, dt=1e-3))
    print(f"n={n:<3} dt={grid.dt:.2e}  sup error on the inner half-grid: {err:.2e}")

grid = Grid.for_problem(4.0, 17, 1.0, 3)
field = solve_nash_grid(model, 3, grid)
print("\nderivative norms of player 1's value, N = 3:")
for row in derivative_decay_report(field):
    idx = [v for v in (row["i"], row["j"], row["k"]) if v is not None]
    print(f"  indices {idx}: {row['norm']:.4f}")
