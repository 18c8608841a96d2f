"""Solve the joint best-response fixed point and watch cross-player sensitivities shrink with N.

Each player's action depends on everyone's costate through the mean action.
The direct effect of player j's costate on player i's action is about 1/N,
and the effect of two distinct other players is about 1/N^2.
"""

import numpy as np

from mfgc import LqSpec, higher_derivatives, jacobian_p, nonlinear_model, solve_aN
from mfgc.fixedpoint import decay_profile

model = nonlinear_model(0.1, LqSpec(lam=0.5, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))

print("N   residual   max_{i!=j} |D_{p^j} a^i|   N * that")
for N in (8, 16, 32, 64):
    x, p = decay_profile(N, seed=1)
    res = solve_aN(model, x, p)
    J = jacobian_p(model, x, res.actions).dense()
    off = np.max(np.abs(J - np.diag(np.diag(J))))
    print(f"{N:<3} {res.residual:.1e}    {off:.4e}                 {N * off:.3f}")

print("\nsecond derivatives D_{p^j p^k} a^1 with 1, j, k distinct, maximum over four random profiles:")
for N in (8, 16, 32, 64):
    peak = max(higher_derivatives(model, *decay_profile(N, seed=s), 2, [(0, 1, 2)])[0]["norm"] for s in range(4))
    print(f"N={N:<3} norm={peak:.3e}  norm * N^2={peak * N**2:.3f}")
