"""Audit the monotonicity conditions that make the equilibrium unique.

The coupled LQ model attracts players to the population mean, so it is
displacement monotone but not Lasry-Lions monotone. Flipping the attraction
into repulsion gives a Lasry-Lions monotone model instead.
"""

from mfgc import LqSpec, audit_discrete_M, audit_disp_G, audit_disp_L, audit_ll, compute_C_disp, lq_model

models = {
    "attracting (q > 0)": lq_model(LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5)),
    "repelling (q < 0)": lq_model(LqSpec(lam=0.25, c_x=0.5, q_x=-0.5, c_g=1.0, q_g=-0.5)),
    "negative coupling": lq_model(LqSpec(lam=-0.5)),
}
for name, model in models.items():
    print(f"== {name}")
    for rep in (audit_discrete_M(model, 16), audit_disp_L(model), audit_disp_G(model),
                audit_ll(model, "L"), audit_ll(model, "G"), compute_C_disp(model)):
        verdict = "holds " if rep.passed else "fails "
        print(f"  {rep.kind:<11} {verdict} worst={rep.worst_value:+.4f}  {rep.notes}")
