"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and time limits are the contract values; the slow criteria
(grid Nash solves and the Picard solver) carry the ``slow`` marker.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from mfgc import (
    Grid,
    LqSpec,
    MasterLift,
    assemble_blocks,
    audit_discrete_M,
    audit_ll,
    convergence_report,
    jacobian_p,
    lq_model,
    master_residual,
    nonlinear_model,
    simulate_closed_loop,
    solve_aN,
    solve_master_lq,
    solve_nash_grid,
    solve_nash_riccati,
)
from mfgc.config import load_config
from mfgc.experiments import riccati_grid_error, run_experiment
from mfgc.fixedpoint import decay_profile
from mfgc.meanfield import quantile_cloud
from mfgc.utils import loglog_slope

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
COUPLED = LqSpec(lam=0.25, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line, then assert the criterion and its time limit."""
    start = time.perf_counter()

    def report(number, passed, detail, limit):
        elapsed = time.perf_counter() - start
        ok = bool(passed) and elapsed < limit
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{elapsed:.1f} s of {limit:.0f} s]")
        assert passed, detail
        assert elapsed < limit, f"criterion {number} took {elapsed:.1f} s, limit {limit} s"

    return report


def _run(name, out, **overrides):
    cfg = load_config(CONFIGS / f"{name}.cfg")
    cfg.values.update(overrides)
    return run_experiment(cfg, out, workers=4)


def test_criterion_01_lq_fixed_point_exactness(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for lam in (0.25, -0.25, 0.5, -0.5):
        model = lq_model(LqSpec(lam=lam))
        for N in range(2, 65):
            p = rng.normal(size=N)
            M = np.eye(N) + lam / (N - 1) * (np.ones((N, N)) - np.eye(N))
            direct = np.linalg.solve(M, -p)
            got = solve_aN(model, rng.normal(size=(N, 1)), p[:, None]).actions[:, 0]
            worst = max(worst, float(np.max(np.abs(got - direct))))
    verdict(1, worst < 1e-10, f"max deviation from direct solve {worst:.2e} (< 1e-10)", 1.0)


def test_criterion_02_jacobian_identity(verdict):
    model = nonlinear_model(0.1, LqSpec(lam=0.5, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        x, p = rng.normal(size=(32, 1)), rng.normal(size=(32, 1))
        a = solve_aN(model, x, p).actions
        M = assemble_blocks(model, x, a, "M").dense()
        worst = max(worst, float(np.max(np.abs(M @ jacobian_p(model, x, a).dense() + np.eye(32)))))
    verdict(2, worst < 1e-8, f"max |M D_p a + I| {worst:.2e} (< 1e-8)", 5.0)


def test_criterion_03_finite_difference_agreement(verdict):
    model = nonlinear_model(0.1, LqSpec(lam=0.5, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5))
    rng = np.random.default_rng(3)
    h, N, worst = 1e-5, 5, 0.0
    # D_a L does not depend on x in the bundled families, so D_x a vanishes; probe D_p a
    for _ in range(20):
        x, p = rng.normal(size=(N, 1)), rng.normal(size=(N, 1))
        a = solve_aN(model, x, p, tol=1e-14).actions
        J = jacobian_p(model, x, a).dense()
        fd = np.empty_like(J)
        for j in range(N):
            cols = []
            for s in (h, -h):
                pp = p.copy()
                pp[j] += s
                cols.append(solve_aN(model, x, pp, tol=1e-14, method="newton").actions[:, 0])
            fd[:, j] = (cols[0] - cols[1]) / (2 * h)
        worst = max(worst, float(np.max(np.abs(J - fd) / np.abs(J))))
    verdict(3, worst < 1e-4, f"max entrywise relative error {worst:.2e} over 20 probes (< 1e-4)", 10.0)


def test_criterion_04_decay_scaling(verdict, tmp_path):
    out = _run("fixedpoint_decay", tmp_path)
    first = out.bands["first_order_slope"]
    second = out.bands["second_order_slope"]
    detail = f"first-order slope {first['value']:.3f} in [-1.3, -0.7], second-order distinct slope {second['value']:.3f} in [-2.5, -1.5]"
    verdict(4, first["passed"] and second["passed"], detail, 60.0)


def test_criterion_05_discrete_monotonicity(verdict):
    models = {
        "lq": lq_model(COUPLED),
        "lq-tanh": nonlinear_model(0.1, LqSpec(lam=0.5, c_x=0.5, q_x=0.5, c_g=1.0, q_g=0.5)),
    }
    lows = {}
    for name, model in models.items():
        for N in (4, 16, 64):
            lows[(name, N)] = audit_discrete_M(model, N, samples=100, seed=N).worst_value
    negative = audit_discrete_M(nonlinear_model(-0.2, LqSpec(lam=-0.9)), 4, samples=100)
    positive = min(lows.values())
    detail = f"min lambda_min over monotone models {positive:.3f} (> 0); negative control {negative.worst_value:.3f} (< 0)"
    verdict(5, positive > 0 and negative.worst_value < 0 and negative.witnesses, detail, 30.0)


def test_criterion_06_ll_audit_sign(verdict):
    rng = np.random.default_rng(6)
    good = audit_ll(lq_model(LqSpec(lam=0.5)), "L", samples=200)
    bad = audit_ll(lq_model(LqSpec(lam=-0.5)), "L", samples=200)
    from mfgc.monotonicity import ll_functional

    X, A, Xp, Ap = (rng.normal(size=(50, 8, 1)) for _ in range(4))
    gap = (A.mean(axis=1) - Ap.mean(axis=1))[:, 0]
    oracle = max(float(np.max(np.abs(ll_functional(lq_model(LqSpec(lam=lam)), "L", X, A, Xp, Ap) - lam * gap**2)))
                  for lam in (0.5, -0.5))
    ok = good.passed and not bad.passed and bool(bad.witnesses) and oracle < 1e-12
    verdict(6, ok, f"lambda>0 worst {good.worst_value:.2e}, lambda<0 worst {bad.worst_value:.2e} with witness, oracle gap {oracle:.1e}", 10.0)


@pytest.mark.slow
def test_criterion_07_nash_vs_riccati(verdict):
    model = lq_model(COUPLED)
    sol = solve_nash_riccati(model, 2, dt=1e-3)
    fine = Grid.for_problem(4.0, 129, 1.0, 2)
    # the coarse grid runs at twice the fine step so both h and dt halve together
    coarse = Grid.for_problem(4.0, 65, 1.0, 2, dt=2 * fine.dt)
    e65 = riccati_grid_error(solve_nash_grid(model, 2, coarse), sol)
    e129 = riccati_grid_error(solve_nash_grid(model, 2, fine), sol)
    ratio = e65 / e129
    detail = f"error at n=65 {e65:.2e} (<= 5e-3), refinement ratio {ratio:.2f} in [1.5, 3]"
    verdict(7, e65 <= 5e-3 and 1.5 <= ratio <= 3.0, detail, 120.0)


@pytest.mark.slow
def test_criterion_08_offdiagonal_gradient_trend(verdict, tmp_path):
    out = _run("nash_solve", tmp_path)
    band = out.bands["offdiag_gradient_decreasing"]
    norms = ", ".join(f"{v:.3f}" for v in band["value"])
    verdict(8, band["passed"], f"max off-diagonal gradient over N=2,3,4: {norms} (strictly decreasing)", 900.0)


def test_criterion_09_master_residual_and_convergence(verdict):
    model = lq_model(COUPLED)
    rng = np.random.default_rng(9)
    probes = [(rng.uniform(0, 1), rng.normal(size=1), rng.normal(size=3)) for _ in range(40)]
    medians = []
    for N in (2, 3, 4):
        L = MasterLift(solve_nash_riccati(model, N, dt=1e-3))
        # matched probes: the same (t, x) and the first N - 1 atoms of a common cloud
        rows = master_residual(L, [(t, x, c[: N - 1, None]) for t, x, c in probes])
        medians.append(float(np.median([r["residual"] for r in rows])))
    non_increasing = all(b <= a for a, b in zip(medians, medians[1:]))
    master = solve_master_lq(model)
    Ns = (2, 4, 8, 16)
    fields = {N: solve_nash_riccati(model, N, dt=1e-3) for N in Ns}
    conv_probes = [(t, np.array([x]), (lambda N, m=m, s=s: quantile_cloud(N - 1, m, s)))
                   for t, x, m, s in rng.uniform([0, -1, -0.5, 0.5], [0.9, 1, 0.5, 1.2], size=(20, 4))]
    errs = [r["err"] for r in convergence_report(fields, master, conv_probes)]
    slope = loglog_slope(1.0 / np.array(Ns), errs)
    detail = f"medians {', '.join(f'{m:.4f}' for m in medians)} non-increasing; error slope vs 1/N {slope:.3f} in [0.5, 1.5]"
    verdict(9, non_increasing and 0.5 <= slope <= 1.5, detail, 120.0)


def test_criterion_10_sde_moments(verdict, tmp_path):
    sol = solve_nash_riccati(lq_model(LqSpec()), 2, dt=1e-2)
    n = 10_000
    end = simulate_closed_loop(sol.model, sol, 0.0, np.array([0.3, -0.2]), n, 20, seed=10).paths[-1][..., 0]
    # zero drift: X_T = x0 + sqrt(2) W_T, so mean x0 and variance 2T
    z_mean = np.abs(end.mean(axis=0) - [0.3, -0.2]) / np.sqrt(2.0 / n)
    var = end.var(axis=0, ddof=1)
    z_var = np.abs(var - 2.0) / (2.0 * np.sqrt(2.0 / (n - 1)))
    out = _run("sde_norms", tmp_path)
    band = out.bands["norm_decreasing"]
    ok = np.all(z_mean < 3) and np.all(z_var < 3) and band["passed"]
    detail = (f"mean z-scores {np.max(z_mean):.2f}, variance z-scores {np.max(z_var):.2f} (< 3); "
              f"norms {', '.join(f'{v:.3f}' for v in band['value'])} decreasing")
    verdict(10, ok, detail, 60.0)


@pytest.mark.slow
def test_criterion_11_picard_moments(verdict, tmp_path):
    out = _run("mfg_picard", tmp_path)
    moment, gap = out.bands["moment_error"], out.bands["multistart_gap"]
    detail = f"moment error {moment['value']:.2e} (<= 1e-3), multi-start gap {gap['value']:.2e} (<= 5 tol)"
    verdict(11, moment["passed"] and gap["passed"], detail, 120.0)


def test_criterion_12_determinism(verdict, tmp_path):
    mismatched = []
    for name in ("fixedpoint_decay", "monotonicity_audit", "sde_norms"):
        for run in ("a", "b"):
            _run(name, tmp_path / name / run)
        for f in sorted((tmp_path / name / "a").iterdir()):
            if f.read_bytes() != (tmp_path / name / "b" / f.name).read_bytes():
                mismatched.append(f"{name}/{f.name}")
    verdict(12, not mismatched, f"byte-identical reruns; mismatches: {mismatched or 'none'}", 120.0)
