import numpy as np
import pytest

from mfgc import (
    Grid,
    LqSpec,
    NonLqModel,
    StabilityViolation,
    derivative_decay_report,
    load_field,
    lq_model,
    nash_residual,
    nonlinear_model,
    offdiag_energy_norm,
    save_field,
    simulate_closed_loop,
    solve_nash_grid,
    solve_nash_riccati,
)
from mfgc.experiments import riccati_grid_error

from conftest import COUPLED


def _small_grid(N=2, n=17, radius=3.0):
    return Grid.for_problem(radius, n, 1.0, N)


# -- grid ----------------------------------------------------------------------------


@pytest.mark.parametrize("radius,n,dt,steps", [(0.0, 17, 0.1, 1), (1.0, 8, 0.1, 1), (1.0, 17, 0.0, 1), (1.0, 5, 0.1, 1)])
def test_grid_rejects_bad_parameters(radius, n, dt, steps):
    with pytest.raises(ValueError):
        Grid(radius, n, dt, steps)


@pytest.mark.parametrize("N", [2, 3])
def test_grid_for_problem_respects_stability(N):
    g = Grid.for_problem(2.0, 21, 1.0, N)
    assert g.horizon == pytest.approx(1.0)
    assert g.dt <= g.max_dt(N, 0.0) * (1 + 1e-12)
    assert 0.0 in g.nodes


def test_cfl_breach_is_rejected(lq_coupled):
    g = Grid(3.0, 17, 0.5, 2)
    with pytest.raises(StabilityViolation):
        solve_nash_grid(lq_coupled, 2, g)


def test_grid_solver_argument_checks(lq_coupled):
    g = _small_grid()
    with pytest.raises(ValueError):
        solve_nash_grid(lq_coupled, 1, g)
    with pytest.raises(ValueError):
        solve_nash_grid(lq_model(LqSpec(dim=2)), 2, g)
    with pytest.raises(ValueError):
        solve_nash_grid(lq_model(COUPLED, horizon=2.0), 2, g)
    with pytest.raises(ValueError):
        solve_nash_grid(lq_coupled, 2, g, memory_budget=10)


# -- grid solver -----------------------------------------------------------------------


def test_zero_data_gives_zero_value():
    field = solve_nash_grid(lq_model(LqSpec()), 2, _small_grid())
    np.testing.assert_array_equal(field.values, 0.0)


@pytest.fixture(scope="module")
def coupled_field():
    return solve_nash_grid(lq_model(COUPLED), 2, _small_grid())


def test_terminal_slice_is_exact(coupled_field):
    model = coupled_field.model
    g = coupled_field.grid
    x1, x2 = np.meshgrid(g.nodes, g.nodes, indexing="ij")
    X = np.stack([x1, x2], axis=-1)[..., None]
    expected = model.G(X[..., 0, :], X[..., 1:, :])
    np.testing.assert_allclose(coupled_field.values[-1], expected, atol=1e-14)
    assert coupled_field.times[-1] == pytest.approx(1.0)


def test_value_is_finite_and_interpolates_nodes(coupled_field):
    assert np.all(np.isfinite(coupled_field.values))
    g = coupled_field.grid
    X = np.array([[[g.nodes[5]], [g.nodes[9]]]])
    assert coupled_field.value(0.0, X)[0] == pytest.approx(coupled_field.values[0][5, 9])


def test_grid_matches_riccati_on_inner_region(coupled_field):
    sol = solve_nash_riccati(coupled_field.model, 2, dt=1e-3)
    # explicit Euler is first order in time: the error is about dt
    assert riccati_grid_error(coupled_field, sol) < 2.5 * coupled_field.grid.dt


@pytest.mark.slow
def test_grid_matches_riccati_refined():
    model = lq_model(COUPLED)
    grid = Grid.for_problem(3.0, 65, 1.0, 2, dt=1.7756e-3)
    field = solve_nash_grid(model, 2, grid)
    assert riccati_grid_error(field, solve_nash_riccati(model, 2, dt=1e-3)) < 5e-3


def test_decay_report_classes(coupled_field):
    rows = derivative_decay_report(coupled_field)
    labels = {(r["j"], r["k"]) for r in rows}
    assert (0, None) in labels and (1, None) in labels
    assert all(r["norm"] >= 0 and r["norm_over_omega"] == r["norm"] / r["omega"] for r in rows)
    with pytest.raises(ValueError):
        derivative_decay_report(coupled_field, probes=[(1, 0)])


def test_decoupled_game_has_no_cross_dependence():
    field = solve_nash_grid(lq_model(LqSpec(c_x=1.0, c_g=1.0)), 2, _small_grid())
    rows = {(r["j"], r["k"]): r["norm"] for r in derivative_decay_report(field)}
    assert rows[(1, None)] < 1e-10
    assert rows[(0, None)] > 0.1


def test_save_load_roundtrip(tmp_path, coupled_field):
    path = save_field(coupled_field, tmp_path / "field.bin")
    back = load_field(path, coupled_field.model)
    np.testing.assert_array_equal(back.values, coupled_field.values)
    np.testing.assert_array_equal(back.times, coupled_field.times)
    assert back.grid == coupled_field.grid and back.N == 2


# -- Riccati oracle -------------------------------------------------------------------


@pytest.fixture(scope="module")
def riccati3():
    return solve_nash_riccati(lq_model(COUPLED), 3, dt=1e-3)


def test_riccati_terminal_condition(riccati3):
    model = riccati3.model
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3, 1))
    np.testing.assert_allclose(riccati3.value(1.0, X), model.G(X[:, 0], X[:, 1:]), atol=1e-12)


def test_riccati_solves_the_nash_system(riccati3):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 3, 1))
    for t in (0.0, 0.37, 0.9):
        assert np.max(np.abs(nash_residual(riccati3.model, riccati3, t, X))) < 1e-8


def test_riccati_is_symmetric_in_other_players(riccati3):
    rng = np.random.default_rng(2)
    X = rng.normal(size=(10, 3, 1))
    np.testing.assert_allclose(riccati3.value(0.2, X), riccati3.value(0.2, X[:, [0, 2, 1]]), atol=1e-13)
    # player i's value is player 1's value with i placed first
    np.testing.assert_allclose(riccati3.value(0.2, X, i=1), riccati3.value(0.2, X[:, [1, 0, 2]]), atol=1e-12)


def test_riccati_requires_lq(tanh_model):
    with pytest.raises(NonLqModel):
        solve_nash_riccati(tanh_model, 2)


# -- closed-loop SDE ------------------------------------------------------------------


def test_zero_drift_moments():
    sol = solve_nash_riccati(lq_model(LqSpec()), 2, dt=1e-2)
    batch = simulate_closed_loop(sol.model, sol, 0.0, np.zeros(2), 4000, 20, seed=3)
    end = batch.paths[-1]
    se_mean = np.sqrt(2.0 / end.shape[0])
    assert np.all(np.abs(end.mean(axis=0)) < 4 * se_mean)
    np.testing.assert_allclose(end.var(axis=0), 2.0, rtol=0.1)


def test_simulation_is_seeded(riccati3):
    a = simulate_closed_loop(riccati3.model, riccati3, 0.0, np.zeros(3), 50, 10, seed=11)
    b = simulate_closed_loop(riccati3.model, riccati3, 0.0, np.zeros(3), 50, 10, seed=11)
    np.testing.assert_array_equal(a.paths, b.paths)
    with pytest.raises(ValueError):
        simulate_closed_loop(riccati3.model, riccati3, 1.0, np.zeros(3), 5, 2)


def test_grid_simulation_counts_exits(coupled_field):
    batch = simulate_closed_loop(coupled_field.model, coupled_field, 0.0, np.array([2.9, -2.9]), 200, 10, seed=1)
    assert batch.exit_flags > 0
    with pytest.raises(ValueError):
        simulate_closed_loop(coupled_field.model, coupled_field, 0.0, np.array([5.0, 0.0]), 5, 2)


def test_offdiag_norm_vanishes_without_coupling():
    sol = solve_nash_riccati(lq_model(LqSpec(c_x=1.0, c_g=1.0)), 3, dt=1e-2)
    assert offdiag_energy_norm(sol.model, sol, [np.zeros(3)], n_paths=50, n_steps=10) < 1e-12


def test_offdiag_norm_positive_with_coupling(riccati3):
    assert offdiag_energy_norm(riccati3.model, riccati3, [np.zeros(3)], n_paths=100, n_steps=10) > 0
