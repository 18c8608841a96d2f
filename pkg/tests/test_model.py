import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgc import (
    InnerMaxDiverged,
    LqSpec,
    SizeMismatch,
    StateActionCloud,
    StateCloud,
    lq_model,
    make_model,
    moment,
    nonlinear_model,
    wasserstein,
)

H_FD = 1e-5
REL = 1e-5
B, NCLOUD, D = 100, 5, 2


def _models():
    spec = LqSpec(lam=0.4, c_x=0.7, q_x=0.6, c_g=1.2, q_g=0.8, dim=D)
    return {"lq": lq_model(spec, 0.3, 1.0), "lq-tanh": nonlinear_model(0.1, spec, 0.3, 1.0)}


MODELS = _models()


def _args(seed):
    rng = np.random.default_rng(seed)
    return [
        rng.normal(size=(B, D)),
        rng.normal(size=(B, D)),
        rng.normal(size=(B, NCLOUD, D)),
        rng.normal(size=(B, NCLOUD, D)),
    ]


def _fd_point(f, args, k):
    """Central difference of ``f`` in the Euclidean argument ``k``; column = direction."""
    cols = []
    for c in range(D):
        up = [a.copy() for a in args]
        dn = [a.copy() for a in args]
        up[k][..., c] += H_FD
        dn[k][..., c] -= H_FD
        cols.append((f(*up) - f(*dn)) / (2 * H_FD))
    return np.stack(cols, axis=-1)


def _fd_particle(f, args, k, j=1):
    """``n`` times the derivative of ``f`` in particle ``j`` of cloud argument ``k``."""
    cols = []
    for c in range(D):
        up = [a.copy() for a in args]
        dn = [a.copy() for a in args]
        up[k][:, j, c] += H_FD
        dn[k][:, j, c] -= H_FD
        cols.append(NCLOUD * (f(*up) - f(*dn)) / (2 * H_FD))
    return np.stack(cols, axis=-1)


def _close(num, ana):
    ana = np.asarray(ana)
    assert num.shape == ana.shape
    assert np.all(np.abs(num - ana) <= REL * np.maximum(1.0, np.abs(ana)))


# (evaluator, level-below evaluator, Euclidean argument index)
POINT_PAIRS = [
    ("D_aL", "L", 1), ("D_xL", "L", 0), ("D_aaL", "D_aL", 1), ("D_xaL", "D_aL", 0), ("D_xxL", "D_xL", 0),
    ("D_pH", "H", 1), ("D_xH", "H", 0), ("D_ppH", "D_pH", 1), ("D_xpH", "D_pH", 0),
]
# (measure derivative, level-below evaluator, cloud argument index)
PARTICLE_PAIRS = [
    ("Dmu_a_L", "L", 3), ("Dmu_x_L", "L", 2),
    ("Dmu_a_D_aL", "D_aL", 3), ("Dmu_x_D_aL", "D_aL", 2),
    ("Dmu_a_D_xL", "D_xL", 3), ("Dmu_x_D_xL", "D_xL", 2),
    ("Dmu_a_H", "H", 3), ("Dmu_x_H", "H", 2),
    ("Dmu_a_D_pH", "D_pH", 3), ("Dmu_x_D_pH", "D_pH", 2),
]


@pytest.mark.parametrize("name", list(MODELS))
@pytest.mark.parametrize("deriv,base,k", POINT_PAIRS)
def test_point_derivatives_match_finite_differences(name, deriv, base, k):
    model = MODELS[name]
    args = _args(1)
    _close(_fd_point(getattr(model, base), args, k), getattr(model, deriv)(*args))


@pytest.mark.parametrize("name", list(MODELS))
@pytest.mark.parametrize("deriv,base,k", PARTICLE_PAIRS)
def test_measure_derivatives_match_particle_perturbation(name, deriv, base, k):
    model = MODELS[name]
    args = _args(2)
    j = 1
    ana = getattr(model, deriv)(*args, args[2][:, j], args[3][:, j])
    _close(_fd_particle(getattr(model, base), args, k, j), ana)


@pytest.mark.parametrize("name", list(MODELS))
def test_terminal_derivatives(name):
    model = MODELS[name]
    x, _, cx, _ = _args(3)
    args = [x, cx]
    _close(_fd_point(model.G, args, 0), model.D_xG(x, cx))
    _close(_fd_point(model.D_xG, args, 0), model.D_xxG(x, cx))
    _close(_particle_g(model.G, x, cx), model.Dm_G(x, cx, cx[:, 1]))
    _close(_particle_g(model.D_xG, x, cx), model.Dm_D_xG(x, cx, cx[:, 1]))


def _particle_g(f, x, cx, j=1):
    cols = []
    for c in range(D):
        up, dn = cx.copy(), cx.copy()
        up[:, j, c] += H_FD
        dn[:, j, c] -= H_FD
        cols.append(NCLOUD * (f(x, up) - f(x, dn)) / (2 * H_FD))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("name", list(MODELS))
def test_legendre_first_order_condition(name):
    model = MODELS[name]
    x, p, cx, ca = _args(4)
    a = -model.D_pH(x, p, cx, ca)
    assert np.max(np.abs(p + model.D_aL(x, a, cx, ca))) < 1e-8
    # the maximizer attains the supremum
    val = -np.sum(a * p, -1) - model.L(x, a, cx, ca)
    np.testing.assert_allclose(model.H(x, p, cx, ca), val, atol=1e-10)
    rng = np.random.default_rng(0)
    for _ in range(5):
        b = a + 0.1 * rng.normal(size=a.shape)
        assert np.all(model.H(x, p, cx, ca) >= -np.sum(b * p, -1) - model.L(x, b, cx, ca) - 1e-10)


def test_analytic_hamiltonian_matches_inner_maximization():
    spec = LqSpec(lam=0.5, c_x=0.3, q_x=0.2, dim=D)
    model = lq_model(spec)
    x, p, cx, ca = _args(5)
    from mfgc.model import Model

    numeric = Model.argmax(model, x, p, cx, ca)
    np.testing.assert_allclose(-model.D_pH(x, p, cx, ca), numeric, atol=1e-10)


def test_lq_closed_forms():
    decoupled = lq_model(LqSpec())
    x = np.zeros((1, 1))
    cloud = np.ones((1, 4, 1))
    assert decoupled.D_pH(x, np.array([[1.7]]), cloud, cloud)[0, 0] == pytest.approx(1.7)
    m = lq_model(LqSpec(lam=0.5))
    assert m.argmax(x, np.array([[1.0]]), cloud, np.zeros((1, 4, 1)))[0, 0] == pytest.approx(-1.0)
    ca = np.full((1, 4, 1), 2.0)
    assert m.argmax(x, np.array([[1.0]]), cloud, ca)[0, 0] == pytest.approx(-2.0)
    from mfgc.model import Model

    assert Model.argmax(m, x, np.array([[1.0]]), cloud, ca)[0, 0] == pytest.approx(-2.0, abs=1e-12)


def test_zero_perturbation_reproduces_lq(rng):
    spec = LqSpec(lam=0.3, c_x=0.5, q_x=0.4, dim=D)
    base, pert = lq_model(spec), nonlinear_model(0.0, spec)
    x, p, cx, ca = _args(6)
    for name in ("H", "D_pH", "D_xH", "D_ppH"):
        np.testing.assert_allclose(getattr(pert, name)(x, p, cx, ca), getattr(base, name)(x, p, cx, ca), atol=1e-12)


def test_strict_convexity_of_tanh_model():
    spec = LqSpec(lam=0.5)
    model = nonlinear_model(0.1, spec)
    x, a, cx, ca = (v[:, :, :1] if v.ndim == 3 else v[:, :1] for v in _args(7))
    eig = np.linalg.eigvalsh(model.D_aaL(x, a, cx, ca))
    # |eps tanh'' abar| is bounded by eps * 0.77 * |abar|; sampled clouds keep abar moderate
    assert np.all(eig > 0)


def test_inner_newton_divergence_is_reported():
    model = nonlinear_model(5.0, LqSpec())
    model.inner_max_iter = 3
    x = np.zeros((1, 1))
    ca = np.full((1, 3, 1), 4.0)
    with pytest.raises(InnerMaxDiverged):
        model.D_pH(x, np.array([[3.0]]), ca, ca)


def test_make_model_rejects_unknown_family():
    with pytest.raises(ValueError):
        make_model("quartic")
    assert make_model("lq-tanh", eps=0.1, lam=0.2).name == "lq-tanh"


# -- clouds, moments, Wasserstein ------------------------------------------------


def test_cloud_validation():
    with pytest.raises(ValueError):
        StateCloud(np.empty((0, 1)))
    with pytest.raises(ValueError):
        StateCloud(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        StateActionCloud(np.zeros((3, 1)), np.zeros((2, 1)))


def test_moments():
    assert moment(StateCloud(np.array([3.0])), 2) == 9.0
    assert moment(StateCloud(np.array([-1.0, 1.0])), 1) == 1.0
    rng = np.random.default_rng(3)
    z = rng.standard_normal(1000)
    se = np.std(z**2) / np.sqrt(z.size)
    assert abs(moment(StateCloud(z), 2) - 1.0) < 3 * se
    sa = StateActionCloud(np.array([[3.0]]), np.array([[4.0]]))
    assert moment(sa, 1) == 5.0


def test_wasserstein_examples():
    c = StateCloud(np.array([0.0, 1.0, 5.0]))
    assert wasserstein(c, c) == 0.0
    assert wasserstein(StateCloud(np.array([0.0])), StateCloud(np.array([3.0])), 1) == 3.0
    assert wasserstein(StateCloud(np.array([0.0, 2.0])), StateCloud(np.array([1.0, 3.0])), 2) == pytest.approx(1.0)
    # unequal sizes in one dimension: {0} vs {0, 2} moves half the mass by 2
    assert wasserstein(StateCloud(np.array([0.0])), StateCloud(np.array([0.0, 2.0])), 1) == pytest.approx(1.0)


def test_wasserstein_size_mismatch_in_assignment_mode():
    a = StateActionCloud(np.zeros((3, 1)), np.zeros((3, 1)))
    b = StateActionCloud(np.zeros((4, 1)), np.zeros((4, 1)))
    with pytest.raises(SizeMismatch):
        wasserstein(a, b)


def test_assignment_matches_brute_force_coupling():
    from itertools import permutations

    rng = np.random.default_rng(8)
    a = StateActionCloud(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    b = StateActionCloud(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    pa, pb = a.stacked(), b.stacked()
    best = min(np.mean(np.sum((pa - pb[list(s)]) ** 2, axis=1)) for s in permutations(range(5)))
    assert wasserstein(a, b, 2) == pytest.approx(np.sqrt(best), rel=1e-12)


cloud_arrays = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).normal(size=(6, 2)))


@given(cloud_arrays, cloud_arrays, cloud_arrays, st.sampled_from([1, 2]))
def test_wasserstein_is_a_metric(x, y, z, order):
    cx, cy, cz = (StateActionCloud(v[:, :1], v[:, 1:]) for v in (x, y, z))
    dxy, dyx = wasserstein(cx, cy, order), wasserstein(cy, cx, order)
    assert dxy == pytest.approx(dyx, abs=1e-12)
    assert dxy <= wasserstein(cx, cz, order) + wasserstein(cz, cy, order) + 1e-12
    assert wasserstein(cx, cx, order) == pytest.approx(0.0, abs=1e-12)
