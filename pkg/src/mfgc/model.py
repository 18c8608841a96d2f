"""Model data (Lagrangian, Hamiltonian, terminal cost) and empirical measures.

Every evaluator is vectorized. Points ``x``, ``a``, ``p`` have shape
``(..., d)``; a measure argument is passed as a pair of particle arrays
``cx, ca`` of shape ``(..., n, d)`` (uniform weights). Measure derivatives
take the particle location ``(xp, ap)`` with shape ``(..., d)`` and follow
the normalization ``D_{a_j} F(cloud) = (1/n) D^a_mu F(cloud, x_j, a_j)``.

Matrix-valued derivatives are returned with shape ``(..., d, d)`` where the
row indexes the component of the differentiated vector field, e.g.
``D_xaL[r, c] = d/dx_c (D_aL)_r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InnerMaxDiverged, SizeMismatch

__all__ = [
    "StateActionCloud",
    "StateCloud",
    "LqSpec",
    "Model",
    "LqModel",
    "TanhModel",
    "lq_model",
    "nonlinear_model",
    "make_model",
    "moment",
    "wasserstein",
]

MAX_ASSIGNMENT_SIZE = 256


def _points(arr, name):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (n, d) array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class StateActionCloud:
    """Uniform empirical measure on R^d x R^d.

    ``x`` and ``a`` are ``(n, d)`` arrays; 1-D input is read as ``d = 1``.
    The same container holds state-costate clouds ``(x, p)``.
    """

    x: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        x = _points(self.x, "x")
        a = _points(self.a, "a")
        if x.shape != a.shape:
            raise ValueError(f"state and action arrays differ: {x.shape} vs {a.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def stacked(self):
        """Particles as ``(n, 2d)`` rows ``(x, a)``."""
        return np.concatenate([self.x, self.a], axis=1)


@dataclass(frozen=True)
class StateCloud:
    """Uniform empirical measure on R^d."""

    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _points(self.x, "x"))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def stacked(self):
        return self.x


def moment(cloud, order=2):
    """Moment ``M_1`` (mean norm) or ``M_2`` (mean squared norm) of a cloud.

    For a state-action cloud the norm is that of the joint vector ``(x, a)``.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    pts = cloud.stacked()
    sq = np.sum(pts**2, axis=1)
    if order == 2:
        return float(np.mean(sq))
    return float(np.mean(np.sqrt(sq)))


def _quantile_wasserstein_1d(u, v, order):
    u = np.sort(u)
    v = np.sort(v)
    # breakpoints of both quantile functions on (0, 1]
    cu = np.arange(1, u.size + 1) / u.size
    cv = np.arange(1, v.size + 1) / v.size
    levels = np.union1d(cu, cv)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - widths / 2
    qu = u[np.minimum(np.searchsorted(cu, mids), u.size - 1)]
    qv = v[np.minimum(np.searchsorted(cv, mids), v.size - 1)]
    return float(np.sum(widths * np.abs(qu - qv) ** order) ** (1.0 / order))


def wasserstein(cloud_a, cloud_b, order=2):
    """Exact W_1 / W_2 distance between two uniform clouds.

    One-dimensional state clouds use the sorted quantile coupling (any sizes).
    Everything else is solved as an optimal assignment, which needs equal
    sizes and at most 256 particles.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    pa, pb = cloud_a.stacked(), cloud_b.stacked()
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("clouds live in different dimensions")
    if pa.shape[1] == 1:
        return _quantile_wasserstein_1d(pa[:, 0], pb[:, 0], order)
    if pa.shape[0] != pb.shape[0]:
        raise SizeMismatch(f"assignment needs equal sizes, got {pa.shape[0]} and {pb.shape[0]}")
    if pa.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"clouds larger than {MAX_ASSIGNMENT_SIZE} are not supported")
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    cost = dist**order
    rows, cols = linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols]) ** (1.0 / order))


def _eye_like(x, d):
    return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()


def _diag(v):
    return v[..., :, None] * np.eye(v.shape[-1])


class Model:
    """Model-data plugin: Lagrangian ``L``, Hamiltonian ``H``, terminal cost ``G``.

    Subclasses implement the Lagrangian and terminal-cost derivatives. The
    Hamiltonian defaults to the "derived" route: an inner Newton solve of the
    first-order condition ``D_aL(x, a, mu) + p = 0`` starting from ``a = -p``.
    Analytic subclasses override the Hamiltonian evaluators and set
    ``hamiltonian_kind = "analytic"``.
    """

    name = "model"
    hamiltonian_kind = "derived"
    # True when the best response -D_pH is affine in the other players' actions
    affine_response = False
    inner_tol = 1e-12
    inner_max_iter = 100

    def __init__(self, dim, sigma0, horizon, constants=None, convexity=None):
        if dim < 1:
            raise ValueError("dim must be positive")
        if sigma0 < 0 or horizon <= 0:
            raise ValueError("need sigma0 >= 0 and horizon > 0")
        self.dim = int(dim)
        self.sigma0 = float(sigma0)
        self.horizon = float(horizon)
        # monotonicity constants C_La, C_Lx, C_G when known in closed form
        self.constants = dict(constants or {})
        self.convexity = convexity

    # -- Lagrangian -------------------------------------------------------
    def L(self, x, a, cx, ca):
        raise NotImplementedError

    def D_aL(self, x, a, cx, ca):
        raise NotImplementedError

    def D_xL(self, x, a, cx, ca):
        raise NotImplementedError

    def D_aaL(self, x, a, cx, ca):
        raise NotImplementedError

    def D_xaL(self, x, a, cx, ca):
        raise NotImplementedError

    def D_xxL(self, x, a, cx, ca):
        raise NotImplementedError

    def Dmu_a_L(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    def Dmu_x_L(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    def Dmu_a_D_aL(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    def Dmu_x_D_aL(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    def Dmu_a_D_xL(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    def Dmu_x_D_xL(self, x, a, cx, ca, xp, ap):
        raise NotImplementedError

    # -- terminal cost ----------------------------------------------------
    def G(self, x, cx):
        raise NotImplementedError

    def D_xG(self, x, cx):
        raise NotImplementedError

    def D_xxG(self, x, cx):
        raise NotImplementedError

    def Dm_G(self, x, cx, xp):
        raise NotImplementedError

    def Dm_D_xG(self, x, cx, xp):
        raise NotImplementedError

    # -- Hamiltonian (derived from L) ------------------------------------
    def argmax(self, x, p, cx, ca):
        """Maximizer of ``a -> -a.p - L(x, a, mu)``; equals ``-D_pH``."""
        x, p = np.broadcast_arrays(np.asarray(x, float), np.asarray(p, float))
        a = -p.copy()
        scale = np.maximum(1.0, np.abs(p))
        g = self.D_aL(x, a, cx, ca) + p
        for _ in range(self.inner_max_iter):
            err = np.max(np.abs(g) / scale) if g.size else 0.0
            if err < self.inner_tol:
                return a
            step = np.linalg.solve(self.D_aaL(x, a, cx, ca), g[..., None])[..., 0]
            # one halving pass guards against overshoot far from the optimum
            trial = a - step
            g_trial = self.D_aL(x, trial, cx, ca) + p
            worse = np.linalg.norm(g_trial, axis=-1) > np.linalg.norm(g, axis=-1)
            if np.any(worse):
                half = a - 0.5 * step
                trial = np.where(worse[..., None], half, trial)
                g_trial = self.D_aL(x, trial, cx, ca) + p
            a, g = trial, g_trial
        err = np.max(np.abs(g) / scale)
        if err < self.inner_tol:
            return a
        raise InnerMaxDiverged(
            f"inner Newton did not reach {self.inner_tol:g} in {self.inner_max_iter} iterations (last {err:.3e})"
        )

    def H(self, x, p, cx, ca):
        a = self.argmax(x, p, cx, ca)
        return -np.sum(a * p, axis=-1) - self.L(x, a, cx, ca)

    def D_pH(self, x, p, cx, ca):
        return -self.argmax(x, p, cx, ca)

    def D_xH(self, x, p, cx, ca):
        a = self.argmax(x, p, cx, ca)
        return -self.D_xL(x, a, cx, ca)

    def D_ppH(self, x, p, cx, ca):
        a = self.argmax(x, p, cx, ca)
        return np.linalg.inv(self.D_aaL(x, a, cx, ca))

    def D_xpH(self, x, p, cx, ca):
        a = self.argmax(x, p, cx, ca)
        return np.linalg.solve(self.D_aaL(x, a, cx, ca), self.D_xaL(x, a, cx, ca))

    def Dmu_a_H(self, x, p, cx, ca, xp, ap):
        a = self.argmax(x, p, cx, ca)
        return -self.Dmu_a_L(x, a, cx, ca, xp, ap)

    def Dmu_x_H(self, x, p, cx, ca, xp, ap):
        a = self.argmax(x, p, cx, ca)
        return -self.Dmu_x_L(x, a, cx, ca, xp, ap)

    def Dmu_a_D_pH(self, x, p, cx, ca, xp, ap):
        a = self.argmax(x, p, cx, ca)
        return np.linalg.solve(self.D_aaL(x, a, cx, ca), self.Dmu_a_D_aL(x, a, cx, ca, xp, ap))

    def Dmu_x_D_pH(self, x, p, cx, ca, xp, ap):
        a = self.argmax(x, p, cx, ca)
        return np.linalg.solve(self.D_aaL(x, a, cx, ca), self.Dmu_x_D_aL(x, a, cx, ca, xp, ap))

    def describe(self):
        return {"name": self.name, "dim": self.dim, "sigma0": self.sigma0, "horizon": self.horizon}


@dataclass(frozen=True)
class LqSpec:
    """Parameters of the linear-quadratic family.

    ``L(x,a,mu) = |a|^2/2 + lam a.abar(mu) + c_x/2 |x - q_x xbar(mu)|^2`` and
    ``G(x,m) = c_g/2 |x - q_g xbar(m)|^2``.
    """

    lam: float = 0.0
    c_x: float = 0.0
    q_x: float = 0.0
    c_g: float = 0.0
    q_g: float = 0.0
    dim: int = 1

    def __post_init__(self):
        vals = (self.lam, self.c_x, self.q_x, self.c_g, self.q_g)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("LqSpec entries must be finite")
        if self.c_x < 0 or self.c_g < 0:
            raise ValueError("c_x and c_g must be nonnegative")


class LqModel(Model):
    """Linear-quadratic model with closed-form Hamiltonian.

    ``H(x,p,mu) = |p + lam abar|^2/2 - c_x/2 |x - q_x xbar|^2`` and the
    optimal action is ``-(p + lam abar)``.
    """

    name = "lq"
    hamiltonian_kind = "analytic"
    affine_response = True

    def __init__(self, spec, sigma0=0.0, horizon=1.0):
        constants = {
            "C_La": 1.0 - abs(spec.lam),
            "C_Lx": spec.c_x * max(0.0, spec.q_x - 1.0),
            "C_G": spec.c_g * max(0.0, spec.q_g - 1.0),
        }
        super().__init__(spec.dim, sigma0, horizon, constants=constants, convexity=1.0)
        self.spec = spec

    # means of the measure argument; cx/ca broadcast over leading axes
    @staticmethod
    def _mean(c):
        return np.mean(np.asarray(c, float), axis=-2)

    def _xdev(self, x, cx, q):
        return np.asarray(x, float) - q * self._mean(cx)

    def L(self, x, a, cx, ca):
        s = self.spec
        a = np.asarray(a, float)
        dev = self._xdev(x, cx, s.q_x)
        return (
            0.5 * np.sum(a * a, axis=-1)
            + s.lam * np.sum(a * self._mean(ca), axis=-1)
            + 0.5 * s.c_x * np.sum(dev * dev, axis=-1)
        )

    def D_aL(self, x, a, cx, ca):
        a = np.asarray(a, float)
        out = a + self.spec.lam * self._mean(ca)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, np.shape(x))).copy()

    def D_xL(self, x, a, cx, ca):
        out = self.spec.c_x * self._xdev(x, cx, self.spec.q_x)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, np.shape(a))).copy()

    def _shape(self, *arrays):
        return np.broadcast_shapes(*(np.shape(v) for v in arrays))

    def D_aaL(self, x, a, cx, ca):
        return _eye_like(np.zeros(self._shape(x, a)), self.dim)

    def D_xaL(self, x, a, cx, ca):
        shp = self._shape(x, a)
        return np.zeros(shp[:-1] + (self.dim, self.dim))

    def D_xxL(self, x, a, cx, ca):
        return self.spec.c_x * _eye_like(np.zeros(self._shape(x, a)), self.dim)

    def Dmu_a_L(self, x, a, cx, ca, xp, ap):
        shp = self._shape(x, a, xp, ap)
        return np.broadcast_to(self.spec.lam * np.asarray(a, float), shp).copy()

    def Dmu_x_L(self, x, a, cx, ca, xp, ap):
        s = self.spec
        shp = self._shape(x, a, xp, ap)
        return np.broadcast_to(-s.c_x * s.q_x * self._xdev(x, cx, s.q_x), shp).copy()

    def Dmu_a_D_aL(self, x, a, cx, ca, xp, ap):
        return self.spec.lam * _eye_like(np.zeros(self._shape(x, a, xp, ap)), self.dim)

    def Dmu_x_D_aL(self, x, a, cx, ca, xp, ap):
        shp = self._shape(x, a, xp, ap)
        return np.zeros(shp[:-1] + (self.dim, self.dim))

    def Dmu_a_D_xL(self, x, a, cx, ca, xp, ap):
        shp = self._shape(x, a, xp, ap)
        return np.zeros(shp[:-1] + (self.dim, self.dim))

    def Dmu_x_D_xL(self, x, a, cx, ca, xp, ap):
        s = self.spec
        return -s.c_x * s.q_x * _eye_like(np.zeros(self._shape(x, a, xp, ap)), self.dim)

    # -- closed-form Hamiltonian -------------------------------------------
    def _shift(self, p, ca):
        return np.asarray(p, float) + self.spec.lam * self._mean(ca)

    def argmax(self, x, p, cx, ca):
        out = -self._shift(p, ca)
        return np.broadcast_to(out, self._shape(x, out)).copy()

    def H(self, x, p, cx, ca):
        s = self.spec
        q = self._shift(p, ca)
        dev = self._xdev(x, cx, s.q_x)
        return 0.5 * np.sum(q * q, axis=-1) - 0.5 * s.c_x * np.sum(dev * dev, axis=-1)

    def D_pH(self, x, p, cx, ca):
        return -self.argmax(x, p, cx, ca)

    def D_xH(self, x, p, cx, ca):
        out = -self.spec.c_x * self._xdev(x, cx, self.spec.q_x)
        return np.broadcast_to(out, self._shape(out, p)).copy()

    def D_ppH(self, x, p, cx, ca):
        return _eye_like(np.zeros(self._shape(x, p)), self.dim)

    def D_xpH(self, x, p, cx, ca):
        shp = self._shape(x, p)
        return np.zeros(shp[:-1] + (self.dim, self.dim))

    def Dmu_a_H(self, x, p, cx, ca, xp, ap):
        out = self.spec.lam * self._shift(p, ca)
        return np.broadcast_to(out, self._shape(out, x, xp, ap)).copy()

    def Dmu_x_H(self, x, p, cx, ca, xp, ap):
        s = self.spec
        out = s.c_x * s.q_x * self._xdev(x, cx, s.q_x)
        return np.broadcast_to(out, self._shape(out, p, xp, ap)).copy()

    def Dmu_a_D_pH(self, x, p, cx, ca, xp, ap):
        return self.spec.lam * _eye_like(np.zeros(self._shape(x, p, xp, ap)), self.dim)

    def Dmu_x_D_pH(self, x, p, cx, ca, xp, ap):
        shp = self._shape(x, p, xp, ap)
        return np.zeros(shp[:-1] + (self.dim, self.dim))

    # -- terminal cost -------------------------------------------------------
    def G(self, x, cx):
        s = self.spec
        dev = self._xdev(x, cx, s.q_g)
        return 0.5 * s.c_g * np.sum(dev * dev, axis=-1)

    def D_xG(self, x, cx):
        return self.spec.c_g * self._xdev(x, cx, self.spec.q_g)

    def D_xxG(self, x, cx):
        return self.spec.c_g * _eye_like(np.zeros(np.shape(self._xdev(x, cx, 0.0))), self.dim)

    def Dm_G(self, x, cx, xp):
        s = self.spec
        out = -s.c_g * s.q_g * self._xdev(x, cx, s.q_g)
        return np.broadcast_to(out, self._shape(out, xp)).copy()

    def Dm_D_xG(self, x, cx, xp):
        s = self.spec
        shp = np.broadcast_shapes(np.shape(self._xdev(x, cx, 0.0)), np.shape(xp))
        return -s.c_g * s.q_g * _eye_like(np.zeros(shp), self.dim)

    def describe(self):
        out = super().describe()
        s = self.spec
        out.update(lam=s.lam, c_x=s.c_x, q_x=s.q_x, c_g=s.c_g, q_g=s.q_g)
        return out


class TanhModel(Model):
    """LQ model plus the non-separable term ``eps * sum_k tanh(a_k) abar_k(mu)``.

    The Hamiltonian is derived from ``L`` by inner Newton maximization.
    """

    name = "lq-tanh"
    hamiltonian_kind = "derived"

    def __init__(self, eps, base, sigma0=0.0, horizon=1.0):
        self.base = LqModel(base, sigma0, horizon)
        super().__init__(base.dim, sigma0, horizon, constants=None, convexity=None)
        self.eps = float(eps)
        self.spec = base

    def _pert(self, a, ca):
        a = np.asarray(a, float)
        return np.tanh(a), 1.0 / np.cosh(a) ** 2, np.mean(np.asarray(ca, float), axis=-2)

    def L(self, x, a, cx, ca):
        th, _, abar = self._pert(a, ca)
        return self.base.L(x, a, cx, ca) + self.eps * np.sum(th * abar, axis=-1)

    def D_aL(self, x, a, cx, ca):
        _, s2, abar = self._pert(a, ca)
        return self.base.D_aL(x, a, cx, ca) + self.eps * s2 * abar

    def D_xL(self, x, a, cx, ca):
        return self.base.D_xL(x, a, cx, ca)

    def D_aaL(self, x, a, cx, ca):
        th, s2, abar = self._pert(a, ca)
        return self.base.D_aaL(x, a, cx, ca) + _diag(-2.0 * self.eps * th * s2 * abar)

    def D_xaL(self, x, a, cx, ca):
        return self.base.D_xaL(x, a, cx, ca)

    def D_xxL(self, x, a, cx, ca):
        return self.base.D_xxL(x, a, cx, ca)

    def Dmu_a_L(self, x, a, cx, ca, xp, ap):
        th, _, _ = self._pert(a, ca)
        return self.base.Dmu_a_L(x, a, cx, ca, xp, ap) + self.eps * th

    def Dmu_x_L(self, x, a, cx, ca, xp, ap):
        return self.base.Dmu_x_L(x, a, cx, ca, xp, ap)

    def Dmu_a_D_aL(self, x, a, cx, ca, xp, ap):
        _, s2, _ = self._pert(a, ca)
        return self.base.Dmu_a_D_aL(x, a, cx, ca, xp, ap) + _diag(self.eps * s2)

    def Dmu_x_D_aL(self, x, a, cx, ca, xp, ap):
        return self.base.Dmu_x_D_aL(x, a, cx, ca, xp, ap)

    def Dmu_a_D_xL(self, x, a, cx, ca, xp, ap):
        return self.base.Dmu_a_D_xL(x, a, cx, ca, xp, ap)

    def Dmu_x_D_xL(self, x, a, cx, ca, xp, ap):
        return self.base.Dmu_x_D_xL(x, a, cx, ca, xp, ap)

    def G(self, x, cx):
        return self.base.G(x, cx)

    def D_xG(self, x, cx):
        return self.base.D_xG(x, cx)

    def D_xxG(self, x, cx):
        return self.base.D_xxG(x, cx)

    def Dm_G(self, x, cx, xp):
        return self.base.Dm_G(x, cx, xp)

    def Dm_D_xG(self, x, cx, xp):
        return self.base.Dm_D_xG(x, cx, xp)

    def describe(self):
        out = self.base.describe()
        out.update(name=self.name, eps=self.eps)
        return out


def lq_model(spec, sigma0=0.0, horizon=1.0):
    """Linear-quadratic model with exact closed-form derivatives."""
    return LqModel(spec, sigma0, horizon)


def nonlinear_model(eps, base, sigma0=0.0, horizon=1.0):
    """Smooth non-separable perturbation of the LQ family (derived Hamiltonian)."""
    return TanhModel(eps, base, sigma0, horizon)


def make_model(name, sigma0=0.0, horizon=1.0, eps=0.0, **spec_kwargs):
    """Build a bundled model family by name (``"lq"`` or ``"lq-tanh"``)."""
    spec = LqSpec(**spec_kwargs)
    if name == "lq":
        return lq_model(spec, sigma0, horizon)
    if name == "lq-tanh":
        return nonlinear_model(eps, spec, sigma0, horizon)
    raise ValueError(f"unknown model family {name!r}")
